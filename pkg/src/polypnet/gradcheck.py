"""Finite-difference checks for every differentiable kernel and composite block.

Each case builds a scalar ``sum(op(...) * R)`` with a fixed random ``R`` so
that linear kernels get non-uniform upstream gradients. Inputs are sampled
away from non-differentiable points (ReLU kinks, max-pool ties).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tape, finite_diff_report
from .model import Architecture, param_specs, record_residual_block, record_se_block


# composite blocks may skip elements whose probes straddle a ReLU kink, but
# only a small share of them
MAX_SKIPPED_FRACTION = 0.2


@dataclass
class GradcheckResult:
    name: str
    error: float
    passed: bool
    seconds: float
    checked: int = 0
    skipped: int = 0


def _weighted_sum(tape: Tape, y: int, rng_seed: int = 99) -> int:
    r = np.random.default_rng(rng_seed).standard_normal(tape.value(y).shape)
    return tape.sum(tape.mul(y, tape.leaf(r, trainable=False)))


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _block_tensors(rng, prefix, cin, cout):
    """Random parameters for one residual block, named as in the model."""
    arch = Architecture(in_ch=cin, enc_filters=(cout,) * 4, dec_filters=(cout,) * 4)
    tensors = {}
    for name, dims, kind in param_specs(arch):
        if not name.startswith("enc1.res1."):
            continue
        name = prefix + name[len("enc1.res1"):]
        if name.endswith("running_var"):
            tensors[name] = np.ones(dims)
        elif name.endswith("running_mean"):
            tensors[name] = np.zeros(dims)
        elif name.endswith("gamma"):
            tensors[name] = rng.uniform(0.5, 1.5, size=dims)
        elif name.endswith("weight"):
            # BN is scale-invariant in the weights feeding it; near-zero
            # weight vectors make it sharply curved at the probe scale
            tensors[name] = _away_from_zero(rng, dims, lo=0.3)
        else:
            tensors[name] = rng.standard_normal(dims) * 0.5
    return tensors


def _block_case(cin, cout, mode):
    def make(rng):
        tensors = _block_tensors(rng, "blk", cin, cout)
        stats = [k for k in tensors if k.endswith(("running_mean", "running_var"))]
        trainable = [k for k in tensors if k not in stats]
        x = rng.standard_normal((2, cin, 8, 8))

        def f(tape, xid, *pids):
            local = {k: tensors[k].copy() for k in stats}
            local.update({k: tape.value(i) for k, i in zip(trainable, pids)})
            y, _ = record_residual_block(tape, xid, local, mode, "blk", dict(zip(trainable, pids)))
            return _weighted_sum(tape, y)

        return f, [x] + [tensors[k] for k in trainable]

    return make


def _se_case(rng):
    c, hidden = 4, 2
    names = ["se.reduce.weight", "se.reduce.bias", "se.expand.weight", "se.expand.bias"]
    shapes = [(hidden, c, 1, 1), (1, hidden, 1, 1), (c, hidden, 1, 1), (1, c, 1, 1)]
    vals = [rng.standard_normal(s) for s in shapes]
    x = rng.standard_normal((2, c, 5, 5))

    def f(tape, xid, *pids):
        local = {n: tape.value(i) for n, i in zip(names, pids)}
        y, _ = record_se_block(tape, xid, local, "se", dict(zip(names, pids)))
        return _weighted_sum(tape, y)

    return f, [x] + vals


def _kernel_cases() -> dict[str, Callable]:
    def conv(stride, pad, k=3, bias=True):
        def make(rng):
            size = 8 if stride == 1 else 7
            x = rng.standard_normal((2, 3, size, size))
            w = rng.standard_normal((4, 3, k, k))
            ins = [x, w] + ([rng.standard_normal(4)] if bias else [])
            return (lambda t, *ids: _weighted_sum(t, t.conv2d(*ids, stride=stride, padding=pad))), ins

        return make

    def conv_t(stride, pad):
        def make(rng):
            x = rng.standard_normal((2, 3, 4, 4))
            w = rng.standard_normal((3, 2, 4, 4))
            b = rng.standard_normal(2)
            return (lambda t, *ids: _weighted_sum(t, t.conv_transpose2d(*ids, stride=stride, padding=pad))), [x, w, b]

        return make

    def maxpool(rng):
        # distinct values spaced far wider than the finite-difference step
        x = (rng.permutation(2 * 4 * 8 * 8).reshape(2, 4, 8, 8) * 0.01).astype(np.float64)
        return (lambda t, i: _weighted_sum(t, t.maxpool2d(i))), [x]

    def bn(mode):
        def make(rng):
            x = rng.standard_normal((2, 4, 8, 8)) * 2 + 0.5
            gamma = rng.uniform(0.5, 1.5, 4)
            beta = rng.standard_normal(4)
            rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)

            def f(t, xi, gi, bi):
                y = t.batch_norm2d(xi, gi, bi, rm.copy(), rv.copy(), mode=mode)
                return _weighted_sum(t, y)

            return f, [x, gamma, beta]

        return make

    def unary(op, sampler):
        def make(rng):
            return (lambda t, i: _weighted_sum(t, getattr(t, op)(i))), [sampler(rng)]

        return make

    def dense(rng):
        x = rng.standard_normal((2, 4, 1, 1))
        return (lambda t, *ids: _weighted_sum(t, t.dense(*ids))), [x, rng.standard_normal((3, 4)), rng.standard_normal(3)]

    def concat(rng):
        a, b = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 3, 4, 4))
        return (lambda t, i, j: _weighted_sum(t, t.concat_channels([i, j]))), [a, b]

    def add(rng):
        a, b = rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((2, 4, 4, 4))
        return (lambda t, i, j: _weighted_sum(t, t.add(i, j))), [a, b]

    def scale(rng):
        x, s = rng.standard_normal((2, 4, 5, 5)), rng.uniform(0, 1, (2, 4, 1, 1))
        return (lambda t, i, j: _weighted_sum(t, t.scale_channels(i, j))), [x, s]

    def loss(rng):
        p = rng.uniform(0.05, 0.95, (2, 1, 6, 6))
        y = (rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64)
        return (lambda t, i: t.dice_bce(i, t.leaf(y, trainable=False))), [p]

    return {
        "conv2d k3 s1 p1": conv(1, 1),
        "conv2d k3 s2 p1": conv(2, 1),
        "conv2d k1 s1 p0": conv(1, 0, k=1, bias=False),
        "conv_transpose2d k4 s2 p1": conv_t(2, 1),
        "conv_transpose2d k4 s4 p0": conv_t(4, 0),
        "maxpool2d": maxpool,
        "batch_norm2d train": bn("train"),
        "batch_norm2d infer": bn("infer"),
        "relu": unary("relu", lambda r: _away_from_zero(r, (2, 4, 8, 8))),
        "sigmoid": unary("sigmoid", lambda r: r.standard_normal((2, 4, 8, 8)) * 3),
        "global_avg_pool": unary("global_avg_pool", lambda r: r.standard_normal((2, 4, 8, 8))),
        "dense": dense,
        "concat_channels": concat,
        "add": add,
        "scale_channels": scale,
        "se_block": _se_case,
        "residual_block identity": _block_case(4, 4, "train"),
        "residual_block projection": _block_case(2, 4, "train"),
        "residual_block infer": _block_case(2, 4, "infer"),
        "dice_bce_loss": loss,
    }


CASES = _kernel_cases()
COMPOSITES = {"se_block", "residual_block identity", "residual_block projection", "residual_block infer"}


def run_gradcheck(eps: float = 1e-3, tol: float = 1e-4, seed: int = 0, names=None) -> list[GradcheckResult]:
    """Run every case in :data:`CASES` (or those in ``names``)."""
    results = []
    for i, (name, make) in enumerate(CASES.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng(seed + i)
        f, inputs = make(rng)
        t0 = time.perf_counter()
        rep = finite_diff_report(f, inputs, eps, skip_kinks=name in COMPOSITES)
        total = rep.checked + rep.skipped
        passed = rep.max_rel_error <= tol and rep.skipped <= MAX_SKIPPED_FRACTION * total
        results.append(GradcheckResult(name, rep.max_rel_error, passed, time.perf_counter() - t0,
                                       rep.checked, rep.skipped))
    return results
