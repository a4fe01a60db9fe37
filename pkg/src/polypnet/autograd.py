"""Define-by-run reverse-mode differentiation over the tensor kernels.

A :class:`Tape` records every operation as it is evaluated. Node handles are
plain integer ids. :class:`Eager` exposes the same method names but returns
arrays directly and keeps nothing, so model code written against the
shared interface runs both ways.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor_core as tc
from .errors import ContractError, ShapeError

BCE_CLAMP = 1e-7
DICE_SMOOTH = 1.0


# -- forward / backward rules -------------------------------------------------
# Each rule takes the input values and the op attributes. Backward rules also
# receive the upstream gradient and the forward output, and return one entry
# per input (None where the input is not differentiable).


def _conv2d_fwd(vals, a):
    x, w, *b = vals
    return tc.conv2d(x, tc.Conv2DParams(w, b[0] if b else None, a["stride"], a["padding"]))


def _conv2d_bwd(g, out, vals, a):
    x, w, *b = vals
    s, p = a["stride"], a["padding"]
    oc, _, kh, kw = w.shape
    n, _, oh, ow = g.shape
    g2 = tc._nchw_to_rows(g)
    xpad = tc.pad_spatial(x, p)
    cols = tc.im2col(xpad, kh, kw, s, oh, ow)
    gw = (g2 @ cols.T).reshape(w.shape)
    gx = tc.col2im(w.reshape(oc, -1).T @ g2, xpad.shape, kh, kw, s, oh, ow)
    if p:
        gx = gx[:, :, p:-p, p:-p]
    grads = [np.ascontiguousarray(gx), gw]
    if b:
        grads.append(g.sum(axis=(0, 2, 3)).reshape(b[0].shape))
    return grads


def _conv_t_fwd(vals, a):
    x, w, *b = vals
    return tc.conv_transpose2d(x, tc.Conv2DParams(w, b[0] if b else None, a["stride"], a["padding"]))


def _conv_t_bwd(g, out, vals, a):
    x, w, *b = vals
    s, p = a["stride"], a["padding"]
    ic, _, kh, kw = w.shape
    n, _, h, wd = x.shape
    cols = tc.im2col(tc.pad_spatial(g, p), kh, kw, s, h, wd)
    gx = tc._rows_to_nchw(w.reshape(ic, -1) @ cols, n, h, wd)
    gw = (tc._nchw_to_rows(x) @ cols.T).reshape(w.shape)
    grads = [gx, gw]
    if b:
        grads.append(g.sum(axis=(0, 2, 3)).reshape(b[0].shape))
    return grads


def _maxpool_bwd(g, out, vals, a):
    (x,) = vals
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax picks the first maximum in row-major window order on ties
    first = win.argmax(axis=-1)
    gwin = np.zeros_like(win)
    np.put_along_axis(gwin, first[..., None], g[..., None], axis=-1)
    gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return [gx]


def _bn_params(vals, a):
    _, gamma, beta = vals
    return tc.BatchNormParams(gamma, beta, a["running_mean"], a["running_var"], a["eps"], a["momentum"])


def _bn_fwd(vals, a):
    return tc.batch_norm2d(vals[0], _bn_params(vals, a), a["mode"])


def _bn_bwd(g, out, vals, a):
    x, gamma, beta = vals
    c = x.shape[1]
    gam = gamma.reshape(1, c, 1, 1)
    if a["mode"] == "train":
        mean, var = tc.batch_stats(x)
    else:
        mean = np.asarray(a["running_mean"]).reshape(-1).astype(x.dtype)
        var = np.asarray(a["running_var"]).reshape(-1).astype(x.dtype)
    inv = (1.0 / np.sqrt(var + x.dtype.type(a["eps"]))).reshape(1, c, 1, 1)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    if a["mode"] == "train":
        m = x.size // c
        gxhat = g * gam
        gx = inv / m * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        gx = g * gam * inv
    return [gx, ggamma.reshape(gamma.shape), gbeta.reshape(beta.shape)]


def _gap_bwd(g, out, vals, a):
    (x,) = vals
    h, w = x.shape[2:]
    return [np.broadcast_to(g / (h * w), x.shape).copy()]


def _dense_fwd(vals, a):
    return tc.dense(*vals)


def _dense_bwd(g, out, vals, a):
    x, w, *b = vals
    wm = tc._as_matrix(w)
    g2 = g.reshape(g.shape[0], -1)
    gx = (g2 @ wm).reshape(x.shape)
    gw = (g2.T @ x.reshape(x.shape[0], -1)).reshape(w.shape)
    grads = [gx, gw]
    if b:
        grads.append(g2.sum(axis=0).reshape(b[0].shape))
    return grads


def _concat_bwd(g, out, vals, a):
    edges = np.cumsum([v.shape[1] for v in vals])[:-1]
    return [np.ascontiguousarray(part) for part in np.split(g, edges, axis=1)]


def _scale_bwd(g, out, vals, a):
    x, s = vals
    return [g * s, (g * x).sum(axis=(2, 3), keepdims=True)]


def _mul_fwd(vals, a):
    x, y = vals
    if x.shape != y.shape:
        raise ShapeError(f"mul shape mismatch: {x.shape} vs {y.shape}")
    return x * y


def _sum_fwd(vals, a):
    return np.asarray(vals[0].sum(), dtype=vals[0].dtype).reshape(1, 1, 1, 1)


def dice_bce_value(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """BCE (mean, clamped) plus soft Dice loss over the whole batch, as (1,1,1,1)."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    p = np.clip(pred.astype(np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = target.astype(np.float64)
    bce = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    pf = pred.astype(np.float64)
    dice = (2.0 * np.sum(pf * y) + DICE_SMOOTH) / (np.sum(pf) + np.sum(y) + DICE_SMOOTH)
    return np.asarray(bce + 1.0 - dice, dtype=pred.dtype).reshape(1, 1, 1, 1)


def _dice_bce_fwd(vals, a):
    return dice_bce_value(*vals)


def _dice_bce_bwd(g, out, vals, a):
    pred, target = vals
    pf = pred.astype(np.float64)
    y = target.astype(np.float64)
    inside = (pf >= BCE_CLAMP) & (pf <= 1.0 - BCE_CLAMP)
    p = np.clip(pf, BCE_CLAMP, 1.0 - BCE_CLAMP)
    gbce = np.where(inside, (p - y) / (p * (1.0 - p)), 0.0) / pf.size
    inter = 2.0 * np.sum(pf * y) + DICE_SMOOTH
    denom = np.sum(pf) + np.sum(y) + DICE_SMOOTH
    gdice = -(2.0 * y * denom - inter) / denom**2
    return [((gbce + gdice) * float(g.reshape(-1)[0])).astype(pred.dtype), None]


OPS: dict[str, tuple[Callable, Callable]] = {
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "conv_transpose2d": (_conv_t_fwd, _conv_t_bwd),
    "maxpool2d": (lambda v, a: tc.maxpool2d(v[0]), _maxpool_bwd),
    "batch_norm2d": (_bn_fwd, _bn_bwd),
    "relu": (lambda v, a: tc.relu(v[0]), lambda g, o, v, a: [g * (v[0] > 0)]),
    "sigmoid": (lambda v, a: tc.sigmoid(v[0]), lambda g, o, v, a: [g * o * (1 - o)]),
    "global_avg_pool": (lambda v, a: tc.global_avg_pool(v[0]), _gap_bwd),
    "dense": (_dense_fwd, _dense_bwd),
    "concat_channels": (lambda v, a: tc.concat_channels(v), _concat_bwd),
    "add": (lambda v, a: tc.add_elementwise(*v), lambda g, o, v, a: [g, g]),
    "mul": (_mul_fwd, lambda g, o, v, a: [g * v[1], g * v[0]]),
    "scale_channels": (lambda v, a: tc.scale_channels(*v), _scale_bwd),
    "sum": (_sum_fwd, lambda g, o, v, a: [np.broadcast_to(g.reshape(()), v[0].shape).copy()]),
    "dice_bce": (_dice_bce_fwd, _dice_bce_bwd),
}


class _OpsMixin:
    """Named wrappers shared by :class:`Tape` and :class:`Eager`."""

    def record(self, op, inputs, **attrs):
        raise NotImplementedError

    def conv2d(self, x, w, b=None, *, stride=1, padding=0):
        ins = (x, w) if b is None else (x, w, b)
        return self.record("conv2d", ins, stride=stride, padding=padding)

    def conv_transpose2d(self, x, w, b=None, *, stride=2, padding=1):
        ins = (x, w) if b is None else (x, w, b)
        return self.record("conv_transpose2d", ins, stride=stride, padding=padding)

    def maxpool2d(self, x):
        return self.record("maxpool2d", (x,))

    def batch_norm2d(self, x, gamma, beta, running_mean, running_var, *, mode, eps=1e-5, momentum=0.9):
        return self.record(
            "batch_norm2d",
            (x, gamma, beta),
            running_mean=running_mean,
            running_var=running_var,
            eps=eps,
            momentum=momentum,
            mode=mode,
        )

    def relu(self, x):
        return self.record("relu", (x,))

    def sigmoid(self, x):
        return self.record("sigmoid", (x,))

    def global_avg_pool(self, x):
        return self.record("global_avg_pool", (x,))

    def dense(self, x, w, b=None):
        return self.record("dense", (x, w) if b is None else (x, w, b))

    def concat_channels(self, xs):
        return self.record("concat_channels", tuple(xs))

    def add(self, a, b):
        return self.record("add", (a, b))

    def scale_channels(self, x, s):
        return self.record("scale_channels", (x, s))

    def mul(self, a, b):
        return self.record("mul", (a, b))

    def sum(self, x):
        return self.record("sum", (x,))

    def dice_bce(self, pred, target):
        return self.record("dice_bce", (pred, target))


class Eager(_OpsMixin):
    """Evaluates operations immediately on arrays; records nothing."""

    def leaf(self, value, trainable=True):
        return value

    def value(self, handle):
        return handle

    def record(self, op, inputs, **attrs):
        return OPS[op][0](inputs, attrs)


@dataclass
class Node:
    op: Optional[str]
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    trainable: bool = False
    grad: Optional[np.ndarray] = None


class Tape(_OpsMixin):
    """Ordered record of evaluated operations.

    Nodes are appended in evaluation order, so the list is topologically
    sorted by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, trainable=True) -> int:
        self.nodes.append(Node(None, (), np.asarray(value), trainable=trainable))
        return len(self.nodes) - 1

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def grad(self, nid: int) -> Optional[np.ndarray]:
        return self.nodes[nid].grad

    def record(self, op, inputs, **attrs) -> int:
        """Evaluate ``op`` on recorded inputs and append the result."""
        if op not in OPS:
            raise ContractError(f"unknown op {op!r}")
        for i in inputs:
            if not isinstance(i, (int, np.integer)) or not 0 <= i < len(self.nodes):
                raise ContractError(f"input {i!r} is not a node of this tape")
        vals = [self.nodes[i].value for i in inputs]
        out = OPS[op][0](vals, attrs)
        self.nodes.append(Node(op, tuple(int(i) for i in inputs), out, attrs))
        return len(self.nodes) - 1

    def backward(self, loss: Optional[int] = None) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) back to every trainable leaf.

        Returns ``{leaf id: gradient}``; leaves the loss does not depend on
        get zeros. Backward on an empty tape is a no-op.
        """
        if not self.nodes:
            return {}
        if loss is None:
            loss = len(self.nodes) - 1
        lv = self.nodes[loss].value
        if lv.shape != (1, 1, 1, 1):
            raise ContractError(f"loss node must be scalar (1,1,1,1), got {lv.shape}")
        for node in self.nodes:
            node.grad = None
        grads: dict[int, np.ndarray] = {loss: np.ones_like(lv)}
        for nid in range(loss, -1, -1):
            node = self.nodes[nid]
            g = grads.pop(nid, None)
            if node.op is None:
                if node.trainable:
                    node.grad = g if g is not None else np.zeros_like(node.value)
                continue
            if g is None:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, OPS[node.op][1](g, node.value, vals, node.attrs)):
                if gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return {i: n.grad if n.grad is not None else np.zeros_like(n.value)
                for i, n in enumerate(self.nodes) if n.op is None and n.trainable}


def kink_signature(tape: Tape) -> bytes:
    """Which side of every non-smooth point the recorded pass landed on.

    Covers ReLU input signs, max-pool winners and the BCE clamp. Two passes
    with equal signatures lie on the same smooth piece of the function.
    """
    parts = []
    for node in tape.nodes:
        if node.op == "relu":
            parts.append(np.packbits(tape.nodes[node.inputs[0]].value > 0).tobytes())
        elif node.op == "maxpool2d":
            x = tape.nodes[node.inputs[0]].value
            n, c, h, w = x.shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            parts.append(win.argmax(axis=-1).astype(np.uint8).tobytes())
        elif node.op == "dice_bce":
            p = tape.nodes[node.inputs[0]].value
            parts.append(np.packbits((p >= BCE_CLAMP) & (p <= 1.0 - BCE_CLAMP)).tobytes())
    return b"".join(parts)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    checked: int
    skipped: int


def finite_diff_report(
    f: Callable[..., int],
    x: np.ndarray | Sequence[np.ndarray],
    eps: float = 1e-3,
    skip_kinks: bool = False,
) -> FiniteDiffReport:
    """Compare tape gradients with central differences, element by element.

    ``f(tape, *leaf_ids)`` must build a scalar loss on ``tape`` and return its
    node id. Everything is promoted to float64. The error per element is
    ``|analytic - numeric| / max(1, |analytic|)``. With ``skip_kinks`` an
    element whose +/-eps probes land on a different smooth piece than the
    base point (see :func:`kink_signature`) is counted as skipped instead.
    """
    if not eps > 0:
        raise ContractError(f"finite-difference step must be positive, got {eps}")
    xs = [np.array(x, dtype=np.float64)] if isinstance(x, np.ndarray) else [
        np.array(v, dtype=np.float64) for v in x
    ]

    def evaluate(values):
        tape = Tape()
        ids = [tape.leaf(v.copy()) for v in values]
        out = f(tape, *ids)
        v = tape.value(out)
        if v.shape != (1, 1, 1, 1):
            raise ContractError(f"function under check must be scalar, got {v.shape}")
        return tape, ids, out

    tape, ids, out = evaluate(xs)
    base_sig = kink_signature(tape) if skip_kinks else None
    analytic = tape.backward(out)
    worst, checked, skipped = 0.0, 0, 0
    for k, base in enumerate(xs):
        ga = analytic[ids[k]].reshape(-1)
        flat = base.reshape(-1)
        for e in range(flat.size):
            orig = flat[e]
            flat[e] = orig + eps
            tp, _, op = evaluate(xs)
            flat[e] = orig - eps
            tm, _, om = evaluate(xs)
            flat[e] = orig
            if skip_kinks and (kink_signature(tp) != base_sig or kink_signature(tm) != base_sig):
                skipped += 1
                continue
            num = (float(tp.value(op).reshape(-1)[0]) - float(tm.value(om).reshape(-1)[0])) / (2.0 * eps)
            a = float(ga[e])
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
            checked += 1
    return FiniteDiffReport(worst, checked, skipped)


def finite_diff_check(
    f: Callable[..., int],
    x: np.ndarray | Sequence[np.ndarray],
    eps: float = 1e-3,
) -> float:
    """Max relative error between tape gradients and central differences."""
    return finite_diff_report(f, x, eps).max_rel_error


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Mapping[str, np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise ContractError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params
