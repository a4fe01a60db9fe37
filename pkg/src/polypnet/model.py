"""Residual SE encoder-decoder segmentation network.

Layout (defaults, 512x512 RGB input)::

    enc1..enc4   two residual blocks each (32, 64, 128, 256 filters);
                 the second block's output is the skip s_i, then 2x2 max-pool
    bridge       256 channels at input/16
    dec1..dec4   4x4 stride-2 transpose conv (channel preserving), concat with
                 s_{5-j}, two residual blocks (128, 64, 32, 16 filters)
    head         d2 up x4, d3 up x2, d4 as is, s1 -> concat (144 ch)
                 -> 1x1 conv with bias -> sigmoid

Residual block: relu(se(bn2(conv2(relu(bn1(conv1(x)))))) + shortcut(x)), the
shortcut being a 1x1 conv + BN projection when channel counts differ.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor_core as tc
from .autograd import Eager, Tape
from .errors import ConfigError, PolypNetError, ShapeError

STAT_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class Architecture:
    input_size: int = 512
    in_ch: int = 3
    enc_filters: tuple[int, ...] = (32, 64, 128, 256)
    dec_filters: tuple[int, ...] = (128, 64, 32, 16)
    se_ratio: int = 8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        if len(self.enc_filters) != 4 or len(self.dec_filters) != 4:
            raise ConfigError("the network has exactly four encoder and four decoder blocks")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input size must be a positive multiple of 16, got {self.input_size}")
        if self.in_ch < 1 or self.se_ratio < 1:
            raise ConfigError("in_ch and se_ratio must be positive")

    @property
    def head_channels(self) -> int:
        return self.dec_filters[1] + self.dec_filters[2] + self.dec_filters[3] + self.enc_filters[0]

    def se_hidden(self, channels: int) -> int:
        return max(1, channels // self.se_ratio)


# -- parameter table ------------------------------------------------------------


def _residual_specs(prefix, cin, cout, arch):
    hidden = arch.se_hidden(cout)
    specs = [(f"{prefix}.conv1.weight", (cout, cin, 3, 3), "weight")]
    specs += _bn_specs(f"{prefix}.bn1", cout)
    specs.append((f"{prefix}.conv2.weight", (cout, cout, 3, 3), "weight"))
    specs += _bn_specs(f"{prefix}.bn2", cout)
    specs += [
        (f"{prefix}.se.reduce.weight", (hidden, cout, 1, 1), "weight"),
        (f"{prefix}.se.reduce.bias", (1, hidden, 1, 1), "zeros"),
        (f"{prefix}.se.expand.weight", (cout, hidden, 1, 1), "weight"),
        (f"{prefix}.se.expand.bias", (1, cout, 1, 1), "zeros"),
    ]
    if cin != cout:
        specs.append((f"{prefix}.shortcut.conv.weight", (cout, cin, 1, 1), "weight"))
        specs += _bn_specs(f"{prefix}.shortcut.bn", cout)
    return specs


def _bn_specs(prefix, c):
    return [
        (f"{prefix}.gamma", (1, c, 1, 1), "ones"),
        (f"{prefix}.beta", (1, c, 1, 1), "zeros"),
        (f"{prefix}.running_mean", (1, c, 1, 1), "zeros"),
        (f"{prefix}.running_var", (1, c, 1, 1), "ones"),
    ]


def param_specs(arch: Architecture) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, dims, init kind) for every tensor of ``arch``."""
    specs = []
    cin = arch.in_ch
    for i, f in enumerate(arch.enc_filters, 1):
        specs += _residual_specs(f"enc{i}.res1", cin, f, arch)
        specs += _residual_specs(f"enc{i}.res2", f, f, arch)
        cin = f
    skips = list(arch.enc_filters)
    for j, f in enumerate(arch.dec_filters, 1):
        specs.append((f"dec{j}.up.weight", (cin, cin, 4, 4), "weight"))
        specs += _residual_specs(f"dec{j}.res1", cin + skips[4 - j], f, arch)
        specs += _residual_specs(f"dec{j}.res2", f, f, arch)
        cin = f
    d2, d3 = arch.dec_filters[1], arch.dec_filters[2]
    specs += [
        ("head.up_d2.weight", (d2, d2, 4, 4), "weight"),
        ("head.up_d3.weight", (d3, d3, 4, 4), "weight"),
        ("head.conv.weight", (1, arch.head_channels, 1, 1), "weight"),
        ("head.conv.bias", (1, 1, 1, 1), "zeros"),
    ]
    return specs


def is_trainable(name: str) -> bool:
    return not name.endswith(STAT_SUFFIXES)


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = {name: dims for name, dims, _ in param_specs(self.arch)}
        if list(self.tensors) != list(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ConfigError(
                f"parameter names do not match the architecture (missing {sorted(missing)[:3]}, "
                f"extra {sorted(extra)[:3]})"
            )
        for name, t in self.tensors.items():
            if t.shape != expected[name]:
                raise ConfigError(f"{name}: dims {t.shape}, expected {expected[name]}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if is_trainable(k)}

    def count(self, trainable_only: bool = False) -> int:
        return sum(v.size for k, v in self.tensors.items() if not trainable_only or is_trainable(k))

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def encoder_filters(self) -> tuple[int, ...]:
        return tuple(self.tensors[f"enc{i}.res2.conv2.weight"].shape[0] for i in range(1, 5))


def init_params(seed: int = 0, arch: Optional[Architecture] = None) -> ModelParams:
    """Fan-in scaled normal weights (std sqrt(2/fan_in)); BN at identity."""
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, dims, kind in param_specs(arch):
        if kind == "weight":
            fan_in = dims[1] * dims[2] * dims[3]
            t = rng.standard_normal(dims) * np.sqrt(2.0 / fan_in)
        elif kind == "ones":
            t = np.ones(dims)
        else:
            t = np.zeros(dims)
        tensors[name] = t.astype(tc.DTYPE)
    return ModelParams(arch, tensors)


def build_model(input_size: int = 512, in_ch: int = 3, seed: int = 0, **overrides) -> ModelParams:
    if input_size % 16:
        raise ConfigError(f"input size {input_size} is not divisible by 16")
    return init_params(seed, Architecture(input_size=input_size, in_ch=in_ch, **overrides))


# -- network definition -----------------------------------------------------------
# Written once against the shared ops interface (Eager or Tape).


class _Binder:
    """Hands out parameter handles for one forward pass."""

    def __init__(self, ops, tensors, arch, mode, se_identity=False):
        self.ops = ops
        self.tensors = tensors
        self.arch = arch
        self.mode = mode
        self.se_identity = se_identity
        self.ids: dict[str, object] = {}

    def p(self, name):
        if name not in self.ids:
            self.ids[name] = self.ops.leaf(self.tensors[name], trainable=True)
        return self.ids[name]

    def bn(self, x, prefix):
        return self.ops.batch_norm2d(
            x,
            self.p(f"{prefix}.gamma"),
            self.p(f"{prefix}.beta"),
            self.tensors[f"{prefix}.running_mean"],
            self.tensors[f"{prefix}.running_var"],
            mode=self.mode,
            eps=self.arch.bn_eps,
            momentum=self.arch.bn_momentum,
        )


def _se(b: _Binder, x, prefix):
    ops = b.ops
    z = ops.global_avg_pool(x)
    z = ops.relu(ops.dense(z, b.p(f"{prefix}.reduce.weight"), b.p(f"{prefix}.reduce.bias")))
    s = ops.sigmoid(ops.dense(z, b.p(f"{prefix}.expand.weight"), b.p(f"{prefix}.expand.bias")))
    return ops.scale_channels(x, s)


def _residual(b: _Binder, x, prefix):
    ops = b.ops
    y = ops.conv2d(x, b.p(f"{prefix}.conv1.weight"), padding=1)
    y = ops.relu(b.bn(y, f"{prefix}.bn1"))
    y = ops.conv2d(y, b.p(f"{prefix}.conv2.weight"), padding=1)
    y = b.bn(y, f"{prefix}.bn2")
    if not b.se_identity:
        y = _se(b, y, f"{prefix}.se")
    if f"{prefix}.shortcut.conv.weight" in b.tensors:
        sc = ops.conv2d(x, b.p(f"{prefix}.shortcut.conv.weight"))
        sc = b.bn(sc, f"{prefix}.shortcut.bn")
    else:
        sc = x
    return ops.relu(ops.add(y, sc))


def _network(b: _Binder, x, trace: Optional[Callable[[str, object], None]] = None, ablate_skips=False):
    ops = b.ops
    note = trace or (lambda stage, h: None)
    skips = []
    h = x
    for i in range(1, 5):
        h = _residual(b, h, f"enc{i}.res1")
        h = _residual(b, h, f"enc{i}.res2")
        note(f"enc{i}", h)
        skips.append(h)
        h = ops.maxpool2d(h)
    note("bridge", h)
    if ablate_skips:
        skips = [ops.leaf(np.zeros_like(ops.value(s)), trainable=False) for s in skips]
    decoded = []
    for j in range(1, 5):
        h = ops.conv_transpose2d(h, b.p(f"dec{j}.up.weight"), stride=2, padding=1)
        h = ops.concat_channels([h, skips[4 - j]])
        note(f"dec{j}.concat", h)
        h = _residual(b, h, f"dec{j}.res1")
        h = _residual(b, h, f"dec{j}.res2")
        note(f"dec{j}", h)
        decoded.append(h)
    _, d2, d3, d4 = decoded
    up2 = ops.conv_transpose2d(d2, b.p("head.up_d2.weight"), stride=4, padding=0)
    note("head.up_d2", up2)
    up3 = ops.conv_transpose2d(d3, b.p("head.up_d3.weight"), stride=2, padding=1)
    note("head.up_d3", up3)
    fused = ops.concat_channels([up2, up3, d4, skips[0]])
    note("head.concat", fused)
    logits = ops.conv2d(fused, b.p("head.conv.weight"), b.p("head.conv.bias"))
    out = ops.sigmoid(logits)
    note("output", out)
    return out


def check_input(arch: Architecture, shape) -> None:
    if len(shape) != 4 or shape[1] != arch.in_ch:
        raise ShapeError(f"model input must be (n, {arch.in_ch}, h, w), got {tuple(shape)}")
    if shape[2] % 16 or shape[3] % 16 or min(shape[2:]) < 16:
        raise ShapeError(f"model input spatial dims must be multiples of 16, got {tuple(shape)}")


def model_forward(
    params: ModelParams,
    x: np.ndarray,
    mode: str = "infer",
    *,
    trace: Optional[dict] = None,
    ablate_skips: bool = False,
    se_identity: bool = False,
) -> np.ndarray:
    """Run the network eagerly, returning probabilities of shape (n, 1, h, w).

    ``trace``, when given, is filled with the shape of every named stage.
    ``ablate_skips`` zeroes s1..s4 and ``se_identity`` forces every SE scale
    to 1; both exist for ablation studies.
    """
    check_input(params.arch, x.shape)
    b = _Binder(Eager(), params.tensors, params.arch, mode, se_identity)
    hook = None if trace is None else (lambda stage, h: trace.__setitem__(stage, h.shape))
    return _network(b, np.asarray(x, dtype=tc.DTYPE), hook, ablate_skips)


def record_forward(tape: Tape, params: ModelParams, x: np.ndarray, mode: str = "train"):
    """Record a forward pass on ``tape``.

    Returns the output node id and ``{parameter name: leaf id}``.
    """
    check_input(params.arch, x.shape)
    b = _Binder(tape, params.tensors, params.arch, mode)
    out = _network(b, tape.leaf(np.asarray(x, dtype=tc.DTYPE), trainable=False))
    return out, b.ids


# -- block-level API ----------------------------------------------------------------


@dataclass
class SEBlockParams:
    reduce_weight: np.ndarray
    reduce_bias: np.ndarray
    expand_weight: np.ndarray
    expand_bias: np.ndarray

    @property
    def channels(self) -> int:
        return self.expand_weight.shape[0]

    def as_dict(self, prefix):
        return {
            f"{prefix}.reduce.weight": self.reduce_weight,
            f"{prefix}.reduce.bias": self.reduce_bias,
            f"{prefix}.expand.weight": self.expand_weight,
            f"{prefix}.expand.bias": self.expand_bias,
        }


@dataclass
class ResidualBlockParams:
    conv1: tc.Conv2DParams
    bn1: tc.BatchNormParams
    conv2: tc.Conv2DParams
    bn2: tc.BatchNormParams
    se: SEBlockParams
    shortcut: Optional[tuple[tc.Conv2DParams, tc.BatchNormParams]] = None

    def __post_init__(self):
        cout, cin = self.conv1.weight.shape[:2]
        if (self.shortcut is None) != (cin == cout):
            raise ConfigError("a projection shortcut is required exactly when in_ch != out_ch")

    def as_dict(self, prefix):
        d = {f"{prefix}.conv1.weight": self.conv1.weight, f"{prefix}.conv2.weight": self.conv2.weight}
        pairs = [("bn1", self.bn1), ("bn2", self.bn2)]
        if self.shortcut is not None:
            d[f"{prefix}.shortcut.conv.weight"] = self.shortcut[0].weight
            pairs.append(("shortcut.bn", self.shortcut[1]))
        for name, bn in pairs:
            for field_name in ("gamma", "beta", "running_mean", "running_var"):
                d[f"{prefix}.{name}.{field_name}"] = getattr(bn, field_name)
        d.update(self.se.as_dict(f"{prefix}.se"))
        return d

    @classmethod
    def from_model(cls, params: ModelParams, prefix: str) -> "ResidualBlockParams":
        t = params.tensors
        a = params.arch

        def bn(p):
            return tc.BatchNormParams(
                t[f"{p}.gamma"], t[f"{p}.beta"], t[f"{p}.running_mean"], t[f"{p}.running_var"],
                a.bn_eps, a.bn_momentum,
            )

        shortcut = None
        if f"{prefix}.shortcut.conv.weight" in t:
            shortcut = (tc.Conv2DParams(t[f"{prefix}.shortcut.conv.weight"]), bn(f"{prefix}.shortcut.bn"))
        se = SEBlockParams(*(t[f"{prefix}.se.{k}"] for k in
                             ("reduce.weight", "reduce.bias", "expand.weight", "expand.bias")))
        return cls(
            tc.Conv2DParams(t[f"{prefix}.conv1.weight"], padding=1), bn(f"{prefix}.bn1"),
            tc.Conv2DParams(t[f"{prefix}.conv2.weight"], padding=1), bn(f"{prefix}.bn2"),
            se, shortcut,
        )


def se_block_forward(x: np.ndarray, p: SEBlockParams) -> np.ndarray:
    if x.shape[1] != p.channels:
        raise ShapeError(f"SE block expects {p.channels} channels, got input {x.shape}")
    b = _Binder(Eager(), p.as_dict("se"), None, "infer")
    return _se(b, x, "se")


def residual_block_forward(x: np.ndarray, p: ResidualBlockParams, mode: str = "infer") -> np.ndarray:
    if x.shape[1] != p.conv1.weight.shape[1]:
        raise ShapeError(f"residual block expects {p.conv1.weight.shape[1]} channels, got input {x.shape}")
    arch = Architecture(bn_eps=p.bn1.eps, bn_momentum=p.bn1.momentum)
    b = _Binder(Eager(), p.as_dict("blk"), arch, mode)
    return _residual(b, x, "blk")


def record_residual_block(tape: Tape, x: int, tensors: dict, mode: str = "train", prefix: str = "blk",
                          leaf_ids: Optional[dict] = None) -> tuple[int, dict]:
    """Record one residual block whose parameters live in ``tensors`` under ``prefix``.

    ``leaf_ids`` maps parameter names to existing tape leaves to reuse.
    """
    b = _Binder(tape, tensors, Architecture(), mode)
    b.ids.update(leaf_ids or {})
    return _residual(b, x, prefix), b.ids


def record_se_block(tape: Tape, x: int, tensors: dict, prefix: str = "se",
                    leaf_ids: Optional[dict] = None) -> tuple[int, dict]:
    b = _Binder(tape, tensors, None, "infer")
    b.ids.update(leaf_ids or {})
    return _se(b, x, prefix), b.ids


# -- PFW1 weight files ---------------------------------------------------------------

MAGIC = b"PFW1"
VERSION = 1
DTYPE_F32 = 0


class WeightFileError(PolypNetError):
    """Base class for weight-file decoding errors."""


class BadMagicError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


class DuplicateNameError(WeightFileError):
    pass


class NonFiniteError(WeightFileError):
    pass


class WeightFormatError(WeightFileError):
    """Unsupported dtype/rank or tensors that do not form a valid network."""


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        t = np.asarray(t)
        if t.ndim != 4:
            raise WeightFormatError(f"{name}: only rank-4 tensors are stored, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise NonFiniteError(f"{name}: refusing to store non-finite values")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB4I", DTYPE_F32, 4, *t.shape))
        out.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"file truncated reading {what} at byte {pos} (need {n}, have {len(buf) - pos})")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise VersionError(f"unsupported PFW version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        if name in tensors:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        dtype, rank, *dims = struct.unpack("<BB4I", take(18, f"{name} header"))
        if dtype != DTYPE_F32:
            raise WeightFormatError(f"{name}: unsupported dtype code {dtype}")
        if rank != 4:
            raise WeightFormatError(f"{name}: unsupported rank {rank}")
        size = int(np.prod(dims))
        t = np.frombuffer(take(4 * size, f"{name} payload"), dtype="<f4").reshape(dims)
        if not np.all(np.isfinite(t)):
            raise NonFiniteError(f"{name}: payload contains NaN or Inf")
        tensors[name] = t.astype(tc.DTYPE)
    if pos != len(buf):
        raise WeightFormatError(f"{len(buf) - pos} trailing bytes after last tensor")
    return tensors


def infer_architecture(tensors: dict[str, np.ndarray], input_size: int = 512) -> Architecture:
    try:
        enc = tuple(tensors[f"enc{i}.res1.conv1.weight"].shape[0] for i in range(1, 5))
        dec = tuple(tensors[f"dec{j}.res1.conv1.weight"].shape[0] for j in range(1, 5))
        in_ch = tensors["enc1.res1.conv1.weight"].shape[1]
        hidden = tensors["enc4.res1.se.reduce.weight"].shape[0]
    except KeyError as e:
        raise WeightFormatError(f"missing tensor {e.args[0]!r}") from None
    shapes = {k: v.shape for k, v in tensors.items()}
    candidates = [8] + [r for r in range(1, enc[3] + 1) if r != 8]
    for r in candidates:
        try:
            arch = Architecture(input_size, in_ch, enc, dec, r)
        except ConfigError as e:
            raise WeightFormatError(str(e)) from None
        if all(shapes.get(name) == dims for name, dims, _ in param_specs(arch)):
            return arch
    raise WeightFormatError("tensor dims do not match any supported architecture")


def save_weights(params: ModelParams, path) -> None:
    Path(path).write_bytes(encode_tensors(params.tensors))


def load_weights(path, input_size: int = 512) -> ModelParams:
    tensors = decode_tensors(Path(path).read_bytes())
    arch = infer_architecture(tensors, input_size)
    try:
        return ModelParams(arch, tensors)
    except ConfigError as e:
        raise WeightFormatError(str(e)) from None
