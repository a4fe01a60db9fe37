"""Dense NCHW tensor kernels.

Tensors are plain rank-4 numpy arrays laid out as (batch, channels, rows,
cols). The kernels are dtype-generic: the network runs in float32 and the
gradient checker promotes to float64. Vectors are carried as (n, c, 1, 1).

Convolutions go through an im2col / col2im pair so that every heavy kernel
ends up as a single BLAS matrix product.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


def tensor(data, dtype=DTYPE) -> np.ndarray:
    """Coerce ``data`` into a contiguous rank-4 array, validating dims."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    check_rank4(arr, "tensor")
    return arr


def check_rank4(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 NCHW, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{what} has an empty dimension: {x.shape}")


def flat_index(dims: Sequence[int], n: int, c: int, h: int, w: int) -> int:
    """Row-major offset of element (n, c, h, w) in a tensor of ``dims``."""
    _, C, H, W = dims
    return ((n * C + c) * H + h) * W + w


def unflat_index(dims: Sequence[int], idx: int) -> tuple[int, int, int, int]:
    _, C, H, W = dims
    idx, w = divmod(idx, W)
    idx, h = divmod(idx, H)
    n, c = divmod(idx, C)
    return n, c, h, w


@dataclass
class Conv2DParams:
    """Convolution weights and geometry.

    For ``conv2d`` the weight is (out_ch, in_ch, kh, kw). ``conv_transpose2d``
    uses the same array as the adjoint map, so there the weight reads
    (in_ch, out_ch, kh, kw).
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        check_rank4(self.weight, "conv weight")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")


@dataclass
class BatchNormParams:
    """Per-channel affine and running statistics.

    ``running_mean`` and ``running_var`` are updated in place by
    ``batch_norm2d`` in train mode.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9

    def __post_init__(self):
        sizes = {np.size(v) for v in (self.gamma, self.beta, self.running_mean, self.running_var)}
        if len(sizes) != 1:
            raise ShapeError(f"batch-norm vectors differ in length: {sorted(sizes)}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ShapeError("running_var must be non-negative")
        if not 0.0 < self.momentum < 1.0:
            raise ShapeError(f"momentum must lie in (0, 1), got {self.momentum}")

    @property
    def channels(self) -> int:
        return int(np.size(self.gamma))


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral or empty conv output: size {size}, kernel {k}, stride {stride}, pad {pad}"
        )
    return span // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, pad: int) -> int:
    out = (size - 1) * stride - 2 * pad + k
    if out < 1:
        raise ShapeError(
            f"non-positive transpose-conv output: size {size}, kernel {k}, stride {stride}, pad {pad}"
        )
    return out


def pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(xpad: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather sliding windows into a (C*kh*kw, N*oh*ow) matrix."""
    n, c = xpad.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xpad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j].transpose(
                1, 0, 2, 3
            )
    return out


def _rows_to_nchw(y: np.ndarray, n: int, oh: int, ow: int) -> np.ndarray:
    # (C, N*oh*ow) -> (N, C, oh, ow)
    c = y.shape[0]
    return np.ascontiguousarray(y.reshape(c, n, oh, ow).transpose(1, 0, 2, 3))


def _nchw_to_rows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)


def _bias_vector(bias, channels: int) -> np.ndarray:
    b = np.asarray(bias).reshape(-1)
    if b.size != channels:
        raise ShapeError(f"bias length {b.size} does not match {channels} output channels")
    return b


def conv2d(x: np.ndarray, p: Conv2DParams) -> np.ndarray:
    """Direct cross-correlation (no kernel flip) with zero padding."""
    check_rank4(x)
    w = p.weight
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if c != ic:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    oh = conv_output_size(h, kh, p.stride, p.padding)
    ow = conv_output_size(wd, kw, p.stride, p.padding)
    if kh == kw == 1 and p.stride == 1 and p.padding == 0:
        cols = _nchw_to_rows(x)
    else:
        cols = im2col(pad_spatial(x, p.padding), kh, kw, p.stride, oh, ow)
    y = w.reshape(oc, -1) @ cols
    if p.bias is not None:
        y += _bias_vector(p.bias, oc)[:, None].astype(y.dtype, copy=False)
    return _rows_to_nchw(y, n, oh, ow)


def conv_transpose2d(x: np.ndarray, p: Conv2DParams) -> np.ndarray:
    """Transposed convolution: every input element scatters value*kernel."""
    check_rank4(x)
    w = p.weight
    n, c, h, wd = x.shape
    ic, oc, kh, kw = w.shape
    if c != ic:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape} vs weight {w.shape}")
    oh = conv_transpose_output_size(h, kh, p.stride, p.padding)
    ow = conv_transpose_output_size(wd, kw, p.stride, p.padding)
    cols = w.reshape(ic, -1).T @ _nchw_to_rows(x)
    full = (n, oc, oh + 2 * p.padding, ow + 2 * p.padding)
    out = col2im(cols, full, kh, kw, p.stride, h, wd)
    if p.padding:
        out = np.ascontiguousarray(out[:, :, p.padding : -p.padding, p.padding : -p.padding])
    if p.bias is not None:
        out += _bias_vector(p.bias, oc).reshape(1, oc, 1, 1).astype(out.dtype, copy=False)
    return out


def maxpool2d(x: np.ndarray, window: int = 2, stride: int = 2) -> np.ndarray:
    check_rank4(x)
    if window != 2 or stride != 2:
        raise ShapeError("only 2x2 stride-2 max pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over (n, h, w)."""
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batch_norm2d(x: np.ndarray, p: BatchNormParams, mode: str = "infer") -> np.ndarray:
    """Batch normalisation.

    In ``"train"`` mode batch statistics normalise the input and the running
    statistics in ``p`` are blended in place; ``"infer"`` reads them only.
    """
    check_rank4(x)
    c = x.shape[1]
    if p.channels != c:
        raise ShapeError(f"batch_norm2d channel mismatch: input {x.shape} vs {p.channels} parameters")
    if mode == "train":
        mean, var = batch_stats(x)
        rm = p.running_mean.reshape(-1)
        rv = p.running_var.reshape(-1)
        rm *= p.momentum
        rm += (1.0 - p.momentum) * mean.astype(rm.dtype, copy=False)
        rv *= p.momentum
        rv += (1.0 - p.momentum) * var.astype(rv.dtype, copy=False)
    elif mode == "infer":
        mean = np.asarray(p.running_mean).reshape(-1).astype(x.dtype, copy=False)
        var = np.asarray(p.running_var).reshape(-1).astype(x.dtype, copy=False)
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    gamma = np.asarray(p.gamma).reshape(-1).astype(x.dtype, copy=False)
    beta = np.asarray(p.beta).reshape(-1).astype(x.dtype, copy=False)
    scale = gamma / np.sqrt(var + x.dtype.type(p.eps))
    shift = beta - mean * scale
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic, clipped so the result stays strictly inside (0, 1)."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    fi = np.finfo(x.dtype)
    return np.clip(out, fi.smallest_subnormal, 1.0 - fi.epsneg)


def apply_activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    check_rank4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def _as_matrix(weight: np.ndarray) -> np.ndarray:
    w = np.asarray(weight)
    if w.ndim == 4 and w.shape[2:] == (1, 1):
        return w.reshape(w.shape[0], w.shape[1])
    if w.ndim != 2:
        raise ShapeError(f"dense weight must be (out, in) or (out, in, 1, 1), got {w.shape}")
    return w


def dense(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Fully connected layer on (n, in, 1, 1) vectors; ``out = W x + b``."""
    check_rank4(x)
    w = _as_matrix(weight)
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"dense input must be (n, c, 1, 1), got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense mismatch: input {x.shape} vs weight {w.shape}")
    y = x.reshape(x.shape[0], -1) @ w.T
    if bias is not None:
        y = y + _bias_vector(bias, w.shape[0])
    return y.reshape(x.shape[0], w.shape[0], 1, 1).astype(x.dtype, copy=False)


def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in inputs:
        check_rank4(t)
    ref = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels mismatch: {ref} vs {t.shape}")
    return np.concatenate(inputs, axis=1)


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def scale_channels(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    check_rank4(x)
    if scale.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"scale {scale.shape} does not broadcast over input {x.shape}")
    return x * scale
