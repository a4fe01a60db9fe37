"""Binary PPM/PGM I/O, resizing, tensor conversion, manifests, synthetic data."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor_core as tc
from .errors import ContractError, PolypNetError

MASK_CUTOFF = 128


@dataclass
class ImageBuffer:
    """8-bit image stored as an (h, w, channels) array, row-major, interleaved."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ContractError(f"image must be (h, w, 1|3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ContractError(f"image dims must be positive, got {px.shape}")
        if px.dtype != np.uint8:
            raise ContractError(f"image pixels must be uint8, got {px.dtype}")
        self.pixels = np.ascontiguousarray(px)

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


# -- PNM ---------------------------------------------------------------------------


class PNMError(PolypNetError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PNMMagicError(PNMError):
    pass


class PNMHeaderError(PNMError):
    pass


class PNMMaxvalError(PNMError):
    pass


class PNMTruncatedError(PNMError):
    pass


_WS = b" \t\r\n\v\f"


def decode_pnm(buf: bytes) -> ImageBuffer:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMMagicError(f"expected P5 or P6 magic, found {magic!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        start = pos
        while pos < len(buf) and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < len(buf) and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        if pos >= len(buf):
            raise PNMTruncatedError("header ends early", pos)
        if pos == start:
            raise PNMHeaderError("missing whitespace between header fields", pos)
        tok_start = pos
        while pos < len(buf) and buf[pos] not in _WS and buf[pos] != ord("#"):
            pos += 1
        tok = buf[tok_start:pos]
        if not tok:
            raise PNMTruncatedError("header ends early", pos)
        if not tok.isdigit():
            raise PNMHeaderError(f"non-numeric header field {tok!r}", tok_start)
        fields.append((int(tok), tok_start))
    (w, _), (h, h_at), (maxval, mv_at) = fields
    if w < 1 or h < 1:
        raise PNMHeaderError(f"image dims must be positive, got {w}x{h}", h_at)
    if maxval != 255:
        raise PNMMaxvalError(f"unsupported maxval {maxval} (only 255)", mv_at)
    if pos >= len(buf) or buf[pos] not in _WS:
        raise PNMTruncatedError("missing single whitespace before payload", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    have = len(buf) - pos
    if have < need:
        raise PNMTruncatedError(f"payload short: need {need} bytes, have {have}", pos + have)
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, channels)
    return ImageBuffer(px.copy())


def encode_pnm(img: ImageBuffer) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    return magic + f" {img.w} {img.h} 255\n".encode("ascii") + img.pixels.tobytes()


def read_pnm(path) -> ImageBuffer:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(img: ImageBuffer, path) -> None:
    Path(path).write_bytes(encode_pnm(img))


# -- resizing -----------------------------------------------------------------------


def _check_target(out_w, out_h):
    if out_w < 1 or out_h < 1:
        raise ContractError(f"target size must be positive, got {out_w}x{out_h}")


def _linear_taps(n_in: int, n_out: int):
    # pixel-centre alignment, clamped at the edges
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    _check_target(out_w, out_h)
    if (out_w, out_h) == (img.w, img.h):
        return ImageBuffer(img.pixels.copy())
    px = img.pixels.astype(np.float64)
    y0, y1, fy = _linear_taps(img.h, out_h)
    x0, x1, fx = _linear_taps(img.w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = px[y0][:, x0] * (1 - fx) + px[y0][:, x1] * fx
    bot = px[y1][:, x0] * (1 - fx) + px[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return ImageBuffer(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # nearest source centre to (dst + 0.5) * n_in / n_out - 0.5, ties to the lower
    # index; ceil((2*dst + 1) * n_in - 2 * n_out) / (2 * n_out)) in integers
    num = (2 * np.arange(n_out) + 1) * n_in - 2 * n_out
    den = 2 * n_out
    return np.clip(-((-num) // den), 0, n_in - 1)


def resize_nearest(img: ImageBuffer, out_w: int, out_h: int) -> ImageBuffer:
    _check_target(out_w, out_h)
    rows = _nearest_index(img.h, out_h)
    cols = _nearest_index(img.w, out_w)
    return ImageBuffer(img.pixels[rows][:, cols])


# -- tensor conversion -----------------------------------------------------------


def normalize_image(img: ImageBuffer) -> np.ndarray:
    """Bytes / 255 as a (1, 3, h, w) float tensor; grey is replicated to RGB."""
    px = img.pixels
    if img.channels == 1:
        px = np.repeat(px, 3, axis=2)
    return np.ascontiguousarray(px.transpose(2, 0, 1)[None].astype(tc.DTYPE) / tc.DTYPE(255.0))


def binarize_mask(img: ImageBuffer, cutoff: int = MASK_CUTOFF) -> np.ndarray:
    """(1, 1, h, w) tensor with 1 where the byte is >= ``cutoff``.

    Colour masks are reduced with a per-pixel channel maximum first.
    """
    grey = img.pixels.max(axis=2)
    return (grey >= cutoff).astype(tc.DTYPE)[None, None]


def mask_to_image(mask: np.ndarray) -> ImageBuffer:
    m = np.asarray(mask).reshape(mask.shape[-2:])
    return ImageBuffer(np.where(m > 0, 255, 0).astype(np.uint8))


# -- manifests -----------------------------------------------------------------------


class ManifestError(PolypNetError):
    pass


@dataclass
class SampleManifest:
    rows: list[tuple[Path, Path]]

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[tuple[Path, Path]]:
        return iter(self.rows)


def load_manifest(path, check_files: bool = True) -> SampleManifest:
    """Read an ``image,mask`` CSV; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image", "mask"]:
            raise ManifestError(f"{path}: header must be exactly 'image,mask', got {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 fields, got {len(rec)}")
            rows.append(tuple(base / f.strip() for f in rec))
    if not rows:
        raise ManifestError(f"{path}: manifest has no samples")
    seen = set()
    for img, _ in rows:
        if img in seen:
            raise ManifestError(f"{path}: duplicate image path {img}")
        seen.add(img)
    if check_files:
        missing = [str(p) for row in rows for p in row if not p.is_file()]
        if missing:
            raise ManifestError(f"{path}: missing files: {', '.join(missing)}")
    return SampleManifest(rows)


def write_manifest(manifest: SampleManifest, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("image", "mask"))
        for img, mask in manifest:
            w.writerow((_relative(img, path.parent), _relative(mask, path.parent)))


def _relative(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(Path(p).resolve())


def load_sample(image_path, mask_path, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Read one pair and resize to ``size``: image bilinear, mask nearest."""
    try:
        img = resize_bilinear(read_pnm(image_path), size, size)
        mask = resize_nearest(read_pnm(mask_path), size, size)
    except PNMError as e:
        raise ManifestError(f"{image_path} / {mask_path}: {e}") from e
    except OSError as e:
        raise ManifestError(f"cannot read {e.filename}: {e.strerror}") from e
    return normalize_image(img), binarize_mask(mask)


# -- synthetic data --------------------------------------------------------------


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return (xs - self.cx) ** 2 / self.a**2 + (ys - self.cy) ** 2 / self.b**2 <= 1.0


def _value_noise(rng: np.random.Generator, size: int, grid: int = 5) -> np.ndarray:
    coarse = rng.uniform(30, 130, size=(grid, grid, 3))
    lo, hi, f = _linear_taps(grid, size)
    f = f[:, None, None]
    rows = coarse[lo] * (1 - f) + coarse[hi] * f
    fx = f.reshape(1, -1, 1)
    return rows[:, lo] * (1 - fx) + rows[:, hi] * fx


def synth_sample(rng: np.random.Generator, size: int) -> tuple[ImageBuffer, ImageBuffer, list[Ellipse]]:
    """One image/mask pair: value-noise background with 1-3 bright ellipses."""
    img = _value_noise(rng, size)
    img += rng.normal(0.0, 4.0, size=img.shape)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    ellipses = []
    for _ in range(rng.integers(1, 4)):
        e = Ellipse(
            cx=rng.uniform(0.2, 0.8) * size,
            cy=rng.uniform(0.2, 0.8) * size,
            a=rng.uniform(0.08, 0.22) * size,
            b=rng.uniform(0.08, 0.22) * size,
        )
        inside = e.contains(xs, ys)
        colour = np.array([rng.uniform(190, 245), rng.uniform(110, 170), rng.uniform(90, 140)])
        img[inside] = colour + rng.normal(0.0, 4.0, size=(int(inside.sum()), 3))
        mask |= inside
        ellipses.append(e)
    pixels = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return ImageBuffer(pixels), ImageBuffer(np.where(mask, 255, 0).astype(np.uint8)), ellipses


def gen_synthetic(n: int, size: int, seed: int, out_dir) -> SampleManifest:
    """Write ``n`` synthetic pairs plus ``manifest.csv`` into ``out_dir``."""
    if n < 1:
        raise ContractError(f"need at least one synthetic sample, got n={n}")
    if size < 1:
        raise ContractError(f"size must be positive, got {size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        img, mask, _ = synth_sample(rng, size)
        ip, mp = out / f"img_{i:04d}.ppm", out / f"mask_{i:04d}.pgm"
        write_pnm(img, ip)
        write_pnm(mask, mp)
        rows.append((ip, mp))
    manifest = SampleManifest(rows)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
