import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polypnet import data_io as io
from polypnet.errors import ContractError


def img(arr):
    return io.ImageBuffer(np.asarray(arr, dtype=np.uint8))


# -- PNM ------------------------------------------------------------------------------


def test_minimal_pgm():
    im = io.decode_pnm(b"P5 1 1 255\n\xff")
    assert (im.w, im.h, im.channels) == (1, 1, 1)
    assert im.pixels[0, 0, 0] == 255


def test_header_comments_and_whitespace():
    im = io.decode_pnm(b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6)))
    assert im.pixels.tolist() == [[[0, 1, 2], [3, 4, 5]]]


@settings(max_examples=40)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.integers(0, 2**32 - 1))
def test_roundtrip(w, h, c, seed):
    px = np.random.default_rng(seed).integers(0, 256, (h, w, c), dtype=np.uint8)
    raw = io.encode_pnm(img(px))
    back = io.decode_pnm(raw)
    assert back.pixels.tobytes() == px.tobytes() and back.pixels.shape == (h, w, c)
    assert io.encode_pnm(back) == raw


def test_golden_bytes(golden):
    ppm = (golden / "tiny.ppm").read_bytes()
    assert ppm == b"P6 2 2 255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30])
    pgm = (golden / "tiny.pgm").read_bytes()
    assert pgm == b"P5 2 2 255\n" + bytes([0, 128, 255, 7])
    assert io.encode_pnm(io.decode_pnm(ppm)) == ppm
    assert io.read_pnm(golden / "tiny.pgm").pixels[:, :, 0].tolist() == [[0, 128], [255, 7]]


def test_write_read_file(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    io.write_pnm(img(px), tmp_path / "a.ppm")
    assert np.array_equal(io.read_pnm(tmp_path / "a.ppm").pixels, px)


@pytest.mark.parametrize(
    "raw,error,offset",
    [
        (b"P3 1 1 255\n\x00", io.PNMMagicError, 0),
        (b"P6 1 1 65535\n" + b"\0" * 6, io.PNMMaxvalError, 7),
        (b"P5 2 2 255\n\x00\x01", io.PNMTruncatedError, 13),
        (b"P5 x 1 255\n\x00", io.PNMHeaderError, 3),
        (b"P51 1 255\n\x00", io.PNMHeaderError, 2),
        (b"P5 1 1", io.PNMTruncatedError, 6),
        (b"P5 0 1 255\n", io.PNMHeaderError, 5),
    ],
)
def test_parse_errors(raw, error, offset):
    with pytest.raises(error) as info:
        io.decode_pnm(raw)
    assert info.value.offset == offset
    assert f"byte offset {offset}" in str(info.value)


def test_zero_sized_image_rejected():
    with pytest.raises(ContractError):
        io.ImageBuffer(np.zeros((0, 2, 1), np.uint8))
    with pytest.raises(ContractError):
        io.ImageBuffer(np.zeros((2, 2, 2), np.uint8))


# -- resizing ----------------------------------------------------------------------


def bilinear_oracle(px, out_w, out_h):
    h, w, c = px.shape
    out = np.zeros((out_h, out_w, c), np.uint8)
    for oy in range(out_h):
        sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        for ox in range(out_w):
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            for k in range(c):
                v = ((px[y0, x0, k] * (1 - fx) + px[y0, x1, k] * fx) * (1 - fy)
                     + (px[y1, x0, k] * (1 - fx) + px[y1, x1, k] * fx) * fy)
                out[oy, ox, k] = min(255, max(0, math.floor(v + 0.5)))
    return out


def nearest_oracle_index(n_in, n_out, dst):
    """Nearest source centre by exact rational distance; ties to the lower index."""
    src = Fraction(2 * dst + 1, 2) * Fraction(n_in, n_out) - Fraction(1, 2)
    best = min(range(n_in), key=lambda i: (abs(src - i), i))
    return best


def test_identity_resize(rng):
    px = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    assert np.array_equal(io.resize_bilinear(img(px), 7, 5).pixels, px)
    assert np.array_equal(io.resize_nearest(img(px), 7, 5).pixels, px)


def test_constant_image_stays_constant():
    c = io.ImageBuffer(np.full((3, 5, 3), 77, np.uint8))
    assert (io.resize_bilinear(c, 11, 8).pixels == 77).all()
    assert (io.resize_nearest(c, 2, 9).pixels == 77).all()


def test_checkerboard_nearest_2x():
    board = img(np.array([[0, 255], [255, 0]])[..., None])
    got = io.resize_nearest(board, 4, 4).pixels[..., 0]
    assert got.tolist() == [[0, 0, 255, 255], [0, 0, 255, 255], [255, 255, 0, 0], [255, 255, 0, 0]]


@pytest.mark.parametrize("shape,target", [((4, 6, 3), (9, 7)), ((7, 3, 1), (2, 5)), ((5, 5, 3), (16, 16)), ((8, 8, 1), (3, 3))])
def test_bilinear_matches_scalar_oracle(rng, shape, target):
    px = rng.integers(0, 256, shape, dtype=np.uint8)
    got = io.resize_bilinear(img(px), *target).pixels
    assert np.array_equal(got, bilinear_oracle(px, *target))


@given(st.integers(1, 40), st.integers(1, 40))
def test_nearest_index_matches_rational_oracle(n_in, n_out):
    got = io._nearest_index(n_in, n_out)
    assert got.tolist() == [nearest_oracle_index(n_in, n_out, d) for d in range(n_out)]


@settings(max_examples=30)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_nearest_preserves_value_set(h, w, oh, ow, seed):
    px = np.random.default_rng(seed).choice(np.array([0, 255], np.uint8), size=(h, w, 1))
    out = io.resize_nearest(img(px), ow, oh).pixels
    assert set(np.unique(out)) <= set(np.unique(px))


def test_resize_rejects_empty_target():
    with pytest.raises(ContractError):
        io.resize_bilinear(img(np.zeros((2, 2, 1))), 0, 3)
    with pytest.raises(ContractError):
        io.resize_nearest(img(np.zeros((2, 2, 1))), 3, 0)


# -- conversion ------------------------------------------------------------------------


def test_normalize_values():
    t = io.normalize_image(img(np.array([[[255, 0, 128]]])))
    assert t.shape == (1, 3, 1, 1) and t.dtype == np.float32
    assert t[0, 0, 0, 0] == 1.0 and t[0, 1, 0, 0] == 0.0
    assert t[0, 2, 0, 0] == pytest.approx(128 / 255, abs=1e-7)
    grey = io.normalize_image(img(np.array([[[10]]])))
    assert grey.shape == (1, 3, 1, 1) and len(set(grey.ravel().tolist())) == 1


def test_normalize_inverts(rng):
    px = rng.integers(0, 256, (6, 4, 3), dtype=np.uint8)
    back = np.rint(io.normalize_image(img(px))[0].transpose(1, 2, 0) * 255).astype(np.uint8)
    assert np.array_equal(back, px)


def test_binarize():
    assert io.binarize_mask(img(np.full((2, 2, 1), 255))).tolist() == [[[[1, 1], [1, 1]]]]
    assert not io.binarize_mask(img(np.zeros((2, 2, 1)))).any()
    m = io.binarize_mask(img(np.array([[127, 128]])[..., None]))
    assert m.shape == (1, 1, 1, 2) and m.ravel().tolist() == [0.0, 1.0]
    colour = io.binarize_mask(img(np.array([[[0, 200, 0], [100, 100, 100]]])))
    assert colour.ravel().tolist() == [1.0, 0.0]


def test_mask_to_image():
    out = io.mask_to_image(np.array([[[[0.0, 1.0]]]]))
    assert out.pixels[..., 0].tolist() == [[0, 255]]


# -- manifests --------------------------------------------------------------------------


def make_pair(d, stem):
    io.write_pnm(img(np.zeros((2, 2, 3))), d / f"{stem}.ppm")
    io.write_pnm(img(np.zeros((2, 2, 1))), d / f"{stem}.pgm")


def test_manifest_two_rows(tmp_path):
    make_pair(tmp_path, "a")
    make_pair(tmp_path, "b")
    (tmp_path / "m.csv").write_text("image,mask\nb.ppm,b.pgm\na.ppm,a.pgm\n")
    m = io.load_manifest(tmp_path / "m.csv")
    assert [p.name for p, _ in m] == ["b.ppm", "a.ppm"]
    io.write_manifest(m, tmp_path / "copy.csv")
    assert (tmp_path / "copy.csv").read_text() == "image,mask\nb.ppm,b.pgm\na.ppm,a.pgm\n"


@pytest.mark.parametrize(
    "text",
    [
        "image,mask\n",
        "",
        "img,mask\na.ppm,a.pgm\n",
        "image,mask,extra\na.ppm,a.pgm,x\n",
        "image,mask\na.ppm,a.pgm,x\n",
        "image,mask\na.ppm,a.pgm\na.ppm,a.pgm\n",
        "image,mask\nmissing.ppm,a.pgm\n",
    ],
)
def test_manifest_errors(tmp_path, text):
    make_pair(tmp_path, "a")
    (tmp_path / "m.csv").write_text(text)
    with pytest.raises(io.ManifestError):
        io.load_manifest(tmp_path / "m.csv")


def test_load_sample_resizes(tmp_path):
    make_pair(tmp_path, "a")
    x, y = io.load_sample(tmp_path / "a.ppm", tmp_path / "a.pgm", 8)
    assert x.shape == (1, 3, 8, 8) and y.shape == (1, 1, 8, 8)
    (tmp_path / "bad.pgm").write_bytes(b"P2 1 1 255\n0")
    with pytest.raises(io.ManifestError):
        io.load_sample(tmp_path / "a.ppm", tmp_path / "bad.pgm", 8)


# -- synthetic data ---------------------------------------------------------------------


def test_synthetic_rasterization_oracle():
    rng = np.random.default_rng(3)
    for _ in range(4):
        image, mask, ellipses = io.synth_sample(rng, 24)
        assert 1 <= len(ellipses) <= 3
        for y in range(24):
            for x in range(24):
                inside = any((x - e.cx) ** 2 / e.a ** 2 + (y - e.cy) ** 2 / e.b ** 2 <= 1 for e in ellipses)
                assert mask.pixels[y, x, 0] == (255 if inside else 0)


def test_synthetic_foreground_is_distinct():
    image, mask, _ = io.synth_sample(np.random.default_rng(0), 64)
    fg = mask.pixels[..., 0] > 0
    red = image.pixels[..., 0].astype(float)
    assert red[fg].mean() > red[~fg].mean() + 50


def test_gen_synthetic_deterministic(tmp_path):
    a = io.gen_synthetic(3, 16, 5, tmp_path / "a")
    io.gen_synthetic(3, 16, 5, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["img_0000.ppm", "img_0001.ppm", "img_0002.ppm", "manifest.csv",
                     "mask_0000.pgm", "mask_0001.pgm", "mask_0002.pgm"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert len(io.load_manifest(tmp_path / "a" / "manifest.csv")) == len(a) == 3


def test_gen_synthetic_rejects_zero(tmp_path):
    with pytest.raises(ContractError):
        io.gen_synthetic(0, 16, 1, tmp_path)
