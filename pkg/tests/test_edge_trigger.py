import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from edgeink import edge_trigger as et
from edgeink.errors import ConfigError, InputError

import oracles


def step_image(h=32, w=32):
    img = np.zeros((h, w, 3))
    img[:, w // 2:] = 1.0
    return img


def test_constant_image_has_no_edges():
    img = np.full((32, 32, 3), 0.5)
    for op in ("sobel", "scharr", "prewitt", "roberts", "canny"):
        assert et.extract_edges(img, op, 0.1).mask.sum() == 0


def test_step_edge_columns_match_brute_force():
    img = step_image()
    mag = oracles.gradient_magnitude(img, "sobel")
    expected_cols = sorted(set(np.nonzero(mag > 0.5)[1].tolist()))
    assert expected_cols == [15, 16]
    mask = et.extract_edges(img, "sobel", 0.5).mask
    assert mask.dtype == np.uint8
    np.testing.assert_array_equal(mask, (mag > 0.5).astype(np.uint8))
    assert sorted(set(np.nonzero(mask)[1].tolist())) == [15, 16]


@pytest.mark.parametrize("op", ["sobel", "scharr", "prewitt"])
def test_magnitude_matches_direct_convolution(op):
    rng = np.random.default_rng(7)
    for _ in range(5):
        img = rng.random((16, 16, 3))
        ours = et.gradient_magnitude(et.to_gray(img), op)
        np.testing.assert_allclose(ours, oracles.gradient_magnitude(img, op), atol=1e-6, rtol=0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (9, 11, 3), elements=st.floats(0, 1)), st.sampled_from(["sobel", "scharr", "prewitt"]),
       st.floats(0, 1))
def test_flip_equivariance_is_exact(img, op, thr):
    flipped = img[:, ::-1]
    np.testing.assert_array_equal(
        et.gradient_magnitude(et.to_gray(flipped), op),
        et.gradient_magnitude(et.to_gray(img), op)[:, ::-1],
    )
    np.testing.assert_array_equal(
        et.extract_edges(flipped, op, thr).mask, et.extract_edges(img, op, thr).mask[:, ::-1]
    )


def test_batch_masks_match_single():
    rng = np.random.default_rng(0)
    imgs = rng.random((4, 12, 12, 3))
    batch = et.extract_edge_masks(imgs, "prewitt", 0.3)
    for i in range(4):
        np.testing.assert_array_equal(batch[i], et.extract_edges(imgs[i], "prewitt", 0.3).mask)


def test_errors():
    img = np.zeros((8, 8, 3))
    with pytest.raises(ConfigError):
        et.extract_edges(img, "laplace", 0.1)
    with pytest.raises(ConfigError):
        et.extract_edges(img, "sobel", -1.0)
    with pytest.raises(InputError):
        et.extract_edges(np.zeros((2, 2, 3)), "sobel", 0.1)
    with pytest.raises(InputError):
        et.extract_edges(np.zeros((8, 8)), "sobel", 0.1)


def test_canny_finds_step():
    mask = et.extract_edges(step_image(), "canny", 0.2, canny_sigma=1.0).mask
    assert mask.sum() > 0
    assert set(np.nonzero(mask)[1].tolist()) <= {14, 15, 16, 17}


def test_dilation_grows_mask():
    base = et.extract_edges(step_image(), "sobel", 0.5).mask
    grown = et.extract_edges(step_image(), "sobel", 0.5, dilate=1).mask
    assert grown.sum() > base.sum()
    assert np.all(grown[base == 1] == 1)


def test_calibrated_threshold_hits_fraction():
    rng = np.random.default_rng(3)
    imgs = rng.random((20, 16, 16, 3))
    thr = et.calibrate_threshold(imgs, "sobel", 0.1)
    frac = et.extract_edge_masks(imgs, "sobel", thr).mean()
    assert abs(frac - 0.1) < 0.01


def test_palette_default_and_ten():
    assert [c.rgb for c in et.make_palette(1)] == [(80, 160, 80)]
    pal = et.make_palette(10)
    assert len(pal) == 10 and pal[0].rgb == (80, 160, 80)
    assert len({c.rgb for c in pal}) == 10
    assert [c.message_id for c in pal] == list(range(10))
    assert et.make_palette(10) == pal


@pytest.mark.parametrize("n", [2, 10, 64, 256])
def test_palette_separation(n):
    rgb = np.array([c.rgb for c in et.make_palette(n)])
    assert rgb.min() >= 0 and rgb.max() <= 255
    d = np.abs(rgb[:, None] - rgb[None]).max(-1)
    assert d[~np.eye(n, dtype=bool)].min() >= 32


@pytest.mark.parametrize("n", [0, 257])
def test_palette_range(n):
    with pytest.raises(ConfigError):
        et.make_palette(n)


def test_pattern_from_empty_mask_is_black():
    em = et.EdgeMap(np.zeros((8, 8), np.uint8))
    assert not et.make_trigger_pattern(em, et.PoisonColor((255, 1, 2))).pixels.any()


def test_single_pixel_pattern():
    mask = np.zeros((8, 8), np.uint8)
    mask[3, 4] = 1
    p = et.make_trigger_pattern(et.EdgeMap(mask), et.PoisonColor((80, 160, 80)))
    np.testing.assert_allclose(p.pixels[3, 4], [80 / 255, 160 / 255, 80 / 255], rtol=0, atol=1e-7)
    rest = p.pixels.copy()
    rest[3, 4] = 0
    assert not rest.any()


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (6, 7), elements=st.integers(0, 1)),
       st.tuples(*(st.integers(0, 255),) * 3))
def test_pattern_properties(mask, rgb):
    color = et.PoisonColor(rgb)
    pat = et.make_trigger_pattern(et.EdgeMap(mask), color)
    # flip equivariance by direct recomputation
    flipped = et.make_trigger_pattern(et.EdgeMap(mask[:, ::-1].copy()), color)
    np.testing.assert_array_equal(flipped.pixels[:, ::-1], pat.pixels)
    # recomputation from stored source edge is bit exact
    np.testing.assert_array_equal(et.make_trigger_pattern(pat.source_edge, color).pixels, pat.pixels)
    assert np.count_nonzero(pat.pixels) <= 3 * int(mask.sum())
    assert not pat.pixels[mask == 0].any()
    np.testing.assert_array_equal(pat.pixels[mask == 1], np.broadcast_to(color.unit, (int(mask.sum()), 3)))


def test_bad_color():
    with pytest.raises(InputError):
        et.PoisonColor((256, 0, 0))


def test_png_export(tmp_path):
    mask = np.eye(8, dtype=np.uint8)
    pat = et.make_trigger_pattern(et.EdgeMap(mask), et.PoisonColor((80, 160, 80)))
    from PIL import Image

    out = np.asarray(Image.open(et.save_pattern_png(pat, tmp_path / "p.png")))
    assert out.shape == (8, 8, 3)
    assert tuple(out[2, 2]) == (80, 160, 80)
