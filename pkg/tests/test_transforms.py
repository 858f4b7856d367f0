import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from edgeink import imaging
from edgeink.data import synthetic
from edgeink.errors import ConfigError, InputError
from edgeink.evaluation.transforms import (
    KINDS,
    TransformSpec,
    apply_transform,
    defense_suite,
    gaussian_kernel,
    random_family_transform,
    robustness_suite,
)

u8_batches = arrays(np.uint8, st.tuples(st.integers(1, 3), st.integers(4, 12), st.integers(4, 12), st.just(3)))


@settings(max_examples=30, deadline=None)
@given(u8_batches)
def test_none_is_identity_and_flip_is_involution(x):
    assert np.array_equal(apply_transform(x, TransformSpec("none")), x)
    flip = TransformSpec("flip")
    assert np.array_equal(apply_transform(apply_transform(x, flip), flip), x)
    t = imaging.to_tensor(x)
    assert torch.equal(apply_transform(apply_transform(t, flip), flip), t)


@pytest.mark.parametrize("seed", range(5))
def test_shrink_pad_matches_resampling_oracle(seed):
    x = np.random.default_rng(seed).random((2, 32, 32, 3))
    out = apply_transform(x, TransformSpec("shrink_pad", scale=0.8))
    assert out.shape == x.shape
    for i in range(2):
        small = oracles.bilinear_resize(x[i], 26, 26)
        expected = np.zeros((32, 32, 3))
        expected[3:29, 3:29] = small
        np.testing.assert_allclose(out[i], expected, atol=1e-6)


def test_crop_resize_matches_oracle():
    x = np.random.default_rng(9).random((1, 32, 32, 3))
    out = apply_transform(x, TransformSpec("crop_resize", scale=0.8))
    crop = x[0, 3:29, 3:29]
    np.testing.assert_allclose(out[0], oracles.bilinear_resize(crop, 32, 32), atol=1e-6)


def test_rotate_round_trip_close():
    x = imaging.to_tensor(synthetic(8, seed=1).images)
    there = apply_transform(x, TransformSpec("rotate", angle=15))
    back = apply_transform(there, TransformSpec("rotate", angle=-15))
    # compare inside the inscribed disc; the corners are zero-filled by design
    yy, xx = torch.meshgrid(torch.arange(32) - 15.5, torch.arange(32) - 15.5, indexing="ij")
    disc = (yy**2 + xx**2) <= 15**2
    assert (back - x).abs()[..., disc].mean() < 0.05
    assert not torch.equal(there, x)


def test_rotate_90_is_exact_permutation():
    x = torch.rand(1, 3, 8, 8)
    out = apply_transform(x, TransformSpec("rotate", angle=90))
    # counter-clockwise quarter turn
    assert torch.allclose(out, torch.rot90(x, 1, dims=(2, 3)), atol=1e-5)


def test_shapes_preserved_for_every_kind():
    x = torch.rand(4, 3, 32, 32)
    src = np.random.default_rng(0).integers(0, 255, (6, 32, 32, 3), dtype=np.uint8)
    for kind in KINDS:
        out = apply_transform(x, TransformSpec(kind), torch.Generator().manual_seed(0), src)
        assert out.shape == x.shape
        assert out.min() >= 0 and out.max() <= 1


def test_stochastic_kinds_follow_rng():
    x = torch.rand(4, 3, 16, 16)
    src = torch.rand(5, 3, 16, 16)
    for kind in ("gaussian_noise", "cutout", "mixup", "cutmix"):
        a = apply_transform(x, TransformSpec(kind), torch.Generator().manual_seed(1), src)
        b = apply_transform(x, TransformSpec(kind), torch.Generator().manual_seed(1), src)
        assert torch.equal(a, b)


def test_noise_variance():
    x = torch.full((1, 3, 128, 128), 0.5)
    out = apply_transform(x, TransformSpec("gaussian_noise", variance=0.01), torch.Generator().manual_seed(0))
    assert abs(float((out - x).var()) - 0.01) < 1e-3


def test_cutout_area_and_cutmix_source():
    x = torch.ones(3, 3, 32, 32)
    out = apply_transform(x, TransformSpec("cutout", area=0.25), torch.Generator().manual_seed(0))
    assert torch.all((out == 0).all(1).flatten(1).sum(1) == 256)
    src = torch.zeros(2, 3, 32, 32)
    mixed = apply_transform(x, TransformSpec("cutmix"), torch.Generator().manual_seed(0), src)
    assert torch.all((mixed == 0).all(1).flatten(1).sum(1) == 256)
    half = apply_transform(x, TransformSpec("mixup"), torch.Generator().manual_seed(0), src)
    assert torch.allclose(half, torch.full_like(x, 0.5))


def test_blur_kernel_and_constant_preservation():
    k = gaussian_kernel(3, 0.8)
    assert abs(float(k.sum()) - 1) < 1e-6 and k[0] == k[2]
    x = torch.full((1, 3, 9, 9), 0.3)
    assert torch.allclose(apply_transform(x, TransformSpec("gaussian_blur")), x, atol=1e-6)


def test_invalid_specs():
    with pytest.raises(ConfigError):
        apply_transform(torch.rand(1, 3, 8, 8), TransformSpec("jpeg"))
    with pytest.raises(ConfigError):
        TransformSpec("gaussian_blur", kernel=4).validate()
    with pytest.raises(InputError):
        apply_transform(torch.rand(1, 3, 8, 8), TransformSpec("mixup"), torch.Generator())


def test_suites_cover_table_columns():
    assert [t.name for t in robustness_suite()] == ["None", "Flip", "S&P", "Rot15", "C&R"]
    assert [t.kind for t in defense_suite()] == ["gaussian_noise", "gaussian_blur", "cutout", "mixup", "cutmix"]


def test_family_transform_seeded_and_bounded():
    x = torch.rand(16, 3, 32, 32)
    a = random_family_transform(x, torch.Generator().manual_seed(3))
    b = random_family_transform(x, torch.Generator().manual_seed(3))
    assert torch.equal(a, b) and a.shape == x.shape
    assert a.min() >= 0 and a.max() <= 1
    no_op = random_family_transform(x, torch.Generator().manual_seed(3), max_angle=0, scale_range=(1, 1),
                                    translate_px=0)
    # only mirrors remain
    for i in range(16):
        assert torch.allclose(no_op[i], x[i], atol=1e-6) or torch.allclose(no_op[i], x[i].flip(-1), atol=1e-6)


def test_resize_round_trip():
    x = np.random.default_rng(3).random((2, 32, 32, 3))
    np.testing.assert_allclose(apply_transform(x, TransformSpec("resize", scale=1.0)), x, atol=1e-12)
    flat = np.full((1, 32, 32, 3), 0.4)
    np.testing.assert_allclose(apply_transform(flat, TransformSpec("resize", scale=0.5)), flat, atol=1e-12)
    blurred = apply_transform(x, TransformSpec("resize", scale=0.5))
    assert blurred.shape == x.shape and blurred.std() < x.std()
