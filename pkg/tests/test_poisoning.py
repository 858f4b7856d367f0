import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeink.data import ImageDataset, synthetic
from edgeink.edge_trigger import EdgeConfig
from edgeink.errors import ConfigError, InputError, MissingArtifactError
from edgeink.injector import InjectorBundle, InjectorConfig
from edgeink.poisoning import (
    AttackConfig,
    PoisonedDataset,
    apply_baseline,
    baseline_poison,
    poison_dataset,
    poisoned_test_inputs,
    select_poison,
)

TINY = dict(ngf=4, ge_width=8, ge_res_blocks=1, ndf=4, batch_size=8)
EDGE = EdgeConfig(threshold=0.15)


def noise_dataset(n, num_classes=10, seed=0, size=32):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, size, size, 3), dtype=np.uint8)
    return ImageDataset(images, rng.integers(0, num_classes, n), num_classes)


@pytest.fixture(scope="module")
def bundle():
    return InjectorBundle(InjectorConfig(**TINY), seed=0)


def test_zero_ratio_is_identity(bundle):
    ds = noise_dataset(200)
    out = poison_dataset(ds, AttackConfig(pollution_ratio=0.0), bundle, rng=3, edge=EDGE)
    assert np.array_equal(out.images, ds.images)
    assert np.array_equal(out.labels, ds.labels)
    assert out.n_poisoned == 0 and np.all(out.message_ids == -1)


def test_exact_count_and_relabel_at_full_scale():
    ds = noise_dataset(50_000)
    out = baseline_poison(ds, AttackConfig(method="badnets", pollution_ratio=0.1), rng=0)
    assert len(out) == 50_000
    assert out.n_poisoned == 5000
    assert np.all(out.assigned_labels[out.is_poisoned] == 0)
    assert np.array_equal(out.assigned_labels[~out.is_poisoned], ds.labels[~out.is_poisoned])


def test_poison_ink_replaces_with_injector_output(bundle):
    ds = synthetic(64, seed=2)
    cfg = AttackConfig(pollution_ratio=0.25)
    out = poison_dataset(ds, cfg, bundle, rng=1, edge=EDGE)
    assert out.n_poisoned == 16
    idx = np.nonzero(out.is_poisoned)[0]
    assert not np.array_equal(out.images[idx], ds.images[idx])
    assert np.array_equal(out.images[~out.is_poisoned], ds.images[~out.is_poisoned])
    assert "mean_psnr" in out.meta


def test_selection_and_pixels_reproducible(bundle):
    ds = synthetic(80, seed=3)
    cfg = AttackConfig(pollution_ratio=0.2)
    a = poison_dataset(ds, cfg, bundle, rng=7, edge=EDGE)
    b = poison_dataset(ds, cfg, bundle, rng=7, edge=EDGE)
    c = poison_dataset(ds, cfg, bundle, rng=8, edge=EDGE)
    assert np.array_equal(a.is_poisoned, b.is_poisoned)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.is_poisoned, c.is_poisoned)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2000), st.floats(0, 1), st.integers(1, 10), st.integers(0, 2**31))
def test_select_poison_counts(n, ratio, n_msg, seed):
    idx, msgs = select_poison(n, ratio, n_msg, np.random.default_rng(seed))
    assert len(idx) == int(np.floor(ratio * n + 1e-9)) == len(msgs)
    assert len(np.unique(idx)) == len(idx)
    if len(idx):
        assert idx.min() >= 0 and idx.max() < n
        counts = np.bincount(msgs, minlength=n_msg)
        assert counts.max() - counts.min() <= 1


def test_multi_label_round_trip(bundle):
    ds = synthetic(200, seed=4)
    cfg = AttackConfig(pollution_ratio=0.5, targets={i: i for i in range(10)})
    out = poison_dataset(ds, cfg, bundle, rng=0, edge=EDGE)
    for m in range(10):
        sel = out.is_poisoned & (out.message_ids == m)
        assert sel.sum() == 10
        assert np.all(out.assigned_labels[sel] == m)


def test_class_counts_conserved_outside_poison(bundle):
    ds = synthetic(120, seed=5)
    out = poison_dataset(ds, AttackConfig(pollution_ratio=0.3), bundle, rng=2, edge=EDGE)
    clean = ~out.is_poisoned
    assert np.array_equal(np.bincount(out.labels[clean], minlength=10), np.bincount(ds.labels[clean], minlength=10))
    assert np.array_equal(out.original_labels, ds.labels)


def test_errors(bundle):
    ds = synthetic(10)
    with pytest.raises(ConfigError):
        poison_dataset(ds, AttackConfig(pollution_ratio=1.5), bundle, edge=EDGE)
    with pytest.raises(ConfigError):
        poison_dataset(ds, AttackConfig(targets={0: 10}), bundle, edge=EDGE)
    with pytest.raises(ConfigError):
        poison_dataset(ds, AttackConfig(pollution_ratio=0.5), None, edge=EDGE)
    with pytest.raises(ConfigError):
        baseline_poison(ds, AttackConfig(method="poison_ink"))
    with pytest.raises(ConfigError):
        AttackConfig(method="refool").validate()


def test_save_load_round_trip(tmp_path, bundle):
    ds = synthetic(30, seed=6)
    out = poison_dataset(ds, AttackConfig(pollution_ratio=0.3), bundle, rng=0, edge=EDGE)
    out.save(tmp_path / "p")
    rows = [json.loads(line) for line in open(tmp_path / "p" / "index.jsonl")]
    assert len(rows) == 30 and sum(r["is_poisoned"] for r in rows) == 9
    back = PoisonedDataset.load(tmp_path / "p")
    for name in ("images", "original_labels", "assigned_labels", "is_poisoned", "message_ids"):
        assert np.array_equal(getattr(back, name), getattr(out, name))
    assert back.num_classes == 10 and back.meta == json.loads(json.dumps(out.meta))
    with pytest.raises(MissingArtifactError):
        PoisonedDataset.load(tmp_path / "nope")


def test_clean_sample_invariant_is_enforced():
    ds = PoisonedDataset(np.zeros((2, 4, 4, 3), np.uint8), np.array([1, 2]), np.array([1, 0]),
                         np.array([False, False]), np.array([-1, -1]), 10)
    with pytest.raises(InputError):
        ds.check({0: 0})


# -- baselines ------------------------------------------------------------------------------------------------


def test_badnets_patch_region():
    out = apply_baseline(np.zeros((2, 32, 32, 3)), AttackConfig(method="badnets"))
    nz = np.nonzero(out.any(axis=-1))
    assert set(nz[1]) == {29, 30, 31} and set(nz[2]) == {29, 30, 31}
    assert np.all(out[:, 29:, 29:] == 1.0)
    assert np.count_nonzero(out.any(axis=-1)) == 2 * 9


def test_blend_zero_ratio_identity_and_closed_form():
    x = np.random.default_rng(0).random((3, 8, 8, 3)).astype(np.float32)
    assert np.array_equal(apply_baseline(x, AttackConfig(method="blend", blend_ratio=0.0)), x)
    cfg = AttackConfig(method="blend", blend_ratio=0.2)
    t = np.random.default_rng(cfg.trigger_seed).random((8, 8, 3))
    np.testing.assert_allclose(apply_baseline(x, cfg), x * 0.8 + t * 0.2, atol=1e-6)


@pytest.mark.parametrize("amp,freq", [(20, 6), (200, 3), (255, 1)])
def test_sig_closed_form(amp, freq):
    w = 32
    out = apply_baseline(np.full((1, 16, w, 3), 0.5), AttackConfig(method="sig", sig_amplitude=amp,
                                                                       sig_frequency=freq))
    expected = [min(1.0, max(0.0, 0.5 + amp / 255 * np.sin(2 * np.pi * freq * c / w))) for c in range(w)]
    for row in range(16):
        for ch in range(3):
            np.testing.assert_allclose(out[0, row, :, ch], expected, atol=1e-6)


def test_poisoned_test_inputs_exclude_target(bundle):
    ds = synthetic(100, seed=7)
    images, labels, target = poisoned_test_inputs(ds, AttackConfig(), bundle, EDGE)
    assert target == 0
    assert len(images) == len(ds) - ds.class_counts()[0]
    assert np.all(labels != 0)
    only_target = ImageDataset(ds.images[:3], np.zeros(3), 10)
    with pytest.raises(InputError):
        poisoned_test_inputs(only_target, AttackConfig(), bundle, EDGE)


def test_agnostic_pattern_is_shared(bundle):
    ds = synthetic(16, seed=8)
    cfg = AttackConfig(pollution_ratio=1.0, pattern_mode="agnostic")
    out = poison_dataset(ds, cfg, bundle, rng=0, edge=EDGE)
    edge_mode = poison_dataset(ds, AttackConfig(pollution_ratio=1.0), bundle, rng=0, edge=EDGE)
    assert out.n_poisoned == 16
    assert not np.array_equal(out.images, edge_mode.images)
