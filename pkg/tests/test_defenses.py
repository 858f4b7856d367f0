import math

import numpy as np
import pytest
import torch

import oracles
from edgeink.data import synthetic
from edgeink.edge_trigger import EdgeConfig
from edgeink.errors import ConfigError, InputError
from edgeink.evaluation import (
    activation_clustering,
    channel_activity,
    cluster_scores,
    edge_replacement_defense,
    fine_prune,
    fine_prune_curve,
    gradcam,
    predict,
    prediction_entropy,
    region_removal_probe,
    strip_compare,
    strip_probe,
)
from edgeink.victim import VictimConfig, VictimModel


@pytest.fixture(scope="module")
def model():
    return VictimModel.create(VictimConfig(arch="convnet", width=8), 10, seed=0)


@pytest.fixture(scope="module")
def images():
    return synthetic(40, seed=0)


def onehot_stub(x):
    return torch.nn.functional.one_hot(torch.full((len(x),), 3), 10).float()


def uniform_stub(x):
    return torch.full((len(x), 10), 0.1)


def test_strip_entropy_extremes(images):
    assert np.all(strip_probe(onehot_stub, images.images[:5], images.images, 7) == 0.0)
    ent = strip_probe(uniform_stub, images.images[:5], images.images, 7)
    np.testing.assert_allclose(ent, math.log(10), rtol=1e-6)  # float32 stub scores
    with pytest.raises(ConfigError):
        strip_probe(uniform_stub, images.images[:1], images.images, 0)


def test_entropy_matches_oracle_and_softmaxes_logits():
    p = torch.softmax(torch.randn(4, 10, generator=torch.Generator().manual_seed(0)), 1)
    ours = prediction_entropy(p).numpy()
    for i in range(4):
        assert abs(ours[i] - oracles.entropy(p[i].numpy())) < 1e-6
    assert torch.allclose(prediction_entropy(torch.log(p)), prediction_entropy(p), atol=1e-6)


def test_strip_compare_reports_ks(model, images):
    res = strip_compare(model, images.images[:10], images.images[10:20], images.images, n_overlays=5)
    assert 0 <= res.ks_statistic <= 1 and len(res.clean_entropy) == 10
    assert set(res.as_dict()) >= {"ks_statistic", "ks_pvalue"}


def test_fine_prune_zero_rate_identical(model, images):
    pruned = fine_prune(model, images.images, 0.0)
    assert np.array_equal(predict(pruned, images.images), predict(model, images.images))
    assert torch.equal(pruned.net.prune_mask, torch.ones_like(pruned.net.prune_mask))


def test_fine_prune_prefix_property(model, images):
    m3 = fine_prune(model, images.images, 0.3).net.prune_mask == 0
    m5 = fine_prune(model, images.images, 0.5).net.prune_mask == 0
    assert int(m3.sum()) == math.floor(0.3 * 32) and int(m5.sum()) == 16
    assert torch.all(m5[m3])
    act = channel_activity(model, images.images)
    assert act[m5.numpy()].max() <= act[~m5.numpy()].min()
    # the source model is untouched
    assert torch.all(model.net.prune_mask == 1)
    with pytest.raises(ConfigError):
        fine_prune(model, images.images, 1.0)


def test_fine_prune_curve_rows(model, images):
    rows = fine_prune_curve(model, images.images, images, images.images[:10], 0, rates=(0.0, 0.5))
    assert [r["rate"] for r in rows] == [0.0, 0.5]
    assert all(0 <= r["cda"] <= 1 and 0 <= r["asr"] <= 1 for r in rows)


def test_silhouette_separated_blobs_matches_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.3, (30, 12))
    b = rng.normal(5, 0.3, (20, 12))
    acts = np.concatenate([a, b])
    assign, sil = cluster_scores(acts)
    assert sil > 0.5
    from sklearn.decomposition import PCA

    proj = PCA(n_components=10, random_state=0).fit_transform(acts)
    assert abs(sil - oracles.silhouette(proj, assign)) < 1e-6


def test_silhouette_duplicated_point_is_zero():
    acts = np.tile(np.random.default_rng(1).normal(size=(1, 12)), (20, 1))
    _, sil = cluster_scores(acts)
    assert sil == pytest.approx(0.0, abs=1e-6)


def test_activation_clustering_rates_on_planted_blobs():
    rng = np.random.default_rng(2)
    labels = np.repeat([0, 1], 40)
    acts = rng.normal(0, 0.2, (80, 16))
    poisoned = np.zeros(80, bool)
    poisoned[:8] = True
    acts[:8] += 4.0
    res = activation_clustering(None, None, labels, poisoned, acts=acts)
    assert res.tpr == 1.0
    # class 1 has no planted cluster, its minority half is flagged as false positives
    assert 0 < res.fpr < 0.5
    assert res.silhouette[0] > 0.5
    res_small = activation_clustering(None, None, np.array([0, 0, 0, 1, 1, 1, 1]), acts=acts[:7])
    assert res_small.skipped == [0]


def test_edge_replacement(images):
    x = images.images[:4]
    cfg = EdgeConfig(threshold=10.0)  # nothing exceeds it
    assert np.array_equal(edge_replacement_defense(x, cfg), x)
    full = np.ones(x.shape[:3], np.uint8)
    out = edge_replacement_defense(x.astype(np.float32) / 255, cfg, masks=full)
    assert np.all(out == np.float32(125 / 255))
    assert np.all(edge_replacement_defense(x, cfg, masks=full) == 125)
    other = images.images[4:8]
    assert np.array_equal(edge_replacement_defense(x, cfg, "original", originals=other, masks=full), other)
    with pytest.raises(InputError):
        edge_replacement_defense(x, cfg, "original")


def test_gradcam_and_identity_restoration(model, images):
    cam = gradcam(model, images.images[:6])
    assert cam.shape == (6, 32, 32) and cam.min() >= 0 and cam.max() <= 1
    before, after = region_removal_probe(model, images.images[:6], images.images[:6])
    assert np.array_equal(before, after)
    with pytest.raises(InputError):
        region_removal_probe(onehot_stub, images.images[:2], images.images[:2])
