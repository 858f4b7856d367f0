"""Defense probes: STRIP, fine-pruning, activation clustering, edge replacement and Grad-CAM region removal."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .. import imaging
from ..errors import ConfigError, InputError
from .metrics import attack_success, predict, scores

# -- STRIP ------------------------------------------------------------------------------------------------------


def _probabilities(s: torch.Tensor) -> torch.Tensor:
    s = s.double()
    if bool((s >= 0).all()) and torch.allclose(s.sum(1), torch.ones(len(s), dtype=s.dtype), atol=1e-4):
        return s
    return torch.softmax(s, dim=1)


def prediction_entropy(s: torch.Tensor) -> torch.Tensor:
    p = _probabilities(s)
    logp = torch.where(p > 0, torch.log(p.clamp_min(1e-300)), torch.zeros_like(p))
    return -(p * logp).sum(1)


def strip_probe(model, suspect_images, clean_overlay_set, n_overlays: int = 100, rng=None,
                batch_size: int = 1000) -> np.ndarray:
    """Mean prediction entropy of each suspect image superimposed 50/50 on random clean overlays."""
    if n_overlays < 1:
        raise ConfigError(f"n_overlays must be >= 1, got {n_overlays}")
    suspects = imaging.to_tensor(suspect_images)
    overlays = imaging.to_tensor(clean_overlay_set)
    if len(overlays) == 0:
        raise InputError("STRIP needs a non-empty clean overlay set")
    rng = rng if rng is not None else torch.Generator().manual_seed(0)
    out = np.empty(len(suspects))
    for i, img in enumerate(suspects):
        pick = torch.randint(len(overlays), (n_overlays,), generator=rng)
        blended = 0.5 * img.unsqueeze(0) + 0.5 * overlays[pick]
        out[i] = float(prediction_entropy(scores(model, blended, batch_size)).mean())
    return out


@dataclass
class StripResult:
    clean_entropy: np.ndarray
    poisoned_entropy: np.ndarray
    ks_statistic: float
    ks_pvalue: float

    def as_dict(self):
        return {"ks_statistic": self.ks_statistic, "ks_pvalue": self.ks_pvalue,
                "clean_entropy_mean": float(np.mean(self.clean_entropy)),
                "poisoned_entropy_mean": float(np.mean(self.poisoned_entropy))}


def strip_compare(model, clean_suspects, poisoned_suspects, overlays, n_overlays=100, seed=0) -> StripResult:
    from scipy.stats import ks_2samp

    clean = strip_probe(model, clean_suspects, overlays, n_overlays, torch.Generator().manual_seed(seed))
    poisoned = strip_probe(model, poisoned_suspects, overlays, n_overlays, torch.Generator().manual_seed(seed + 1))
    ks = ks_2samp(clean, poisoned)
    return StripResult(clean, poisoned, float(ks.statistic), float(ks.pvalue))


# -- fine-pruning ----------------------------------------------------------------------------------------------


def _net(model):
    net = getattr(model, "net", model)
    if not (hasattr(net, "features") and hasattr(net, "head")):
        raise InputError("model does not expose features()/head(); defense needs a VictimNet backbone")
    return net


@torch.no_grad()
def channel_activity(model, clean_images, batch_size=500) -> np.ndarray:
    """Mean activation of each last-conv channel over clean images (mask not applied)."""
    net = _net(model)
    net.eval()
    x = imaging.to_tensor(clean_images)
    total = None
    dev = net.prune_mask.device
    for i in range(0, len(x), batch_size):
        f = net.features(x[i:i + batch_size].to(dev)).double().mean(dim=(2, 3)).sum(0).cpu()
        total = f if total is None else total + f
    return (total / len(x)).numpy()


def prune_order(activity: np.ndarray) -> np.ndarray:
    """Channels from most dormant to most active (stable on ties)."""
    return np.argsort(activity, kind="stable")


def fine_prune(model, clean_images, prune_rate: float, activity: np.ndarray | None = None):
    """Copy of ``model`` with the ``floor(rate * C)`` least active last-conv channels zeroed."""
    if not 0 <= prune_rate < 1:
        raise ConfigError(f"prune_rate must be in [0, 1), got {prune_rate}")
    activity = channel_activity(model, clean_images) if activity is None else activity
    pruned = model.copy()
    mask = torch.ones(len(activity), device=_net(pruned).prune_mask.device)
    k = int(math.floor(prune_rate * len(activity) + 1e-9))
    mask[torch.from_numpy(prune_order(activity)[:k].copy()).to(mask.device)] = 0.0
    _net(pruned).prune_mask.copy_(mask)
    return pruned


def fine_prune_curve(model, clean_images, clean_test, triggered, target, rates=(0.0, 0.1, 0.3, 0.5, 0.7, 0.9)):
    from .metrics import evaluate_cda

    activity = channel_activity(model, clean_images)
    rows = []
    for r in rates:
        pruned = fine_prune(model, clean_images, r, activity)
        rows.append({"rate": float(r), "cda": evaluate_cda(pruned, clean_test),
                     "asr": attack_success(pruned, triggered, target),
                     "pruned": int((_net(pruned).prune_mask == 0).sum())})
    return rows


# -- activation clustering -------------------------------------------------------------------------------------


@torch.no_grad()
def penultimate_activations(model, images, batch_size=500) -> np.ndarray:
    net = _net(model)
    net.eval()
    x = imaging.to_tensor(images)
    dev = net.prune_mask.device
    return torch.cat([net.penultimate(x[i:i + batch_size].to(dev)).cpu()
                      for i in range(0, len(x), batch_size)]).numpy()


def cluster_scores(acts: np.ndarray, n_components: int = 10, seed: int = 0):
    """PCA projection, 2-means and silhouette for one class; returns (assignment, silhouette)."""
    from sklearn.cluster import KMeans
    from sklearn.decomposition import PCA
    from sklearn.metrics import silhouette_score

    acts = np.asarray(acts, dtype=np.float64)
    if np.ptp(acts, axis=0).max() <= 1e-9 * (1.0 + np.abs(acts).max()):
        # all points coincide: nothing to split
        return np.zeros(len(acts), dtype=np.int64), 0.0
    k = max(1, min(n_components, acts.shape[1], len(acts) - 1))
    proj = PCA(n_components=k, random_state=seed).fit_transform(acts)
    assign = KMeans(n_clusters=2, n_init=10, random_state=seed).fit_predict(proj)
    if len(np.unique(assign)) < 2:
        return assign, 0.0
    return assign, float(silhouette_score(proj, assign))


@dataclass
class ClusteringResult:
    silhouette: dict[int, float]
    flagged: np.ndarray
    skipped: list[int] = field(default_factory=list)
    tpr: float | None = None
    fpr: float | None = None

    def as_dict(self):
        return {"silhouette": {str(k): v for k, v in self.silhouette.items()}, "n_flagged": int(len(self.flagged)),
                "skipped": self.skipped, "tpr": self.tpr, "fpr": self.fpr}


def activation_clustering(model, images, labels, is_poisoned=None, n_components=10, seed=0,
                          min_samples=4, acts=None) -> ClusteringResult:
    """Per-class 2-means on the top principal components of penultimate activations; the smaller cluster is flagged."""
    labels = np.asarray(labels)
    acts = penultimate_activations(model, images) if acts is None else np.asarray(acts)
    sil, flagged, skipped = {}, [], []
    for c in np.unique(labels):
        ids = np.nonzero(labels == c)[0]
        if len(ids) < min_samples:
            skipped.append(int(c))
            continue
        assign, s = cluster_scores(acts[ids], n_components, seed)
        sil[int(c)] = s
        sizes = np.bincount(assign, minlength=2)
        minority = int(np.argmin(sizes))
        if sizes[minority] < len(ids):
            flagged.extend(ids[assign == minority].tolist())
    flagged = np.array(sorted(flagged), dtype=np.int64)
    out = ClusteringResult(sil, flagged, skipped)
    if is_poisoned is not None:
        truth = np.asarray(is_poisoned, dtype=bool)
        mark = np.zeros(len(labels), dtype=bool)
        mark[flagged] = True
        out.tpr = float((mark & truth).sum() / truth.sum()) if truth.any() else None
        out.fpr = float((mark & ~truth).sum() / (~truth).sum()) if (~truth).any() else None
    return out


# -- edge replacement -------------------------------------------------------------------------------------------


def edge_replacement_defense(images, edge_cfg, fill: str = "constant", value: float = 125, originals=None,
                             masks=None):
    """Overwrite pixels on the edges of ``images`` with the paired originals or a constant (0..255 scale)."""
    images = np.asarray(images)
    if fill not in ("original", "constant"):
        raise ConfigError(f"fill must be 'original' or 'constant', got {fill!r}")
    if fill == "original":
        if originals is None:
            raise InputError("fill='original' needs the paired clean images")
        originals = np.asarray(originals)
        if originals.shape != images.shape:
            raise InputError(f"paired images differ in shape: {originals.shape} vs {images.shape}")
    if masks is None:
        masks = edge_cfg.masks(images)
    sel = np.asarray(masks).astype(bool)
    out = images.copy()
    if fill == "original":
        out[sel] = originals[sel]
    else:
        out[sel] = value if images.dtype == np.uint8 else np.float32(value / 255.0)
    return out


# -- Grad-CAM region removal ------------------------------------------------------------------------------------


def gradcam(model, images, class_idx=None) -> torch.Tensor:
    """Class-activation maps (N, H, W) in [0, 1] from the last conv block; default class = prediction."""
    net = _net(model)
    net.eval()
    x = imaging.to_tensor(images, net.prune_mask.device)
    with torch.enable_grad():
        f = net.features(x).detach().requires_grad_(True)
        logits = net.head(f)
        cls = logits.argmax(1) if class_idx is None else torch.as_tensor(class_idx).expand(len(x))
        grad, = torch.autograd.grad(logits.gather(1, cls.view(-1, 1)).sum(), f)
    cam = F.relu((grad.mean(dim=(2, 3), keepdim=True) * f).sum(1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False).squeeze(1).cpu()
    peak = cam.flatten(1).max(1).values.view(-1, 1, 1)
    return torch.where(peak > 0, cam / peak.clamp_min(1e-12), cam)


def top_region_mask(cam: torch.Tensor, area: float = 0.25) -> torch.Tensor:
    """Boolean (N, H, W) mask of the ``area`` fraction of pixels with the highest attention."""
    n, h, w = cam.shape
    k = max(1, round(area * h * w))
    idx = cam.reshape(n, -1).topk(k, dim=1).indices
    mask = torch.zeros(n, h * w, dtype=torch.bool)
    mask.scatter_(1, idx, True)
    return mask.view(n, h, w)


def region_removal_probe(model, images, restore_source, area: float = 0.25, attention=gradcam):
    """Predictions before and after replacing the top-attention region with ``restore_source`` pixels."""
    x = imaging.to_tensor(images)
    restore = imaging.to_tensor(restore_source)
    if restore.shape != x.shape:
        raise InputError(f"restore source {tuple(restore.shape)} does not match images {tuple(x.shape)}")
    try:
        cam = attention(model, x)
    except (RuntimeError, AttributeError) as exc:
        raise InputError(f"attention extraction failed: {exc}") from exc
    mask = top_region_mask(cam, area).unsqueeze(1)
    repaired = torch.where(mask, restore, x)
    return predict(model, x), predict(model, repaired)


def region_removal_asr(model, triggered, restore_source, target, area=0.25) -> float:
    _, after = region_removal_probe(model, triggered, restore_source, area)
    return float(np.mean(after == target))
