"""Accuracy-style rates and image-quality metrics.

A *model* here is any callable mapping a float NCHW batch to per-class scores
(probabilities or logits); only the arg-max matters for CDA and ASR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .. import imaging
from ..errors import InputError
from .transforms import TransformSpec, apply_transform

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@torch.no_grad()
def scores(model, images, batch_size=512) -> torch.Tensor:
    x = imaging.to_tensor(images)
    return torch.cat([torch.as_tensor(model(x[i:i + batch_size])) for i in range(0, len(x), batch_size)])


def predict(model, images, batch_size=512) -> np.ndarray:
    return scores(model, images, batch_size).argmax(1).cpu().numpy()


def _transformed(images, transform, rng, blend_source):
    if transform is None or transform.kind == "none":
        return images
    return apply_transform(imaging.to_tensor(images), transform, rng, blend_source)


def evaluate_cda(model, clean_test, transform: TransformSpec | None = None, rng=None, blend_source=None) -> float:
    """Fraction of (optionally transformed) clean test images predicted correctly."""
    if len(clean_test) == 0:
        raise InputError("clean test set is empty")
    x = _transformed(clean_test.images, transform, rng, blend_source)
    return float(np.mean(predict(model, x) == np.asarray(clean_test.labels)))


def attack_success(model, triggered, target: int, transform: TransformSpec | None = None, rng=None,
                   blend_source=None) -> float:
    """Fraction of already-triggered inputs predicted as ``target`` after ``transform``."""
    if len(triggered) == 0:
        raise InputError("no eligible poisoned test samples")
    x = _transformed(triggered, transform, rng, blend_source)
    return float(np.mean(predict(model, x) == target))


def evaluate_asr(model, clean_test, bundle, cfg, transform: TransformSpec | None = None, *, edge=None, rng=None,
                 message_id: int = 0, blend_source=None) -> float:
    """Poison every test image whose label differs from the target, transform, and score hits on the target."""
    from ..poisoning import poisoned_test_inputs

    triggered, _, target = poisoned_test_inputs(clean_test, cfg, bundle, edge, message_id)
    return attack_success(model, triggered, target, transform, rng, blend_source)


# -- image quality ----------------------------------------------------------------------------------------------


def _float64(images):
    a = np.asarray(images)
    return a.astype(np.float64) / 255.0 if a.dtype == np.uint8 else a.astype(np.float64)


def psnr(a, b) -> np.ndarray:
    """Per-image PSNR in dB with peak 1.0; identical pairs give +inf."""
    a, b = _float64(a), _float64(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    out = np.full(len(a), math.inf)
    nz = mse > 0
    out[nz] = 10.0 * np.log10(1.0 / mse[nz])
    return out


def _gauss(size, sigma):
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-ax**2 / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, k1=0.01, k2=0.03, window=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    """Per-image mean SSIM of NHWC images in [0, 1] (uint8 accepted).

    Gaussian-weighted statistics over every fully contained window, averaged
    over positions and channels.
    """
    a, b = _float64(a), _float64(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    n, h, w, c = a.shape
    if min(h, w) < window:
        raise InputError(f"images must be at least {window}x{window} for SSIM")
    g = _gauss(window, sigma)
    x = torch.from_numpy(a).permute(0, 3, 1, 2).reshape(n * c, 1, h, w)
    y = torch.from_numpy(b).permute(0, 3, 1, 2).reshape(n * c, 1, h, w)

    def filt(t):
        t = F.conv2d(t, g.view(1, 1, 1, -1))
        return F.conv2d(t, g.view(1, 1, -1, 1))

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    c1, c2 = k1**2, k2**2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return s.reshape(n, -1).mean(dim=1).numpy()


@dataclass
class QualityReport:
    psnr: float
    ssim: float
    lpips: float | None = None
    n: int = 0

    def as_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "lpips": self.lpips, "n": self.n}


def mean_psnr(values: np.ndarray) -> float:
    """Mean over finite entries; +inf only when every pair was identical."""
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if len(finite) else math.inf


def image_quality(clean, poisoned, lpips_fn=None, batch_size=1024) -> QualityReport:
    """Mean PSNR / SSIM over paired sets; LPIPS only when ``lpips_fn(a, b) -> per-pair distances`` is given."""
    clean, poisoned = np.asarray(clean), np.asarray(poisoned)
    if clean.shape != poisoned.shape:
        raise InputError(f"paired sets differ in shape: {clean.shape} vs {poisoned.shape}")
    if len(clean) == 0:
        raise InputError("image_quality needs at least one pair")
    p = np.concatenate([psnr(clean[i:i + batch_size], poisoned[i:i + batch_size])
                        for i in range(0, len(clean), batch_size)])
    s = np.concatenate([ssim(clean[i:i + batch_size], poisoned[i:i + batch_size])
                        for i in range(0, len(clean), batch_size)])
    lp = None
    if lpips_fn is not None:
        lp = float(np.mean(np.asarray(lpips_fn(imaging.to_tensor(clean), imaging.to_tensor(poisoned)))))
    return QualityReport(mean_psnr(p), float(s.mean()), lp, len(clean))
