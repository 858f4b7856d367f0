"""Test-time transformations (the robustness table columns plus augmentation-style defenses)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .. import imaging
from ..errors import ConfigError, InputError

KINDS = ("none", "flip", "shrink_pad", "rotate", "crop_resize", "resize", "gaussian_noise", "gaussian_blur",
         "cutout", "mixup", "cutmix")
STOCHASTIC = ("gaussian_noise", "cutout", "mixup", "cutmix")


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "none"
    angle: float = 15.0
    scale: float = 0.8
    variance: float = 0.01
    kernel: int = 3
    sigma: float | None = None  # blur sigma; None -> 0.3 * ((k - 1) / 2 - 1) + 0.8
    area: float = 0.25
    mix: float = 0.5
    label: str | None = None

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}, expected one of {KINDS}")
        if not 0 < self.scale <= 1:
            raise ConfigError(f"transform scale must be in (0, 1], got {self.scale}")
        if not -180 <= self.angle <= 180:
            raise ConfigError(f"rotation angle must be in [-180, 180], got {self.angle}")
        if self.variance < 0:
            raise ConfigError("noise variance must be >= 0")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"blur kernel must be odd and >= 1, got {self.kernel}")
        if not 0 < self.area <= 1:
            raise ConfigError("cutout/cutmix area must be in (0, 1]")
        if not 0 <= self.mix <= 1:
            raise ConfigError("mixup weight must be in [0, 1]")
        return self

    @property
    def name(self) -> str:
        return self.label or COLUMN_NAMES.get(self.kind, self.kind)

    @property
    def blur_sigma(self) -> float:
        return self.sigma if self.sigma is not None else 0.3 * ((self.kernel - 1) / 2 - 1) + 0.8


COLUMN_NAMES = {"none": "None", "flip": "Flip", "shrink_pad": "S&P", "rotate": "Rot15", "crop_resize": "C&R",
                "resize": "Resize"}


def robustness_suite() -> list[TransformSpec]:
    return [TransformSpec(k) for k in ("none", "flip", "shrink_pad", "rotate", "crop_resize")]


def defense_suite() -> list[TransformSpec]:
    return [TransformSpec(k) for k in ("gaussian_noise", "gaussian_blur", "cutout", "mixup", "cutmix")]


def gaussian_kernel(size: int, sigma: float) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-ax**2 / (2 * sigma**2))
    return (g / g.sum()).float()


def _box(n, h, w, area, rng):
    side_h, side_w = max(1, round(math.sqrt(area) * h)), max(1, round(math.sqrt(area) * w))
    top = torch.randint(h - side_h + 1, (n,), generator=rng)
    left = torch.randint(w - side_w + 1, (n,), generator=rng)
    return top, left, side_h, side_w


def _paste(x, src, area, rng):
    n, _, h, w = x.shape
    top, left, sh, sw = _box(n, h, w, area, rng)
    out = x.clone()
    for i in range(n):
        t, l = int(top[i]), int(left[i])
        out[i, :, t:t + sh, l:l + sw] = 0.0 if src is None else src[i, :, t:t + sh, l:l + sw]
    return out


def _sources(blend_source, n, rng):
    if blend_source is None or len(blend_source) == 0:
        raise InputError("mixup/cutmix need a non-empty blend_source of clean images")
    src = blend_source if isinstance(blend_source, torch.Tensor) else imaging.to_tensor(blend_source)
    return src[torch.randint(len(src), (n,), generator=rng)]


def _as_tensor(images):
    # float64 arrays stay float64 so results can be checked against exact references
    arr = np.asarray(images)
    if arr.dtype == np.float64:
        return torch.from_numpy(np.ascontiguousarray(arr if arr.ndim == 4 else arr[None])).permute(0, 3, 1, 2)
    return imaging.to_tensor(arr)


def apply_transform(images, spec: TransformSpec, rng: torch.Generator | None = None, blend_source=None):
    """Apply one transform; accepts float NCHW tensors or uint8/float NHWC arrays and returns the same kind.

    Deterministic kinds ignore ``rng``; stochastic kinds (noise, cutout, mixup, cutmix) consume it.
    """
    spec.validate()
    if spec.kind == "none":
        return images
    as_array = not isinstance(images, torch.Tensor)
    x = _as_tensor(images) if as_array else images
    if x.ndim != 4:
        raise InputError(f"expected a batch of images, got shape {tuple(x.shape)}")
    n, _, h, w = x.shape
    if spec.kind == "flip":
        y = torch.flip(x, dims=[-1])
    elif spec.kind == "shrink_pad":
        y = imaging.shrink_pad(x, spec.scale)
    elif spec.kind == "crop_resize":
        y = imaging.center_crop_resize(x, spec.scale)
    elif spec.kind == "resize":
        y = imaging.resize(imaging.resize(x, (max(1, round(spec.scale * h)), max(1, round(spec.scale * w)))), (h, w))
    elif spec.kind == "rotate":
        theta = imaging.rotation_theta(torch.full((n,), float(spec.angle)), h, w)
        y = imaging.affine_warp(x, theta)
    elif spec.kind == "gaussian_noise":
        noise = torch.randn(x.shape, generator=rng) * math.sqrt(spec.variance)
        y = (x + noise.to(x.device, x.dtype)).clamp(0, 1)
    elif spec.kind == "gaussian_blur":
        k = gaussian_kernel(spec.kernel, spec.blur_sigma).to(x.device, x.dtype)
        r = spec.kernel // 2
        c = x.shape[1]
        y = F.pad(x, (r, r, r, r), mode="reflect" if min(h, w) > r else "replicate")
        y = F.conv2d(y, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
        y = F.conv2d(y, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    elif spec.kind == "cutout":
        y = _paste(x, None, spec.area, rng)
    elif spec.kind == "mixup":
        y = x * (1 - spec.mix) + _sources(blend_source, n, rng).to(x.device, x.dtype) * spec.mix
    else:  # cutmix
        y = _paste(x, _sources(blend_source, n, rng).to(x.device, x.dtype), spec.area, rng)
    if not as_array:
        return y
    out = y.detach().cpu().permute(0, 2, 3, 1).numpy()
    if np.asarray(images).dtype == np.uint8:
        return imaging.quantize(out)
    return out.astype(np.float64 if y.dtype == torch.float64 else np.float32)


# -- training-time augmentation ---------------------------------------------------------------------------------

AUGMENT_KINDS = ("none", "flip", "shrink_pad", "rotate", "crop_resize")


def random_family_transform(x: torch.Tensor, rng: torch.Generator, max_angle=15.0, scale_range=(0.7, 1.0),
                            translate_px=4) -> torch.Tensor:
    """Per-sample random member of the geometric family, fused with crop-with-pad jitter and a coin-flip mirror.

    Every geometric kind is an affine map in normalised coordinates, so one batched warp covers
    the whole mix: shrink&pad scales the sampling grid by 1/s, crop&resize by s.
    """
    n, _, h, w = x.shape
    kind = torch.randint(len(AUGMENT_KINDS), (n,), generator=rng)
    lo, hi = scale_range
    s = lo + (hi - lo) * torch.rand(n, generator=rng)
    angle = (2 * torch.rand(n, generator=rng) - 1) * max_angle
    mirror = torch.rand(n, generator=rng) < 0.5
    shift = torch.randint(-translate_px, translate_px + 1, (n, 2), generator=rng).float()

    zoom = torch.ones(n)
    zoom = torch.where(kind == 2, 1 / s, zoom)
    zoom = torch.where(kind == 4, s, zoom)
    rot = torch.where(kind == 3, angle, torch.zeros(n))
    theta = imaging.rotation_theta(rot, h, w)
    theta[:, :, :2] = theta[:, :, :2] * zoom.view(n, 1, 1)
    flip = torch.where(mirror ^ (kind == 1), -1.0, 1.0)
    theta[:, :, 0] = theta[:, :, 0] * flip.view(n, 1)
    theta[:, 0, 2] = shift[:, 0] * 2 / w
    theta[:, 1, 2] = shift[:, 1] * 2 / h
    return imaging.affine_warp(x, theta.to(x.device))
