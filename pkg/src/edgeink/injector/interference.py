"""Differentiable random interference applied between injection and extraction.

Each operator fires independently per sample with its own probability. Any
companion tensors (e.g. the trigger pattern serving as extraction target)
receive exactly the same geometric warp as the images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .. import imaging
from ..errors import ConfigError

KNOWN_OPS = ("crop", "resize", "flip", "rotate")


@dataclass
class InterferenceOp:
    name: str
    p: float = 0.5
    low: float = 0.0
    high: float = 0.0

    def validate(self):
        if self.name not in KNOWN_OPS:
            raise ConfigError(f"unknown interference operator '{self.name}', expected one of {KNOWN_OPS}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"interference probability for {self.name} must be in [0, 1], got {self.p}")
        if self.name != "flip" and not self.low < self.high:
            raise ConfigError(f"degenerate parameter range for {self.name}: [{self.low}, {self.high}]")
        if self.name == "crop" and not 0.0 < self.low <= self.high <= 1.0:
            raise ConfigError(f"crop scale range must lie in (0, 1], got [{self.low}, {self.high}]")
        if self.name == "resize" and self.low <= 0:
            raise ConfigError(f"resize factor must be positive, got {self.low}")


def default_ops():
    return [
        InterferenceOp("crop", 0.5, 0.7, 1.0),
        InterferenceOp("resize", 0.5, 0.7, 1.3),
        InterferenceOp("flip", 0.5),
        InterferenceOp("rotate", 0.5, -15.0, 15.0),
    ]


@dataclass
class InterferenceConfig:
    enabled: bool = True
    ops: list[InterferenceOp] = field(default_factory=default_ops)

    def validate(self):
        for op in self.ops:
            op.validate()
        return self


def _uniform(n, low, high, rng, device):
    return low + (high - low) * torch.rand(n, generator=rng).to(device)


def _select(fire, new, old):
    return torch.where(fire.view(-1, 1, 1, 1), new, old)


def _crop(x, op, fire, rng):
    n = x.shape[0]
    scale = _uniform(n, op.low, op.high, rng, x.device)
    # window must stay inside the frame: centre offset in [-(1 - s), 1 - s]
    cx = (2 * torch.rand(n, generator=rng).to(x.device) - 1) * (1 - scale)
    cy = (2 * torch.rand(n, generator=rng).to(x.device) - 1) * (1 - scale)
    return _select(fire, imaging.affine_warp(x, imaging.crop_theta(scale, cx, cy)), x)


def _resize(x, op, fire, rng):
    h, w = x.shape[-2:]
    factors = _uniform(x.shape[0], op.low, op.high, rng, "cpu")
    out = []
    for i in range(x.shape[0]):
        xi = x[i:i + 1]
        if fire[i]:
            size = (max(1, round(h * float(factors[i]))), max(1, round(w * float(factors[i]))))
            xi = imaging.resize(imaging.resize(xi, size), (h, w))
        out.append(xi)
    return torch.cat(out, dim=0)


def _flip(x, op, fire, rng):
    return _select(fire, torch.flip(x, dims=[-1]), x)


def _rotate(x, op, fire, rng):
    angles = _uniform(x.shape[0], op.low, op.high, rng, x.device)
    theta = imaging.rotation_theta(angles, *x.shape[-2:])
    return _select(fire, imaging.affine_warp(x, theta), x)


_APPLY = {"crop": _crop, "resize": _resize, "flip": _flip, "rotate": _rotate}


def interfere(images: torch.Tensor, cfg: InterferenceConfig, rng: torch.Generator | None = None,
              *companions: torch.Tensor):
    """Randomly perturb an NCHW batch; returns the images, or (images, *companions) if given."""
    x = torch.cat([images, *companions], dim=1) if companions else images
    if cfg.enabled:
        for op in cfg.ops:
            op.validate()
            # one draw per op even when p == 0 keeps rng consumption config-independent
            fire = torch.rand(x.shape[0], generator=rng) < op.p
            if fire.any():
                x = _APPLY[op.name](x, op, fire.to(x.device), rng)
    if not companions:
        return x
    sizes = [images.shape[1]] + [c.shape[1] for c in companions]
    return tuple(torch.split(x, sizes, dim=1))
