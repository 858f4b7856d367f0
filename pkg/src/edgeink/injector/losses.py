"""Joint injector objective.

    inv   = mean |x_p - x_c|^k
    adv_d = BCE(D(x_c), 1) + BCE(D(x_p), 0)      (discriminator, x_p detached)
    adv_g = BCE(D(x_p), 1)                       (non-saturating generator term)
    te    = mean (GE(T(x_p)) - T(p))^2           T: interference, same warp on p
    cl    = mean (GE(x_c) - C)^2
    ge    = te + lambda * cl
    total = inv + beta_adv * adv_g + gamma * ge
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..errors import InputError, NumericalError
from .bundle import InjectorBundle, LossWeights
from .interference import InterferenceConfig, interfere


@dataclass
class LossBreakdown:
    l_inv: torch.Tensor
    l_adv_g: torch.Tensor
    l_adv_d: torch.Tensor
    l_te: torch.Tensor
    l_cl: torch.Tensor
    l_ge: torch.Tensor
    l_in: torch.Tensor
    l_total: torch.Tensor
    weights: LossWeights

    def as_dict(self):
        return {name: float(getattr(self, name).detach()) for name in
                ("l_inv", "l_adv_g", "l_adv_d", "l_te", "l_cl", "l_ge", "l_in", "l_total")}


def invisibility_loss(poisoned, clean, k=1):
    diff = (poisoned - clean).abs()
    return diff.mean() if k == 1 else diff.pow(k).mean()


def reconstruction_loss(pred, target):
    return F.mse_loss(pred, target)


def _bce(logits, real: bool):
    target = torch.ones_like(logits) if real else torch.zeros_like(logits)
    return F.binary_cross_entropy_with_logits(logits, target)


def combine(l_inv, l_adv_g, l_adv_d, l_te, l_cl, weights: LossWeights) -> LossBreakdown:
    l_ge = l_te + weights.lam * l_cl
    l_in = l_inv + weights.beta_adv * l_adv_g
    return LossBreakdown(l_inv, l_adv_g, l_adv_d, l_te, l_cl, l_ge, l_in, l_in + weights.gamma * l_ge, weights)


def compute_losses(
    bundle: InjectorBundle,
    clean: torch.Tensor,
    patterns: torch.Tensor,
    clean_map: torch.Tensor | None = None,
    weights: LossWeights | None = None,
    *,
    interference: InterferenceConfig | None = None,
    rng: torch.Generator | None = None,
    batch_index: int | None = None,
    poisoned: torch.Tensor | None = None,
) -> LossBreakdown:
    """Loss terms for one batch with gradients attached (networks in their current mode).

    ``poisoned`` overrides the injection network output (useful to probe the
    loss surface); ``clean_map`` defaults to the all-zero image.
    """
    if clean.ndim != 4 or len(clean) == 0:
        raise InputError("compute_losses needs a non-empty N x 3 x H x W batch")
    if patterns.shape != clean.shape:
        raise InputError(f"patterns {tuple(patterns.shape)} do not match images {tuple(clean.shape)}")
    if clean_map is None:
        clean_map = torch.zeros_like(clean)
    elif clean_map.shape[-3:] != clean.shape[-3:]:
        raise InputError(f"clean map {tuple(clean_map.shape)} does not match images {tuple(clean.shape)}")
    clean_map = clean_map.expand_as(clean)
    weights = weights or bundle.weights
    interference = interference if interference is not None else bundle.cfg.interference

    if poisoned is None:
        poisoned = bundle.injection(torch.cat([clean, patterns], dim=1))
    l_inv = invisibility_loss(poisoned, clean, weights.k)

    d = bundle.discriminator
    l_adv_g = _bce(d(poisoned), real=True)
    l_adv_d = _bce(d(clean), real=True) + _bce(d(poisoned.detach()), real=False)

    disturbed, target = interfere(poisoned, interference, rng, patterns)
    l_te = reconstruction_loss(bundle.extractor(disturbed), target)
    l_cl = reconstruction_loss(bundle.extractor(clean), clean_map)

    out = combine(l_inv, l_adv_g, l_adv_d, l_te, l_cl, weights)
    for name, value in out.as_dict().items():
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {name} = {value}", batch_index)
    return out
