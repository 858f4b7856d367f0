"""Joint adversarial training of the injection system."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch

from .. import imaging
from ..edge_trigger import EdgeConfig, colorize, make_palette
from ..errors import InputError, NumericalError
from .bundle import InjectorBundle, InjectorConfig
from .losses import compute_losses

log = logging.getLogger(__name__)


def sample_colors(n, cfg: InjectorConfig, rng: torch.Generator) -> np.ndarray:
    """Random poison inks for one batch, uint8 (n, 3)."""
    if cfg.color_mode == "palette":
        palette = np.array([c.rgb for c in make_palette(cfg.palette_size)], dtype=np.uint8)
        idx = torch.randint(len(palette), (n,), generator=rng).numpy()
        return palette[idx]
    levels = 256 // cfg.color_step
    return (torch.randint(levels, (n, 3), generator=rng).numpy() * cfg.color_step).astype(np.uint8)


def make_batch(images, masks, idx, cfg, rng):
    clean = imaging.to_tensor(images[idx])
    patterns = imaging.to_tensor(colorize(masks[idx], sample_colors(len(idx), cfg, rng)))
    return clean, patterns


def train_step(bundle: InjectorBundle, clean, patterns, rng, batch_index=None):
    """One generator step on IN+GE followed by one discriminator step."""
    losses = compute_losses(bundle, clean, patterns, rng=rng, batch_index=batch_index)
    bundle.opt_g.zero_grad(set_to_none=True)
    losses.l_total.backward()
    bundle.opt_g.step()
    bundle.opt_d.zero_grad(set_to_none=True)
    losses.l_adv_d.backward()
    bundle.opt_d.step()
    return losses.as_dict()


def _epoch_generator(seed, epoch):
    g = torch.Generator()
    g.manual_seed(int(seed) * 100_003 + int(epoch))
    return g


def train_injector(
    images: np.ndarray,
    cfg: InjectorConfig | None = None,
    *,
    edge: EdgeConfig | None = None,
    masks: np.ndarray | None = None,
    seed: int = 0,
    checkpoint_dir: str | Path | None = None,
    bundle: InjectorBundle | None = None,
    progress=None,
    device=None,
) -> InjectorBundle:
    """Train (or resume) an injector on clean NHWC ``images``.

    Edge masks are computed once from ``edge`` unless passed in. When
    ``checkpoint_dir`` is set, ``injector_last.ckpt`` is refreshed every
    ``checkpoint_every`` epochs and the loop resumes from it if present. A
    non-finite loss restores the last good checkpoint and re-raises.
    """
    cfg = (cfg or InjectorConfig()).validate()
    images = np.asarray(images)
    if images.ndim != 4 or len(images) < 2:
        raise InputError(f"need at least two NHWC images, got shape {images.shape}")
    if masks is None:
        edge = (edge or EdgeConfig()).resolved(images)
        masks = edge.masks(images)
    if len(masks) != len(images):
        raise InputError("one edge mask per image required")

    ckpt = Path(checkpoint_dir) / "injector_last.ckpt" if checkpoint_dir is not None else None
    if bundle is None:
        bundle = InjectorBundle.load(ckpt) if ckpt is not None and ckpt.exists() else InjectorBundle(cfg, seed)
    if device is not None:
        bundle.to(device)
    if edge is not None:
        bundle.meta["edge"] = {"operator": edge.operator, "threshold": edge.threshold, "dilate": edge.dilate}

    n = len(images)
    bs = min(cfg.batch_size, n)
    while bundle.epoch < cfg.epochs:
        epoch = bundle.epoch
        rng = _epoch_generator(bundle.seed, epoch)
        order = torch.randperm(n, generator=rng).numpy()
        bundle.train()
        sums, count = {}, 0
        # drop the ragged tail: batch-norm at the 1x1 bottleneck needs >1 sample
        for b in range(n // bs):
            idx = np.sort(order[b * bs:(b + 1) * bs])
            clean, patterns = make_batch(images, masks, idx, cfg, rng)
            clean, patterns = clean.to(bundle.device), patterns.to(bundle.device)
            try:
                stats = train_step(bundle, clean, patterns, rng, batch_index=b)
            except NumericalError:
                if ckpt is not None and ckpt.exists():
                    log.error("injector diverged at epoch %d batch %d; last good checkpoint %s", epoch, b, ckpt)
                raise
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        record = {k: v / max(count, 1) for k, v in sums.items()}
        record["epoch"] = epoch + 1
        bundle.history.append(record)
        bundle.epoch = epoch + 1
        log.info("injector epoch %d/%d %s", bundle.epoch, cfg.epochs,
                 " ".join(f"{k}={v:.4f}" for k, v in record.items() if k != "epoch"))
        if progress is not None:
            progress(record)
        if ckpt is not None and (bundle.epoch % max(cfg.checkpoint_every, 1) == 0 or bundle.epoch == cfg.epochs):
            if all(math.isfinite(v) for v in record.values()):
                bundle.save(ckpt)
    return bundle.eval()


@torch.no_grad()
def evaluate_losses(bundle: InjectorBundle, images, masks, colors=None, seed=0):
    """Mean loss terms on held-out images in eval mode (no parameter updates)."""
    bundle.eval()
    rng = torch.Generator().manual_seed(seed)
    idx = np.arange(len(images))
    clean = imaging.to_tensor(images, bundle.device)
    if colors is None:
        colors = sample_colors(len(idx), bundle.cfg, rng)
    patterns = imaging.to_tensor(colorize(masks, colors), bundle.device)
    return compute_losses(bundle, clean, patterns, rng=rng).as_dict()
