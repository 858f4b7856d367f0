"""Poisoned training/test sets: the edge-ink attack and the BadNets / Blend / SIG baselines."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import imaging
from .data import ImageDataset
from .edge_trigger import EdgeConfig, colorize, make_palette
from .errors import ConfigError, InputError, MissingArtifactError

log = logging.getLogger(__name__)

METHODS = ("poison_ink", "badnets", "blend", "sig")
INDEX_FILE = "index.jsonl"
IMAGES_FILE = "images.npy"


@dataclass
class AttackConfig:
    method: str = "poison_ink"
    pollution_ratio: float = 0.1
    targets: dict[int, int] = field(default_factory=lambda: {0: 0})
    pattern_mode: str = "edge"
    enhanced_training: bool = True
    psnr_floor: float = 30.0
    badnets_size: int = 3
    blend_ratio: float = 0.2
    sig_amplitude: float = 20.0
    sig_frequency: float = 6.0
    trigger_seed: int = 1234

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"attack.method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.pollution_ratio <= 1.0:
            raise ConfigError(f"attack.pollution_ratio must be in [0, 1], got {self.pollution_ratio}")
        if not self.targets:
            raise ConfigError("attack.targets must map at least one message id to a label")
        if sorted(self.targets) != list(range(len(self.targets))):
            raise ConfigError(f"attack.targets message ids must be 0..{len(self.targets) - 1}")
        if self.pattern_mode not in ("edge", "agnostic"):
            raise ConfigError(f"attack.pattern_mode must be 'edge' or 'agnostic', got {self.pattern_mode!r}")
        if not 0.0 <= self.blend_ratio <= 1.0:
            raise ConfigError("attack.blend_ratio must be in [0, 1]")
        if self.badnets_size < 1:
            raise ConfigError("attack.badnets_size must be >= 1")
        return self

    def check_labels(self, num_classes):
        bad = [lbl for lbl in self.targets.values() if not 0 <= lbl < num_classes]
        if bad:
            raise ConfigError(f"target label(s) {bad} outside [0, {num_classes})")


@dataclass
class PoisonedDataset:
    images: np.ndarray  # N x H x W x 3 uint8
    original_labels: np.ndarray
    assigned_labels: np.ndarray
    is_poisoned: np.ndarray
    message_ids: np.ndarray  # -1 for clean samples
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    @property
    def labels(self):
        return self.assigned_labels

    @property
    def n_poisoned(self):
        return int(self.is_poisoned.sum())

    def check(self, targets: dict[int, int]):
        clean = ~self.is_poisoned
        if not np.array_equal(self.assigned_labels[clean], self.original_labels[clean]):
            raise InputError("clean samples must keep their original labels")
        if np.any(self.message_ids[clean] != -1):
            raise InputError("clean samples must not carry a message id")
        for mid, label in targets.items():
            sel = self.is_poisoned & (self.message_ids == mid)
            if np.any(self.assigned_labels[sel] != label):
                raise InputError(f"message {mid} samples must be relabelled to {label}")
        return self

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / IMAGES_FILE, self.images)
        with open(directory / INDEX_FILE, "w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "id": i,
                    "original_label": int(self.original_labels[i]),
                    "assigned_label": int(self.assigned_labels[i]),
                    "is_poisoned": bool(self.is_poisoned[i]),
                    "message_id": None if self.message_ids[i] < 0 else int(self.message_ids[i]),
                }) + "\n")
        with open(directory / "meta.json", "w") as fh:
            json.dump({"num_classes": self.num_classes, **self.meta}, fh, indent=2, sort_keys=True)
        return directory

    @classmethod
    def load(cls, directory) -> "PoisonedDataset":
        directory = Path(directory)
        for name in (IMAGES_FILE, INDEX_FILE, "meta.json"):
            if not (directory / name).exists():
                raise MissingArtifactError(f"{directory.name}/{name}", "run the poison stage first")
        rows = [json.loads(line) for line in open(directory / INDEX_FILE)]
        meta = json.load(open(directory / "meta.json"))
        num_classes = meta.pop("num_classes")
        return cls(
            images=np.load(directory / IMAGES_FILE),
            original_labels=np.array([r["original_label"] for r in rows], dtype=np.int64),
            assigned_labels=np.array([r["assigned_label"] for r in rows], dtype=np.int64),
            is_poisoned=np.array([r["is_poisoned"] for r in rows], dtype=bool),
            message_ids=np.array([-1 if r["message_id"] is None else r["message_id"] for r in rows], dtype=np.int64),
            num_classes=num_classes,
            meta=meta,
        )


# -- triggers -------------------------------------------------------------------------------------------------


def agnostic_mask(shape, density=0.1, seed=1234) -> np.ndarray:
    """One fixed random binary pattern shared by every image (input-agnostic ablation)."""
    rng = np.random.default_rng(seed)
    return (rng.random(shape) < density).astype(np.uint8)


def blend_trigger(shape, seed=1234) -> np.ndarray:
    return np.random.default_rng(seed).random((*shape, 3)).astype(np.float32)


def apply_baseline(images: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Float NHWC in [0, 1] -> baseline-triggered float NHWC."""
    x = np.array(images, dtype=np.float32, copy=True)
    h, w = x.shape[1:3]
    if cfg.method == "badnets":
        s = cfg.badnets_size
        x[:, h - s:, w - s:, :] = 1.0
    elif cfg.method == "blend":
        b = np.float32(cfg.blend_ratio)
        x = x * (1 - b) + blend_trigger((h, w), cfg.trigger_seed)[None] * b
    elif cfg.method == "sig":
        cols = np.arange(w, dtype=np.float32)
        wave = (cfg.sig_amplitude / 255.0) * np.sin(2 * np.pi * cfg.sig_frequency * cols / w)
        x = np.clip(x + wave[None, None, :, None], 0.0, 1.0)
    else:
        raise ConfigError(f"unknown baseline method {cfg.method!r}")
    return x


def make_triggered(images_u8: np.ndarray, message_ids: np.ndarray, cfg: AttackConfig, bundle=None,
                   edge: EdgeConfig | None = None, batch_size: int = 256) -> np.ndarray:
    """Triggered copies (uint8 NHWC) of ``images_u8`` carrying the given messages."""
    if len(images_u8) == 0:
        return images_u8.copy()
    if cfg.method != "poison_ink":
        return imaging.quantize(apply_baseline(images_u8.astype(np.float32) / 255.0, cfg))
    if bundle is None:
        raise ConfigError("method poison_ink needs a trained injector bundle")
    if edge is None or edge.threshold is None:
        raise ConfigError("method poison_ink needs a resolved edge configuration")
    palette = np.array([c.rgb for c in make_palette(max(len(cfg.targets), 1))], dtype=np.uint8)
    out = np.empty_like(images_u8)
    from .injector import inject

    for start in range(0, len(images_u8), batch_size):
        chunk = images_u8[start:start + batch_size]
        if cfg.pattern_mode == "edge":
            masks = edge.masks(chunk)
        else:
            masks = np.broadcast_to(agnostic_mask(chunk.shape[1:3], edge.edge_fraction, cfg.trigger_seed),
                                    chunk.shape[:3])
        patterns = colorize(masks, palette[message_ids[start:start + batch_size]])
        poisoned = inject(bundle, imaging.to_tensor(chunk), imaging.to_tensor(patterns))
        out[start:start + batch_size] = imaging.quantize(imaging.to_numpy(poisoned))
    return out


# -- dataset construction -------------------------------------------------------------------------------------


def select_poison(n: int, ratio: float, n_messages: int, rng: np.random.Generator):
    """Indices of the floor(ratio * n) poisoned samples and their message ids (balanced)."""
    k = int(math.floor(ratio * n + 1e-9))
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    messages = np.resize(np.arange(n_messages), k)
    rng.shuffle(messages)
    return idx.astype(np.int64), messages.astype(np.int64)


def _psnr_per_image(a, b):
    mse = ((a.astype(np.float64) - b.astype(np.float64)) / 255.0) ** 2
    mse = mse.reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, 10 * np.log10(1.0 / mse))


def poison_dataset(dataset: ImageDataset, cfg: AttackConfig, bundle=None, rng=0,
                   edge: EdgeConfig | None = None) -> PoisonedDataset:
    """Replace a uniformly random floor(alpha * N) subset with triggered, relabelled copies."""
    cfg.validate()
    cfg.check_labels(dataset.num_classes)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    idx, messages = select_poison(len(dataset), cfg.pollution_ratio, len(cfg.targets), rng)
    images = dataset.images.copy()
    assigned = dataset.labels.copy()
    is_poisoned = np.zeros(len(dataset), dtype=bool)
    message_ids = np.full(len(dataset), -1, dtype=np.int64)
    meta = {"method": cfg.method, "pollution_ratio": cfg.pollution_ratio, "n_poisoned": int(len(idx)),
            "targets": {str(k): v for k, v in cfg.targets.items()}}
    if len(idx):
        triggered = make_triggered(dataset.images[idx], messages, cfg, bundle, edge)
        psnr = _psnr_per_image(dataset.images[idx], triggered)
        finite = psnr[np.isfinite(psnr)]
        meta["mean_psnr"] = float(finite.mean()) if len(finite) else math.inf
        if cfg.method == "poison_ink" and meta["mean_psnr"] < cfg.psnr_floor:
            log.warning("poisoned images average %.2f dB PSNR, below the %.1f dB floor",
                        meta["mean_psnr"], cfg.psnr_floor)
        images[idx] = triggered
        assigned[idx] = np.array([cfg.targets[int(m)] for m in messages], dtype=np.int64)
        is_poisoned[idx] = True
        message_ids[idx] = messages
    out = PoisonedDataset(images, dataset.labels.copy(), assigned, is_poisoned, message_ids,
                          dataset.num_classes, meta)
    return out.check(cfg.targets)


def baseline_poison(dataset: ImageDataset, cfg: AttackConfig, rng=0) -> PoisonedDataset:
    if cfg.method not in ("badnets", "blend", "sig"):
        raise ConfigError(f"baseline_poison handles badnets/blend/sig, got {cfg.method!r}")
    return poison_dataset(dataset, cfg, None, rng)


def poisoned_test_inputs(test: ImageDataset, cfg: AttackConfig, bundle=None, edge=None, message_id: int = 0):
    """Triggered copies of test images whose true label differs from the message's target.

    Returns (images uint8, original labels, target label).
    """
    target = cfg.targets[message_id]
    keep = np.nonzero(test.labels != target)[0]
    if len(keep) == 0:
        raise InputError(f"no test images with a label other than the target {target}")
    images = make_triggered(test.images[keep], np.full(len(keep), message_id), cfg, bundle, edge)
    return images, test.labels[keep], target


def to_training_arrays(ds: PoisonedDataset | ImageDataset):
    return ds.images, ds.labels


def as_tensor_batches(images, labels, batch_size, order):
    for start in range(0, len(order), batch_size):
        idx = np.sort(order[start:start + batch_size])
        yield imaging.to_tensor(images[idx]), torch.from_numpy(labels[idx])
