"""Image classification datasets as in-memory uint8 NHWC arrays."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, MissingArtifactError

DATA_ENV = "EDGEINK_DATA_DIR"


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root:
        return Path(root).expanduser()
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "edgeink")).expanduser()


@dataclass
class ImageDataset:
    images: np.ndarray  # N x H x W x 3 uint8
    labels: np.ndarray  # N int64
    num_classes: int
    name: str = "dataset"
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InputError(f"images must be N x H x W x 3, got {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise InputError(f"images must be uint8, got {self.images.dtype}")
        if len(self.images) != len(self.labels):
            raise InputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_size(self):
        return self.images.shape[1:3]

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes, self.name, self.classes)

    def head(self, n: int | None) -> "ImageDataset":
        return self if n is None or n >= len(self) else self.subset(np.arange(n))

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class DatasetConfig:
    id: str = "cifar10"
    root: str | None = None
    download: bool = False
    train_subset: int | None = None
    test_subset: int | None = None
    # synthetic only
    synthetic_train: int = 2000
    synthetic_test: int = 500
    image_size: int = 32
    num_classes: int = 10

    def validate(self):
        if self.id not in ("cifar10", "npz", "synthetic"):
            raise ConfigError(f"dataset.id must be cifar10, npz or synthetic, got {self.id!r}")
        if self.id == "npz" and not self.root:
            raise ConfigError("dataset.root must point to an .npz file for id=npz")
        return self


def load_cifar10(root=None, train=True, download=False) -> ImageDataset:
    from torchvision.datasets import CIFAR10

    base = data_root(root)
    if not download and not (base / "cifar-10-batches-py").is_dir():
        raise MissingArtifactError(
            "cifar-10-batches-py",
            f"CIFAR-10 not found under {base}; place the python-version archive there "
            f"(or set ${DATA_ENV}, or dataset.download: true)",
        )
    try:
        ds = CIFAR10(str(base), train=train, download=download)
    except RuntimeError as exc:
        raise MissingArtifactError("cifar-10-batches-py", str(exc)) from exc
    return ImageDataset(np.asarray(ds.data, dtype=np.uint8), np.asarray(ds.targets), 10, "cifar10", list(ds.classes))


def load_npz(path, train=True) -> ImageDataset:
    """Arrays ``x_train, y_train, x_test, y_test`` (uint8 NHWC images)."""
    path = Path(path).expanduser()
    if not path.exists():
        raise MissingArtifactError(path.name, f"dataset archive {path} does not exist")
    with np.load(path) as z:
        split = "train" if train else "test"
        x, y = z[f"x_{split}"], z[f"y_{split}"]
        n_classes = int(max(z["y_train"].max(), z["y_test"].max())) + 1
    return ImageDataset(x.astype(np.uint8), y.reshape(-1), n_classes, path.stem)


def synthetic(n: int, size: int = 32, num_classes: int = 10, seed: int = 0) -> ImageDataset:
    """Procedural shapes dataset: class fixes stripe orientation and blob hue, the rest is random.

    Meant for smoke tests and CPU-scale rehearsals, not as a benchmark.
    """
    rng = np.random.default_rng(seed)
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    labels = rng.integers(0, num_classes, n)
    imgs = np.empty((n, size, size, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        bg = rng.uniform(0.15, 0.85, 3)
        tilt = rng.uniform(-1, 1, 3) * 0.25
        img = bg + tilt[None, None, :] * (xx[..., None] - 0.5) + 0.5 * tilt[None, None, ::-1] * (yy[..., None] - 0.5)
        angle = np.pi * c / num_classes + rng.normal(0, 0.05)
        freq = rng.uniform(3, 5)
        stripes = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + rng.uniform(0, 2 * np.pi))
        img += 0.12 * stripes[..., None]
        hue = np.array([np.cos(2 * np.pi * c / num_classes), np.cos(2 * np.pi * c / num_classes + 2.1),
                        np.cos(2 * np.pi * c / num_classes + 4.2)]) * 0.35 + 0.5
        r = rng.uniform(0.12, 0.25)
        cy, cx = rng.uniform(r, 1 - r, 2)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[blob] = hue + rng.normal(0, 0.05, 3)
        img += rng.normal(0, 0.02, img.shape)
        imgs[i] = img
    images = np.round(np.clip(imgs, 0, 1) * 255).astype(np.uint8)
    return ImageDataset(images, labels, num_classes, "synthetic")


def load_dataset(cfg: DatasetConfig, train=True) -> ImageDataset:
    if cfg.id == "cifar10":
        ds = load_cifar10(cfg.root, train=train, download=cfg.download)
    elif cfg.id == "npz":
        ds = load_npz(cfg.root, train=train)
    else:
        n = cfg.synthetic_train if train else cfg.synthetic_test
        ds = synthetic(n, cfg.image_size, cfg.num_classes, seed=0 if train else 1)
    return ds.head(cfg.train_subset if train else cfg.test_subset)
