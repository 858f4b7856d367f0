"""Victim classifiers and their training loop (standard, enhanced and fine-tune from pretrained)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import imaging, schema
from .errors import ConfigError, InputError, MissingArtifactError, NumericalError
from .evaluation.transforms import random_family_transform

log = logging.getLogger(__name__)

ARCHS = ("resnet18", "vgg19", "convnet")
CHECKPOINT_FORMAT = "edgeink-victim"
CHECKPOINT_VERSION = 1


# -- networks -------------------------------------------------------------------------------------------------


class VictimNet(nn.Module):
    """Backbone ending in a conv block, a prunable channel mask and a linear head.

    ``features`` returns the last convolutional activations, ``penultimate`` the
    pooled vector that feeds the classifier.
    """

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.register_buffer("prune_mask", torch.ones(channels))
        self.fc = nn.Linear(channels, num_classes)

    def features(self, x):
        raise NotImplementedError

    def pool(self, f):
        return F.adaptive_avg_pool2d(f * self.prune_mask.view(1, -1, 1, 1), 1).flatten(1)

    def penultimate(self, x):
        return self.pool(self.features(x))

    def head(self, f):
        return self.fc(self.pool(f))

    def forward(self, x):
        return self.head(self.features(x))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = nn.Sequential()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(y)) + self.short(x))


class ResNet18(VictimNet):
    """CIFAR-style ResNet-18: 3x3 stem, no max-pool."""

    def __init__(self, num_classes=10, width=64):
        widths = [width, width * 2, width * 4, width * 8]
        super().__init__(widths[-1], num_classes)
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        layers, cin = [], width
        for i, c in enumerate(widths):
            stride = 1 if i == 0 else 2
            layers += [BasicBlock(cin, c, stride), BasicBlock(c, c, 1)]
            cin = c
        self.layers = nn.Sequential(*layers)

    def features(self, x):
        return self.layers(self.stem(x))


class VGG19(VictimNet):
    VGG19_PLAN = [1, 1, "M", 2, 2, "M", 4, 4, 4, 4, "M", 8, 8, 8, 8, "M", 8, 8, 8, 8]

    def __init__(self, num_classes=10, width=64):
        super().__init__(width * 8, num_classes)
        layers, cin = [], 3
        for v in self.VGG19_PLAN:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(cin, width * v, 3, padding=1, bias=False), nn.BatchNorm2d(width * v), nn.ReLU()]
                cin = width * v
        self.body = nn.Sequential(*layers)

    def features(self, x):
        return self.body(x)


class ConvNet(VictimNet):
    """Small three-stage network for CPU rehearsals."""

    def __init__(self, num_classes=10, width=32):
        super().__init__(width * 4, num_classes)

        def block(cin, cout):
            return [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU()]

        self.body = nn.Sequential(*block(3, width), nn.MaxPool2d(2), *block(width, width * 2), nn.MaxPool2d(2),
                                  *block(width * 2, width * 4))

    def features(self, x):
        return self.body(x)


def build_network(arch: str, num_classes: int, width: int | None = None) -> VictimNet:
    if arch == "resnet18":
        return ResNet18(num_classes, width or 64)
    if arch == "vgg19":
        return VGG19(num_classes, width or 64)
    if arch == "convnet":
        return ConvNet(num_classes, width or 32)
    raise ConfigError(f"unknown victim architecture {arch!r}, expected one of {ARCHS}")


# -- config and model -----------------------------------------------------------------------------------------


@dataclass
class VictimConfig:
    arch: str = "resnet18"
    width: int | None = None
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list[int] = field(default_factory=lambda: [45, 60])
    lr_gamma: float = 0.1
    finetune_from: str | None = None
    finetune_lr: float = 0.001
    augment_max_angle: float = 15.0
    augment_scale_low: float = 0.7
    checkpoint_every: int = 5

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"victim.arch must be one of {ARCHS}, got {self.arch!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("victim.epochs must be >= 0 and victim.batch_size >= 1")
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("victim learning rates must be positive")
        if sorted(self.milestones) != list(self.milestones):
            raise ConfigError("victim.milestones must be increasing")
        if not 0 < self.augment_scale_low <= 1:
            raise ConfigError("victim.augment_scale_low must be in (0, 1]")
        return self


class VictimModel:
    """Trained classifier; calling it on NCHW float images returns softmax scores."""

    def __init__(self, net: VictimNet, arch: str, num_classes: int, width: int | None = None):
        self.net = net
        self.arch = arch
        self.num_classes = int(num_classes)
        self.width = width
        self.log: list[dict] = []
        self.meta: dict = {}
        self.net.eval()

    @classmethod
    def create(cls, cfg: VictimConfig, num_classes: int, seed: int = 0) -> "VictimModel":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            net = build_network(cfg.arch, num_classes, cfg.width)
        return cls(net, cfg.arch, num_classes, cfg.width)

    @property
    def device(self) -> torch.device:
        return self.net.fc.weight.device

    def to(self, device) -> "VictimModel":
        self.net.to(device)
        return self

    @torch.no_grad()
    def logits(self, images, batch_size=512) -> torch.Tensor:
        self.net.eval()
        x = imaging.to_tensor(images)
        dev = self.device
        return torch.cat([self.net(x[i:i + batch_size].to(dev)).cpu() for i in range(0, len(x), batch_size)]) \
            if len(x) else torch.zeros(0, self.num_classes)

    def __call__(self, images):
        return torch.softmax(self.logits(images), dim=1)

    def predict(self, images) -> np.ndarray:
        return self.logits(images).argmax(1).numpy()

    def copy(self) -> "VictimModel":
        net = build_network(self.arch, self.num_classes, self.width)
        net.load_state_dict(self.net.state_dict())
        out = VictimModel(net, self.arch, self.num_classes, self.width).to(self.device)
        out.log, out.meta = list(self.log), dict(self.meta)
        return out

    def state_dict(self):
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "arch": self.arch,
                "num_classes": self.num_classes, "width": self.width, "net": self.net.state_dict(),
                "log": self.log, "meta": self.meta}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "VictimModel":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path.name, f"no victim checkpoint at {path}; run train-victim first")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if state.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{path} is not a victim checkpoint")
        model = cls(build_network(state["arch"], state["num_classes"], state["width"]), state["arch"],
                    state["num_classes"], state["width"])
        model.net.load_state_dict(state["net"])
        model.log = list(state["log"])
        model.meta = dict(state["meta"])
        return model

    def write_log_csv(self, path) -> Path:
        path = Path(path)
        keys = sorted({k for row in self.log for k in row}, key=lambda k: (k != "epoch", k))
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.log)
        return path


# -- training -------------------------------------------------------------------------------------------------


def _epoch_generator(seed, epoch):
    g = torch.Generator()
    g.manual_seed(int(seed) * 100_003 + 7919 + int(epoch))
    return g


def augment(x: torch.Tensor, cfg: VictimConfig, rng: torch.Generator) -> torch.Tensor:
    return random_family_transform(x, rng, cfg.augment_max_angle, (cfg.augment_scale_low, 1.0))


def train_victim(
    dataset,
    cfg: VictimConfig | None = None,
    *,
    enhanced: bool = False,
    seed: int = 0,
    checkpoint_dir: str | Path | None = None,
    evaluate=None,
    progress=None,
    device=None,
) -> VictimModel:
    """Cross-entropy training on ``dataset`` (anything with uint8 ``images``, ``labels``, ``num_classes``).

    ``enhanced`` pushes every training image through a random member of the
    evaluation transform family each iteration. ``cfg.finetune_from`` starts
    from a pretrained checkpoint at ``cfg.finetune_lr`` with a flat schedule.
    ``evaluate(model) -> dict`` is merged into each epoch's log row.
    """
    cfg = (cfg or VictimConfig()).validate()
    images, labels = np.asarray(dataset.images), np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise InputError("cannot train a victim on an empty dataset")
    num_classes = int(dataset.num_classes)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InputError(f"labels must lie in [0, {num_classes})")

    last = Path(checkpoint_dir) / "victim_last.ckpt" if checkpoint_dir is not None else None
    resume = torch.load(last, map_location="cpu", weights_only=True) if last is not None and last.exists() else None

    if cfg.finetune_from:
        model = VictimModel.load(cfg.finetune_from)
        if model.num_classes != num_classes:
            raise InputError(f"pretrained model has {model.num_classes} classes, dataset has {num_classes}")
        model.log = []
        lr, milestones = cfg.finetune_lr, []
    else:
        model = VictimModel.create(cfg, num_classes, seed)
        lr, milestones = cfg.lr, cfg.milestones
    if device is not None:
        model.to(device)
    net = model.net
    dev = model.device
    opt = torch.optim.SGD(net.parameters(), lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=milestones, gamma=cfg.lr_gamma)
    start = 0
    if resume is not None:
        net.load_state_dict(resume["net"])
        opt.load_state_dict(resume["opt"])
        sched.load_state_dict(resume["sched"])
        model.log = list(resume["log"])
        start = resume["epoch"]
    model.meta.update({"enhanced": bool(enhanced), "seed": int(seed), "finetune": bool(cfg.finetune_from)})

    n = len(images)
    bs = min(cfg.batch_size, n)
    for epoch in range(start, cfg.epochs):
        rng = _epoch_generator(seed, epoch)
        order = torch.randperm(n, generator=rng).numpy()
        net.train()
        total, correct, seen = 0.0, 0, 0
        # drop a 1-sample tail: batch-norm cannot normalise it
        n_batches = n // bs + (1 if n % bs > 1 else 0)
        for b in range(n_batches):
            idx = order[b * bs:(b + 1) * bs]
            x = imaging.to_tensor(images[idx], dev)
            y = torch.from_numpy(labels[idx]).to(dev)
            if enhanced:
                x = augment(x, cfg, rng)
            out = net(x)
            loss = F.cross_entropy(out, y)
            if not math.isfinite(loss.item()):
                raise NumericalError(
                    f"victim loss diverged ({loss.item()}) at epoch {epoch + 1}, lr {opt.param_groups[0]['lr']:.2e}",
                    b)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((out.argmax(1) == y).sum())
            seen += len(idx)
        row = {"epoch": epoch + 1, "loss": total / seen, "train_acc": correct / seen, "lr": opt.param_groups[0]["lr"]}
        sched.step()
        net.eval()
        if evaluate is not None:
            row.update(evaluate(model))
        model.log.append(row)
        log.info("victim epoch %d/%d %s", epoch + 1, cfg.epochs,
                 " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
        if progress is not None:
            progress(row)
        if last is not None and ((epoch + 1) % max(cfg.checkpoint_every, 1) == 0 or epoch + 1 == cfg.epochs):
            last.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"net": net.state_dict(), "opt": opt.state_dict(), "sched": sched.state_dict(),
                        "log": model.log, "epoch": epoch + 1}, last)
    net.eval()
    model.meta["config"] = schema.to_dict(cfg)
    return model
