"""Injector configuration, the trainable bundle, and checkpoint I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .. import schema
from ..errors import ConfigError, InputError, MissingArtifactError
from .interference import InterferenceConfig
from .networks import GuidanceExtractor, InjectionNet, PatchDiscriminator, init_weights

CHECKPOINT_FORMAT = "edgeink-injector"
CHECKPOINT_VERSION = 1


@dataclass
class InjectorConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    k: int = 1
    lambda_: float = field(default=1.0, metadata={"key": "lambda"})
    beta_adv: float = 0.01
    gamma: float = 1.0
    ngf: int = 64
    ge_width: int = 128
    ge_res_blocks: int = 7
    ndf: int = 64
    patch: int = 16
    color_mode: str = "cube"
    color_step: int = 8
    palette_size: int = 10
    checkpoint_every: int = 10
    interference: InterferenceConfig = field(default_factory=InterferenceConfig)

    def validate(self):
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("injector.epochs must be >= 0 and injector.batch_size >= 2")
        if self.k not in (1, 2):
            raise ConfigError(f"injector.k must be 1 or 2, got {self.k}")
        if self.color_mode not in ("cube", "palette"):
            raise ConfigError(f"injector.color_mode must be 'cube' or 'palette', got {self.color_mode!r}")
        if not 1 <= self.color_step <= 128:
            raise ConfigError("injector.color_step must be in [1, 128]")
        for name in ("lambda_", "beta_adv", "gamma", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"injector.{name.rstrip('_')} must be >= 0")
        self.interference.validate()
        return self


@dataclass(frozen=True)
class LossWeights:
    k: int = 1
    lam: float = 1.0
    gamma: float = 1.0
    beta_adv: float = 0.01

    @classmethod
    def from_config(cls, cfg: InjectorConfig):
        return cls(k=cfg.k, lam=cfg.lambda_, gamma=cfg.gamma, beta_adv=cfg.beta_adv)


class InjectorBundle:
    """Injection network, guidance extractor, discriminator and their optimiser state."""

    def __init__(self, cfg: InjectorConfig | None = None, seed: int = 0):
        self.cfg = (cfg or InjectorConfig()).validate()
        self.seed = int(seed)
        self.epoch = 0
        self.history: list[dict] = []
        self.meta: dict = {}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed)
            self.injection = InjectionNet(ngf=self.cfg.ngf)
            self.extractor = GuidanceExtractor(width=self.cfg.ge_width, n_res=self.cfg.ge_res_blocks)
            self.discriminator = PatchDiscriminator(ndf=self.cfg.ndf, patch=self.cfg.patch)
            for net in self.nets:
                net.apply(init_weights)
        betas = (self.cfg.beta1, self.cfg.beta2)
        self.opt_g = torch.optim.Adam(
            list(self.injection.parameters()) + list(self.extractor.parameters()), lr=self.cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=self.cfg.lr, betas=betas)

    @property
    def nets(self):
        return (self.injection, self.extractor, self.discriminator)

    @property
    def device(self) -> torch.device:
        return next(self.injection.parameters()).device

    def to(self, device):
        for net in self.nets:
            net.to(device)
        for opt in (self.opt_g, self.opt_d):
            for state in opt.state.values():
                for k, v in state.items():
                    if isinstance(v, torch.Tensor) and v.ndim:
                        state[k] = v.to(device)
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights.from_config(self.cfg)

    def train(self, mode=True):
        for net in self.nets:
            net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": schema.to_dict(self.cfg),
            "seed": self.seed,
            "epoch": self.epoch,
            "history": self.history,
            "meta": self.meta,
            "injection": self.injection.state_dict(),
            "extractor": self.extractor.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "InjectorBundle":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(path.name, f"no injector checkpoint at {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if state.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{path} is not an injector checkpoint")
        if state.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"unsupported injector checkpoint version {state.get('version')}")
        bundle = cls(schema.from_dict(InjectorConfig, state["config"], "injector"), seed=state["seed"])
        bundle.injection.load_state_dict(state["injection"])
        bundle.extractor.load_state_dict(state["extractor"])
        bundle.discriminator.load_state_dict(state["discriminator"])
        bundle.opt_g.load_state_dict(state["opt_g"])
        bundle.opt_d.load_state_dict(state["opt_d"])
        bundle.epoch = state["epoch"]
        bundle.history = list(state["history"])
        bundle.meta = dict(state.get("meta", {}))
        return bundle.eval()


def _check_pair(clean, pattern):
    if clean.ndim != 4 or clean.shape[1] != 3:
        raise InputError(f"expected an N x 3 x H x W batch, got {tuple(clean.shape)}")
    if clean.shape != pattern.shape:
        raise InputError(f"clean {tuple(clean.shape)} and pattern {tuple(pattern.shape)} differ in shape")


@torch.no_grad()
def inject(bundle: InjectorBundle, clean: torch.Tensor, pattern: torch.Tensor, batch_size=256) -> torch.Tensor:
    """Poisoned images IN([clean; pattern]) for NCHW batches (inference mode)."""
    _check_pair(clean, pattern)
    bundle.eval()
    dev = bundle.device
    out = [bundle.injection(torch.cat([c.to(dev), p.to(dev)], dim=1)).cpu()
           for c, p in zip(clean.split(batch_size), pattern.split(batch_size))]
    return torch.cat(out) if out else clean.clone()


@torch.no_grad()
def guidance_extract(bundle: InjectorBundle, images: torch.Tensor, batch_size=256) -> torch.Tensor:
    bundle.eval()
    return torch.cat([bundle.extractor(x.to(bundle.device)).cpu() for x in images.split(batch_size)])


@torch.no_grad()
def discriminate(bundle: InjectorBundle, images: torch.Tensor) -> torch.Tensor:
    """Realness in (0, 1) per patch: N x 1 x H/patch x W/patch."""
    patch = bundle.discriminator.patch
    if images.shape[-2] % patch or images.shape[-1] % patch:
        raise InputError(f"H and W must be multiples of {patch}, got {tuple(images.shape[-2:])}")
    bundle.eval()
    return torch.sigmoid(bundle.discriminator(images.to(bundle.device))).cpu()
