"""Stage runner: train-injector -> poison -> train-victim -> evaluate, resumable per stage.

Run directory layout::

    config.yaml  run.json  run.log
    edge.json  injector.ckpt  injector/injector_last.ckpt
    poisoned/{images.npy,index.jsonl,meta.json}
    victim.ckpt  victim_log.csv  victim/victim_last.ckpt  clean_victim.ckpt
    metrics.json  metrics.csv  strip_entropy.npz  *.png
"""

from __future__ import annotations

import json
import logging
import shutil
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import schema
from .config import STAGES, ExperimentConfig, load_config
from .data import ImageDataset, load_dataset
from .edge_trigger import EdgeConfig
from .errors import ConfigError, MissingArtifactError
from .evaluation import MetricsRecord, TransformSpec, attack_success, evaluate_cda, image_quality
from .evaluation import defenses
from .injector import InjectorBundle, train_injector
from .poisoning import PoisonedDataset, make_triggered, poison_dataset
from .victim import VictimModel, train_victim

log = logging.getLogger(__name__)

INJECTOR = "injector.ckpt"
VICTIM = "victim.ckpt"
CLEAN_VICTIM = "clean_victim.ckpt"
POISONED = "poisoned"
METRICS = "metrics.json"


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """A run directory bound to its config; refuses to mix artifacts from different configs."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.dir = Path(cfg.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hash = cfg.hash()
        info = self.dir / "run.json"
        if info.exists():
            old = json.loads(info.read_text())
            if old.get("config_hash") != self.hash and not force:
                raise ConfigError(
                    f"{self.dir} holds a run with a different config (hash {old.get('config_hash', '?')[:12]}); "
                    "choose another output_dir or pass --force")
        cfg.dump(self.dir / "config.yaml")
        info.write_text(json.dumps({"config_hash": self.hash, "name": cfg.name}, indent=2))
        self._datasets = {}
        self.device = cfg.torch_device()

    def path(self, name) -> Path:
        return self.dir / name

    def dataset(self, train: bool) -> ImageDataset:
        if train not in self._datasets:
            self._datasets[train] = load_dataset(self.cfg.dataset, train=train)
        return self._datasets[train]

    def needs_injector(self) -> bool:
        return self.cfg.attack.method == "poison_ink"

    def edge(self) -> EdgeConfig:
        p = self.path("edge.json")
        if p.exists():
            return schema.from_dict(EdgeConfig, json.loads(p.read_text()), "edge")
        edge = self.cfg.edge.validate().resolved(self.dataset(True).images)
        p.write_text(json.dumps(schema.to_dict(edge), indent=2))
        return edge

    def injector(self, path=None) -> InjectorBundle | None:
        if not self.needs_injector():
            return None
        p = Path(path) if path else self.path(INJECTOR)
        if not p.exists():
            raise MissingArtifactError(INJECTOR, f"expected at {p}; run the train-injector stage first")
        return InjectorBundle.load(p).to(self.device)

    def poisoned(self, path=None) -> PoisonedDataset:
        p = Path(path) if path else self.path(POISONED)
        if not (p / "index.jsonl").exists():
            raise MissingArtifactError(f"{POISONED}/index.jsonl", f"expected under {p}; run the poison stage first")
        return PoisonedDataset.load(p)

    def victim(self, path=None) -> VictimModel:
        p = Path(path) if path else self.path(VICTIM)
        if not p.exists():
            raise MissingArtifactError(VICTIM, f"expected at {p}; run the train-victim stage first")
        return VictimModel.load(p).to(self.device)

    def meta(self):
        return {"config_hash": self.hash, "run": self.cfg.name}


# -- stages ---------------------------------------------------------------------------------------------------


def stage_train_injector(run: Run, force=False):
    if not run.needs_injector():
        log.info("method %s needs no injector; skipping", run.cfg.attack.method)
        return
    out = run.path(INJECTOR)
    if out.exists() and not force:
        log.info("injector already trained (%s); skipping", out)
        return
    if force:
        shutil.rmtree(run.path("injector"), ignore_errors=True)
    train = run.dataset(True)
    edge = run.edge()
    bundle = train_injector(train.images, run.cfg.injector, edge=edge, seed=run.cfg.seeds.injector,
                            checkpoint_dir=run.path("injector"), device=run.device)
    bundle.meta.update(run.meta())
    bundle.save(out)


def stage_poison(run: Run, force=False, injector=None):
    out = run.path(POISONED)
    if (out / "index.jsonl").exists() and not force:
        log.info("poisoned dataset present (%s); skipping", out)
        return
    bundle = run.injector(injector)
    edge = run.edge() if bundle is not None else None
    poisoned = poison_dataset(run.dataset(True), run.cfg.attack, bundle, rng=run.cfg.seeds.poison, edge=edge)
    poisoned.meta.update(run.meta())
    if out.exists():
        shutil.rmtree(out)
    poisoned.save(out)
    log.info("poisoned %d / %d training samples", poisoned.n_poisoned, len(poisoned))


def _tracker(run: Run, bundle, edge):
    every = run.cfg.evaluation.track_every
    if every <= 0:
        return None
    test = run.dataset(False)
    triggered, target = _triggered_test(run, bundle, edge)
    state = {"epoch": 0}

    def evaluate(model):
        state["epoch"] += 1
        if state["epoch"] % every:
            return {}
        return {"cda": evaluate_cda(model, test), "asr": attack_success(model, triggered, target)}

    return evaluate


def stage_train_victim(run: Run, force=False, data=None, injector=None):
    out = run.path(VICTIM)
    if not out.exists() or force:
        if force:
            shutil.rmtree(run.path("victim"), ignore_errors=True)
        poisoned = run.poisoned(data)
        bundle = run.injector(injector) if run.cfg.evaluation.track_every > 0 else None
        edge = run.edge() if bundle is not None else None
        model = train_victim(poisoned, run.cfg.victim, enhanced=run.cfg.attack.enhanced_training,
                             seed=run.cfg.seeds.victim, checkpoint_dir=run.path("victim"),
                             evaluate=_tracker(run, bundle, edge), device=run.device)
        model.meta.update(run.meta())
        model.save(out)
        model.write_log_csv(run.path("victim_log.csv"))
    else:
        log.info("victim already trained (%s); skipping", out)
    clean_out = run.path(CLEAN_VICTIM)
    if run.cfg.evaluation.clean_baseline and (force or not clean_out.exists()):
        if force:
            shutil.rmtree(run.path("clean_victim"), ignore_errors=True)
        model = train_victim(run.dataset(True), run.cfg.victim, enhanced=run.cfg.attack.enhanced_training,
                             seed=run.cfg.seeds.victim, checkpoint_dir=run.path("clean_victim"), device=run.device)
        model.meta.update(run.meta())
        model.save(clean_out)


def _triggered_test(run: Run, bundle, edge, message_id=0):
    test = run.dataset(False)
    target = run.cfg.attack.targets[message_id]
    keep = np.nonzero(test.labels != target)[0]
    if len(keep) == 0:
        raise ConfigError(f"test set has no images outside target class {target}")
    triggered = make_triggered(test.images[keep], np.full(len(keep), message_id), run.cfg.attack, bundle, edge)
    return triggered, target


def _spec(kind, ev):
    scale = {"crop_resize": ev.crop_scale, "resize": ev.resize_scale}.get(kind, ev.shrink_scale)
    return TransformSpec(kind, angle=ev.rotate_angle, scale=scale).validate()


def stage_evaluate(run: Run, force=False, model=None, injector=None):
    out = run.path(METRICS)
    if out.exists() and not force:
        log.info("metrics present (%s); skipping", out)
        return MetricsRecord.from_json(out)
    started = _now()
    cfg, ev = run.cfg, run.cfg.evaluation
    victim = run.victim(model)
    bundle = run.injector(injector)
    edge = run.edge()
    test = run.dataset(False)
    target = cfg.attack.targets[0]
    keep = np.nonzero(test.labels != target)[0]
    clean_eligible = test.images[keep]
    triggered, _ = _triggered_test(run, bundle, edge)
    rng_seed = cfg.seeds.victim * 1_000_003

    def g(offset):
        return torch.Generator().manual_seed(rng_seed + offset)

    rec = MetricsRecord(method=cfg.attack.method, dataset=cfg.dataset.id, config_hash=run.hash, started_at=started)
    for i, kind in enumerate(ev.transforms):
        spec = _spec(kind, ev)
        rec.cda[spec.name] = evaluate_cda(victim, test, spec, g(i), test.images)
        rec.asr[spec.name] = attack_success(victim, triggered, target, spec, g(100 + i), test.images)
    extra = {}
    for i, kind in enumerate(ev.extra_transforms):
        spec = _spec(kind, ev)
        extra[spec.name] = {"cda": evaluate_cda(victim, test, spec, g(200 + i), test.images),
                            "asr": attack_success(victim, triggered, target, spec, g(300 + i), test.images)}
    rec.extra["transforms"] = extra
    rec.extra["eligible_asr_samples"] = int(len(triggered))

    q = image_quality(clean_eligible, triggered)
    rec.psnr, rec.ssim = q.psnr, q.ssim

    for mid in list(cfg.attack.targets)[1:]:
        trig_m, tgt_m = _triggered_test(run, bundle, edge, mid)
        rec.extra.setdefault("asr_per_message", {})[str(mid)] = attack_success(victim, trig_m, tgt_m)

    clean_path = run.path(CLEAN_VICTIM)
    if clean_path.exists():
        clean = VictimModel.load(clean_path).to(run.device)
        rec.extra["clean_baseline"] = {"cda": evaluate_cda(clean, test),
                                       "asr": attack_success(clean, triggered, target)}

    train = run.dataset(True)
    rec.defenses = _defenses(run, victim, edge, test, triggered, clean_eligible, target, train, g)
    rec.finished_at = _now()
    rec.validate()
    rec.to_json(out)
    rec.to_csv(run.path("metrics.csv"))
    return rec


def _defenses(run: Run, victim, edge, test, triggered, clean_eligible, target, train, g):
    ev = run.cfg.evaluation
    out = {}
    n = min(ev.strip_samples, len(triggered))
    if "strip" in ev.defenses:
        pick = torch.randperm(len(triggered), generator=g(400))[:n].numpy()
        res = defenses.strip_compare(victim, clean_eligible[pick], triggered[pick], test.images, ev.strip_overlays,
                                     seed=run.cfg.seeds.victim)
        np.savez(run.path("strip_entropy.npz"), clean=res.clean_entropy, poisoned=res.poisoned_entropy)
        out["strip"] = res.as_dict()
        _plot_entropy(res, run.path("strip_entropy.png"))
    if "fine_prune" in ev.defenses:
        rows = defenses.fine_prune_curve(victim, test.images, test, triggered, target, ev.prune_rates)
        out["fine_prune"] = rows
        _plot_prune(rows, run.path("fine_prune.png"))
    if "activation_clustering" in ev.defenses:
        poisoned = run.poisoned()
        m = min(ev.ac_samples, len(poisoned))
        pick = np.sort(np.random.default_rng(run.cfg.seeds.victim).choice(len(poisoned), m, replace=False))
        res = defenses.activation_clustering(victim, poisoned.images[pick], poisoned.labels[pick],
                                             poisoned.is_poisoned[pick], seed=run.cfg.seeds.victim)
        out["activation_clustering"] = res.as_dict()
    if "edge_replacement" in ev.defenses:
        sobel = edge if edge.operator == "sobel" else EdgeConfig(edge_fraction=edge.edge_fraction).resolved(
            train.images)
        const = defenses.edge_replacement_defense(triggered, sobel, "constant", ev.edge_fill_value)
        orig = defenses.edge_replacement_defense(triggered, sobel, "original", originals=clean_eligible)
        out["edge_replacement"] = {"constant": attack_success(victim, const, target),
                                   "original": attack_success(victim, orig, target)}
    if "region_removal" in ev.defenses:
        out["region_removal"] = {
            "asr_after": defenses.region_removal_asr(victim, triggered, clean_eligible, target, ev.region_area)}
    return out


def _plot_entropy(res, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(0, max(res.clean_entropy.max(), res.poisoned_entropy.max(), 1e-3), 30)
    ax.hist(res.clean_entropy, bins, alpha=0.6, label="clean")
    ax.hist(res.poisoned_entropy, bins, alpha=0.6, label="poisoned")
    ax.set_xlabel("mean prediction entropy")
    ax.set_ylabel("count")
    ax.set_title(f"STRIP (KS = {res.ks_statistic:.3f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_prune(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    rates = [r["rate"] for r in rows]
    ax.plot(rates, [r["cda"] for r in rows], "o-", label="CDA")
    ax.plot(rates, [r["asr"] for r in rows], "s-", label="ASR")
    ax.set_xlabel("prune rate")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- entry point ----------------------------------------------------------------------------------------------


def _attach_log(run: Run):
    handler = logging.FileHandler(run.path("run.log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("edgeink").addHandler(handler)
    return handler


def run_experiment(config, stages=None, force=False, *, injector=None, data=None, model=None) -> Path:
    """Run the requested stages (default: ``config.stages``) and return the run directory.

    ``config`` is an :class:`ExperimentConfig` or a path / preset name. The
    artifact overrides point a stage at checkpoints outside the run directory.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    stages = list(stages or cfg.stages)
    for s in stages:
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}, expected some of {STAGES}")
    torch.use_deterministic_algorithms(True, warn_only=True)
    run = Run(cfg, force)
    handler = _attach_log(run)
    try:
        for s in STAGES:
            if s not in stages:
                continue
            log.info("stage %s", s)
            if s == "train-injector":
                stage_train_injector(run, force)
            elif s == "poison":
                stage_poison(run, force, injector)
            elif s == "train-victim":
                stage_train_victim(run, force, data, injector)
            else:
                stage_evaluate(run, force, model, injector)
    finally:
        logging.getLogger("edgeink").removeHandler(handler)
        handler.close()
    return run.dir
