"""Comparison tables and plots across finished runs."""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .evaluation.record import TABLE_COLUMNS, MetricsRecord

log = logging.getLogger(__name__)

HEADER = (["run", "method", "dataset", "ratio"] + [f"CDA {c}" for c in TABLE_COLUMNS] + ["CDA Average", "CDA Worst"]
          + [f"ASR {c}" for c in TABLE_COLUMNS] + ["ASR Average", "ASR Worst", "PSNR", "SSIM", "status"])


def _run_info(run_dir: Path):
    import yaml

    cfg = yaml.safe_load((run_dir / "config.yaml").read_text()) if (run_dir / "config.yaml").exists() else {}
    return cfg.get("name", run_dir.name), cfg.get("attack", {}).get("pollution_ratio"), cfg.get("dataset", {}).get("id")


def _fmt(v, pct=True):
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{100 * v:.2f}" if pct else f"{v:.4f}"


def collect(run_dirs):
    rows = []
    for d in map(Path, run_dirs):
        name, ratio, dataset = _run_info(d)
        row = {"run": name, "dir": str(d), "ratio": ratio, "dataset": dataset, "record": None, "status": "missing"}
        path = d / "metrics.json"
        if path.exists():
            try:
                rec = MetricsRecord.from_json(path)
                row.update(record=rec, method=rec.method, dataset=rec.dataset or dataset,
                           status="ok" if all(c in rec.asr for c in TABLE_COLUMNS) else "partial")
            except (InputError, json.JSONDecodeError, TypeError) as exc:
                log.warning("unreadable metrics in %s: %s", d, exc)
                row["status"] = "invalid"
        rows.append(row)
    datasets = {r["dataset"] for r in rows if r["dataset"]}
    if len(datasets) > 1:
        raise ConfigError(f"refusing to merge runs on different datasets: {sorted(datasets)}")
    return rows


def table(rows):
    out = []
    for r in rows:
        rec = r["record"]
        line = [r["run"], r.get("method", ""), r["dataset"] or "", "" if r["ratio"] is None else f"{r['ratio']:g}"]
        if rec is None:
            line += [""] * (len(HEADER) - 5)
        else:
            line += [_fmt(rec.cda.get(c)) for c in TABLE_COLUMNS] + [_fmt(rec.cda_average), _fmt(rec.cda_worst)]
            line += [_fmt(rec.asr.get(c)) for c in TABLE_COLUMNS] + [_fmt(rec.asr_average), _fmt(rec.asr_worst)]
            line += [_fmt(rec.psnr, pct=False), _fmt(rec.ssim, pct=False)]
        out.append(line + [r["status"]])
    return out


def _plots(rows, out_dir: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []
    done = [r for r in rows if r["record"] is not None and "None" in r["record"].asr and r["ratio"] is not None]
    by_ratio = {}
    for r in done:
        by_ratio.setdefault((r.get("method"), r["ratio"]), r["record"].asr["None"])
    methods = sorted({m for m, _ in by_ratio})
    if any(len([k for k in by_ratio if k[0] == m]) > 1 for m in methods):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in methods:
            pts = sorted((ratio, v) for (mm, ratio), v in by_ratio.items() if mm == m)
            ax.plot([100 * p[0] for p in pts], [100 * p[1] for p in pts], "o-", label=m)
        ax.set_xlabel("pollution ratio (%)")
        ax.set_ylabel("ASR (%)")
        ax.set_ylim(0, 102)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "ratio_sweep.png", dpi=120)
        plt.close(fig)
        made.append("ratio_sweep.png")

    curves = [(r["run"], r["record"].defenses["fine_prune"]) for r in rows
              if r["record"] is not None and r["record"].defenses.get("fine_prune")]
    if curves:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, pts in curves:
            ax.plot([p["rate"] for p in pts], [p["asr"] for p in pts], "o-", label=f"{name} ASR")
            ax.plot([p["rate"] for p in pts], [p["cda"] for p in pts], "--", label=f"{name} CDA")
        ax.set_xlabel("prune rate")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / "prune_curves.png", dpi=120)
        plt.close(fig)
        made.append("prune_curves.png")

    for r in rows:
        npz = Path(r["dir"]) / "strip_entropy.npz"
        if npz.exists():
            with np.load(npz) as z:
                clean, poisoned = z["clean"], z["poisoned"]
            fig, ax = plt.subplots(figsize=(5, 3.5))
            bins = np.linspace(0, max(clean.max(), poisoned.max(), 1e-3), 30)
            ax.hist(clean, bins, alpha=0.6, label="clean")
            ax.hist(poisoned, bins, alpha=0.6, label="poisoned")
            ax.set_title(r["run"])
            ax.legend()
            fig.tight_layout()
            name = f"strip_{r['run']}.png"
            fig.savefig(out_dir / name, dpi=120)
            plt.close(fig)
            made.append(name)
    return made


def render_report(run_dirs, out_dir) -> dict:
    """Write ``report.csv``, ``report.md`` and plots for ``run_dirs`` into ``out_dir``; returns what was written."""
    if not run_dirs:
        raise InputError("render_report needs at least one run directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = collect(run_dirs)
    body = table(rows)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        w.writerows(body)
    md = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
    md += ["| " + " | ".join(line) + " |" for line in body]
    (out_dir / "report.md").write_text("\n".join(md) + "\n")
    plots = _plots(rows, out_dir)
    return {"rows": len(body), "csv": out_dir / "report.csv", "markdown": out_dir / "report.md", "plots": plots}
