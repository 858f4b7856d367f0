"""Persisted evaluation results: JSON record plus a robustness-table CSV."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import InputError

TABLE_COLUMNS = ["None", "Flip", "S&P", "Rot15", "C&R"]


def _clean(v):
    """JSON cannot hold inf; store it as the string "inf"."""
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_clean(x) for x in v]
    return v


def _restore(v):
    if v in ("inf", "-inf"):
        return float(v)
    if isinstance(v, dict):
        return {k: _restore(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_restore(x) for x in v]
    return v


@dataclass
class MetricsRecord:
    cda: dict[str, float] = field(default_factory=dict)
    asr: dict[str, float] = field(default_factory=dict)
    psnr: float | None = None
    ssim: float | None = None
    lpips: float | None = None
    defenses: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    method: str = ""
    dataset: str = ""
    config_hash: str = ""
    started_at: str = ""
    finished_at: str = ""

    def validate(self):
        for name in ("cda", "asr"):
            for k, v in getattr(self, name).items():
                if not 0.0 <= v <= 1.0:
                    raise InputError(f"{name}[{k}] = {v} is not a rate in [0, 1]")
        return self

    @staticmethod
    def _summary(rates: dict[str, float]):
        vals = [rates[c] for c in TABLE_COLUMNS if c in rates]
        if not vals:
            return None, None
        return sum(vals) / len(vals), min(vals)

    @property
    def cda_average(self):
        return self._summary(self.cda)[0]

    @property
    def cda_worst(self):
        return self._summary(self.cda)[1]

    @property
    def asr_average(self):
        return self._summary(self.asr)[0]

    @property
    def asr_worst(self):
        return self._summary(self.asr)[1]

    def to_dict(self, timestamps=True):
        d = asdict(self)
        d["cda_average"], d["cda_worst"] = self._summary(self.cda)
        d["asr_average"], d["asr_worst"] = self._summary(self.asr)
        if not timestamps:
            d.pop("started_at")
            d.pop("finished_at")
        return _clean(d)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def from_dict(cls, d) -> "MetricsRecord":
        d = _restore(dict(d))
        for k in ("cda_average", "cda_worst", "asr_average", "asr_worst"):
            d.pop(k, None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InputError(f"unknown metrics fields {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "MetricsRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def table_rows(self):
        """Rows ``[metric, None, Flip, S&P, Rot15, C&R, Average, Worst]`` (percent, blank when missing)."""
        rows = []
        for metric in ("cda", "asr"):
            rates = getattr(self, metric)
            avg, worst = self._summary(rates)
            cells = [rates.get(c) for c in TABLE_COLUMNS] + [avg, worst]
            rows.append([metric.upper()] + ["" if v is None else f"{100 * v:.2f}" for v in cells])
        return rows

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Metric"] + TABLE_COLUMNS + ["Average", "Worst"])
            w.writerows(self.table_rows())
        return path
