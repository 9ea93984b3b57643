"""OpenKBP-style dose and DVH scores, clinical DVH metric errors, and reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dvh import _pair, dose_at_volume, mae_loss, mean_dose, volume_at_dose_pct
from .volcore import OAR_ORDER, PRESCRIPTION_GY

# (structure, metric, kind) where kind "D" is percent of prescription, "V" volume percent
CLINICAL_METRICS = (
    ("ptv", "D99", "D"), ("ptv", "D98", "D"), ("ptv", "D95", "D"), ("ptv", "D5", "D"),
    ("esophagus", "D2", "D"), ("esophagus", "V40", "V"), ("esophagus", "V50", "V"),
    ("heart", "V35", "V"),
    ("cord", "D2", "D"),
    ("lung_l", "Dmean", "D"), ("lung_l", "V5", "V"), ("lung_l", "V20", "V"),
    ("lung_r", "Dmean", "D"), ("lung_r", "V5", "V"), ("lung_r", "V20", "V"),
)


def dose_score(pred, real, mask=None) -> float:
    """Mean absolute voxel error; over ``mask`` only when given."""
    if mask is None:
        return mae_loss(pred, real)
    p, r = _pair(pred, real)
    m = np.asarray(getattr(mask, "values", mask)).astype(bool)
    if m.shape != p.shape:
        raise ValueError(f"mask shape {m.shape} does not match dose {p.shape}")
    if not m.any():
        raise ValueError("dose-score mask is empty")
    return float(np.abs(p[m] - r[m]).mean())


def dvh_criteria(dose, structures: Mapping[str, np.ndarray]) -> dict[str, float]:
    if "ptv" not in structures:
        raise ValueError("DVH score needs a PTV")
    out = {}
    for name in OAR_ORDER:
        if name in structures and np.any(structures[name]):
            out[f"{name}.mean"] = mean_dose(dose, structures[name], name)
    for x, label in ((1, "D1"), (95, "D95"), (99, "D99")):
        out[f"ptv.{label}"] = dose_at_volume(dose, structures["ptv"], x, "ptv")
    return out


def dvh_errors(pred, real, structures) -> dict[str, float]:
    cp, cr = dvh_criteria(pred, structures), dvh_criteria(real, structures)
    return {k: abs(cr[k] - cp[k]) for k in cr}


def dvh_score(pred, real, structures) -> float:
    errs = dvh_errors(pred, real, structures)
    return float(sum(errs.values()) / len(errs))


def _clinical_value(dose, mask, metric, kind, prescription):
    if metric == "Dmean":
        return 100.0 * mean_dose(dose, mask) / prescription
    num = float(metric[1:])
    if kind == "D":
        return 100.0 * dose_at_volume(dose, mask, num) / prescription
    return volume_at_dose_pct(dose, mask, num)


def clinical_table(pred, real, structures, prescription: float = PRESCRIPTION_GY) -> dict:
    """Absolute real-vs-pred difference per clinical metric; ``None`` for absent structures."""
    table = {}
    for name, metric, kind in CLINICAL_METRICS:
        key = f"{name}.{metric}"
        if name not in structures or not np.any(structures[name]):
            table[key] = None
            continue
        m = structures[name]
        table[key] = abs(_clinical_value(real, m, metric, kind, prescription)
                         - _clinical_value(pred, m, metric, kind, prescription))
    return table


@dataclass
class ScoreReport:
    case_id: str
    dose_score: float
    dvh_score: float
    dvh_errors: dict = field(default_factory=dict)
    clinical: dict = field(default_factory=dict)

    def row(self) -> dict:
        r = {"case_id": self.case_id, "dose_score": self.dose_score, "dvh_score": self.dvh_score}
        r.update({f"dvh_err.{k}": v for k, v in sorted(self.dvh_errors.items())})
        r.update({f"clin.{k}": v for k, v in self.clinical.items()})
        return r


def score_case(case_id, pred, real, structures, prescription=PRESCRIPTION_GY,
               body=None) -> ScoreReport:
    return ScoreReport(str(case_id), dose_score(pred, real, body), dvh_score(pred, real, structures),
                       dvh_errors(pred, real, structures),
                       clinical_table(pred, real, structures, prescription))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())


def _case_key(cid: str):
    return (0, int(cid), "") if cid.isdigit() else (1, 0, cid)


def _columns(rows):
    cols = {}
    for r in rows:
        cols.update(dict.fromkeys(r))
    return list(cols)


def aggregate(reports: Sequence[ScoreReport]) -> dict:
    if not reports:
        raise ValueError("need at least one report")
    rows = [r.row() for r in reports]
    keys = [k for k in _columns(rows) if k != "case_id"]
    agg = {}
    for k in keys:
        m, s = mean_std([r.get(k) for r in rows])
        agg[k] = {"mean": m, "std": s}
    return agg


def aggregate_and_emit(reports: Sequence[ScoreReport], out_dir, config: dict | None = None):
    """Write ``report.csv`` and ``report.json`` sorted by case id. Returns the aggregates."""
    out = Path(out_dir)
    reports = sorted(reports, key=lambda r: _case_key(r.case_id))
    agg = aggregate(reports)
    rows = [r.row() for r in reports]
    cols = _columns(rows)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow(["" if r.get(c) is None else (r[c] if c == "case_id" else repr(float(r[c])))
                            for c in cols])
            for stat in ("mean", "std"):
                w.writerow([stat] + [repr(agg[c][stat]) for c in cols[1:]])
        doc = {"config": config or {}, "cases": rows, "aggregate": agg}
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing report to {out}: {exc}") from exc
    return agg
