"""Dose-volume histogram statistics, the sigmoid-smoothed DVH loss and MAE.

Losses take plain arrays or :class:`Grid3` values and compute in float64.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .volcore import STRUCTURE_NAMES, Grid3, GeometryError


def default_thresholds() -> tuple[float, ...]:
    return tuple(0.5 + np.arange(70, dtype=np.float64))


@dataclass(frozen=True)
class DvhConfig:
    thresholds: tuple[float, ...] = field(default_factory=default_thresholds)
    beta: float = 1.0
    structures: tuple[str, ...] = STRUCTURE_NAMES

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("need at least one DVH threshold")
        if np.any(np.diff(t) <= 0):
            raise ValueError("DVH thresholds must be strictly ascending")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        object.__setattr__(self, "thresholds", tuple(float(x) for x in t))
        object.__setattr__(self, "structures", tuple(self.structures))

    @property
    def n_t(self) -> int:
        return len(self.thresholds)


@dataclass(frozen=True)
class DvhCurve:
    structure: str
    thresholds: np.ndarray
    fractions: np.ndarray


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, Grid3) else x, dtype=np.float64)


def _masked(dose, mask, name="structure") -> np.ndarray:
    d = _values(dose)
    m = np.asarray(mask.values if isinstance(mask, Grid3) else mask).astype(bool)
    if m.shape != d.shape:
        raise GeometryError(f"mask {name} shape {m.shape} does not match dose {d.shape}")
    if not m.any():
        raise ValueError(f"mask {name} is empty")
    return d[m]


def _pair(pred, real):
    if isinstance(pred, Grid3) and isinstance(real, Grid3) and pred.geometry != real.geometry:
        raise GeometryError("pred and real doses have different geometries")
    p, r = _values(pred), _values(real)
    if p.shape != r.shape:
        raise GeometryError(f"pred shape {p.shape} != real shape {r.shape}")
    return p, r


# exact statistics ---------------------------------------------------------


def exact_volume_at_dose(dose, mask, d_t: float, name: str = "structure") -> float:
    v = _masked(dose, mask, name)
    return float(np.count_nonzero(v >= d_t)) / v.size


def exact_curve(dose, mask, thresholds, name: str = "structure") -> np.ndarray:
    v = np.sort(_masked(dose, mask, name))
    t = np.asarray(thresholds, dtype=np.float64)
    return (v.size - np.searchsorted(v, t, side="left")) / v.size


def dose_at_volume(dose, mask, x: float, name: str = "structure") -> float:
    """Largest dose received by at least ``x`` percent of the masked voxels."""
    if not 0 < x <= 100:
        raise ValueError(f"volume percentage must lie in (0, 100], got {x}")
    v = np.sort(_masked(dose, mask, name))[::-1]
    k = max(1, math.ceil(round(x * v.size / 100.0, 9)))
    return float(v[k - 1])


def volume_at_dose_pct(dose, mask, y: float, name: str = "structure") -> float:
    return 100.0 * exact_volume_at_dose(dose, mask, y, name)


def mean_dose(dose, mask, name: str = "structure") -> float:
    return float(_masked(dose, mask, name).mean())


# sigmoid DVH --------------------------------------------------------------


def soft_volume_at_dose(dose, mask, d_t: float, beta: float, name: str = "structure") -> float:
    if not beta > 0:
        raise ValueError("beta must be positive")
    v = _masked(dose, mask, name)
    return float(expit((v - d_t) / beta).sum() / v.size)


def soft_curve(dose, mask, thresholds, beta: float, name: str = "structure") -> np.ndarray:
    """Sigmoid volume-at-dose for every threshold; shape (n_t,)."""
    v = _masked(dose, mask, name)
    t = np.asarray(thresholds, dtype=np.float64)
    return expit((v[None, :] - t[:, None]) / beta).sum(axis=1) / v.size


def _structures(structures: Mapping[str, np.ndarray], cfg: DvhConfig):
    out = []
    for name in cfg.structures:
        if name in structures:
            m = np.asarray(structures[name]).astype(bool)
            if not m.any():
                raise ValueError(f"structure {name} is empty")
            out.append((name, m))
    if not out:
        raise ValueError("no DVH structures present")
    return out


def dvh_loss(pred, real, structures: Mapping[str, np.ndarray], cfg: DvhConfig = DvhConfig()) -> float:
    p, r = _pair(pred, real)
    included = _structures(structures, cfg)
    total = 0.0
    for name, m in included:
        diff = soft_curve(r, m, cfg.thresholds, cfg.beta, name) - \
            soft_curve(p, m, cfg.thresholds, cfg.beta, name)
        total += float(np.dot(diff, diff))
    return total / (len(included) * cfg.n_t)


def dvh_loss_and_grad(pred, real, structures: Mapping[str, np.ndarray],
                      cfg: DvhConfig = DvhConfig(), real_curves=None):
    """Loss and its gradient with respect to ``pred`` (``real`` held constant).

    ``real_curves`` may carry precomputed soft curves of ``real`` by structure.
    """
    p, r = _pair(pred, real)
    included = _structures(structures, cfg)
    t = np.asarray(cfg.thresholds)
    scale = 1.0 / (len(included) * cfg.n_t)
    grad = np.zeros_like(p)
    total = 0.0
    for name, m in included:
        v = p[m]
        s = expit((v[None, :] - t[:, None]) / cfg.beta)
        cp = s.sum(axis=1) / v.size
        cr = real_curves[name] if real_curves is not None else soft_curve(r, m, t, cfg.beta, name)
        diff = cp - cr
        total += float(np.dot(diff, diff))
        coef = 2.0 * diff / (cfg.beta * v.size)
        grad[m] += coef @ (s * (1.0 - s))
    return total * scale, grad * scale


def dvh_loss_grad(pred, real, structures, cfg: DvhConfig = DvhConfig()) -> np.ndarray:
    return dvh_loss_and_grad(pred, real, structures, cfg)[1]


def soft_curves(dose, structures: Mapping[str, np.ndarray], cfg: DvhConfig) -> dict:
    return {name: soft_curve(dose, m, cfg.thresholds, cfg.beta, name)
            for name, m in _structures(structures, cfg)}


# MAE ----------------------------------------------------------------------


def mae_loss(pred, real) -> float:
    p, r = _pair(pred, real)
    return float(np.abs(p - r).mean())


def mae_grad(pred, real) -> np.ndarray:
    p, r = _pair(pred, real)
    return np.sign(p - r) / p.size


# export -------------------------------------------------------------------


def exact_curves(dose, structures: Mapping[str, np.ndarray],
                 thresholds: Sequence[float]) -> list[DvhCurve]:
    t = np.asarray(thresholds, dtype=np.float64)
    return [DvhCurve(name, t, exact_curve(dose, structures[name], t, name))
            for name in STRUCTURE_NAMES if name in structures]


def write_dvh_csv(path, curves: Sequence[DvhCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["structure", "threshold_gy", "fraction"])
        for c in curves:
            for t, f in zip(c.thresholds, c.fractions):
                w.writerow([c.structure, repr(float(t)), repr(float(f))])
