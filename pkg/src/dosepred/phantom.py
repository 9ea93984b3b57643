"""Synthetic thorax phantoms with a consistent and a perturbed reference plan.

The consistent plan is one fixed procedure applied to every case: a
non-negative least-squares beam weighting followed by PTV-mean
normalisation. The perturbed plan adds per-case blur, beam-weight jitter and
normalisation jitter, standing in for manual plans of varying quality.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .beamsim import BeamKernelParams, BeamSpec, beam_dose, beam_doses, combine_beams
from .volcore import (OAR_ORDER, PRESCRIPTION_GY, CaseBundle, Geometry, Grid3,
                      StructureSet, normalize_ptv_mean)

log = logging.getLogger(__name__)

HU_AIR = -1000.0
HU_LUNG = -700.0
HU_WATER = 0.0
HU_SOFT = 40.0
HU_CORD = 300.0


def substream(seed: int, name: str, *ids: int) -> np.random.Generator:
    """Independent generator for a named purpose, derived from the master seed."""
    key = [int(seed), zlib.crc32(name.encode("utf-8"))] + [int(i) for i in ids]
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 64)
    fov_mm: tuple[float, float, float] = (400.0, 400.0, 256.0)
    spacing: tuple[float, float, float] | None = None
    body_a_mm: tuple[float, float] = (150.0, 175.0)
    body_b_mm: tuple[float, float] = (100.0, 120.0)
    lung_scale: tuple[float, float] = (0.85, 1.0)
    heart_radius_mm: tuple[float, float] = (45.0, 60.0)
    cord_radius_mm: tuple[float, float] = (9.0, 12.0)
    esophagus_radius_mm: tuple[float, float] = (9.0, 12.0)
    ptv_radius_mm: tuple[float, float] = (25.0, 40.0)
    beam_count: tuple[int, int] = (5, 7)
    angle_jitter_deg: float = 8.0
    max_retries: int = 50

    def __post_init__(self):
        ranges = {k: getattr(self, k) for k in (
            "body_a_mm", "body_b_mm", "lung_scale", "heart_radius_mm", "cord_radius_mm",
            "esophagus_radius_mm", "ptv_radius_mm")}
        for k, (lo, hi) in ranges.items():
            if not 0 < lo < hi:
                raise ValueError(f"{k} must be a non-degenerate positive range, got {(lo, hi)}")
        lo, hi = self.beam_count
        if not 5 <= lo <= hi <= 7:
            raise ValueError(f"beam count range must lie within [5, 7], got {self.beam_count}")
        if min(self.dims) < 8:
            raise ValueError("phantom dims must be at least 8 per axis")

    @property
    def geometry(self) -> Geometry:
        sp = self.spacing or tuple(f / d for f, d in zip(self.fov_mm, self.dims))
        origin = tuple(-0.5 * (d - 1) * s for d, s in zip(self.dims, sp))
        return Geometry(self.dims, sp, origin)


@dataclass(frozen=True)
class PerturbSpec:
    seed: int = 1
    weight_jitter: float = 0.15
    blur_sigma_mm: tuple[float, float] = (4.0, 8.0)
    norm_jitter: float = 0.05

    def __post_init__(self):
        lo, hi = self.blur_sigma_mm
        if self.weight_jitter < 0 or self.norm_jitter < 0 or lo < 0 or hi < lo:
            raise ValueError("perturbation magnitudes must be non-negative")


@dataclass
class _Anatomy:
    ct: np.ndarray
    masks: dict = field(default_factory=dict)
    body: np.ndarray | None = None


def _ellipsoid(X, Y, Z, c, r):
    return ((X - c[0]) / r[0]) ** 2 + ((Y - c[1]) / r[1]) ** 2 + ((Z - c[2]) / r[2]) ** 2 <= 1.0


def _ensure_nonempty(mask, X, Y, Z, center):
    if mask.any():
        return mask
    d = (X - center[0]) ** 2 + (Y - center[1]) ** 2 + (Z - center[2]) ** 2
    out = np.zeros_like(mask)
    out[np.unravel_index(np.argmin(d), d.shape)] = True
    return out


def _anatomy(cfg: PhantomConfig, rng: np.random.Generator) -> _Anatomy:
    geo = cfg.geometry
    X, Y, Z = (geo.voxel_centers()[..., a] for a in range(3))
    zlen = cfg.fov_mm[2]
    a = rng.uniform(*cfg.body_a_mm)
    b = rng.uniform(*cfg.body_b_mm)
    # +x patient left, -y anterior, z superior
    body = (X / a) ** 2 + (Y / b) ** 2 <= 1.0
    body &= np.abs(Z) <= 0.48 * zlen
    ct = np.full(geo.dims, HU_AIR)
    ct[body] = HU_WATER

    ls = rng.uniform(*cfg.lung_scale)
    lz = rng.uniform(0.32, 0.4) * zlen
    lungs = {}
    for name, side in (("lung_l", 1.0), ("lung_r", -1.0)):
        c = (side * 0.48 * a + rng.normal(0, 4), -0.05 * b + rng.normal(0, 4), rng.normal(0, 6))
        r = (0.36 * a * ls, 0.62 * b * ls, lz)
        lungs[name] = _ellipsoid(X, Y, Z, c, r) & body

    hr = rng.uniform(*cfg.heart_radius_mm)
    hc = (0.12 * a + rng.normal(0, 5), -0.3 * b + rng.normal(0, 4), -0.25 * lz + rng.normal(0, 6))
    heart = _ellipsoid(X, Y, Z, hc, (hr * 1.1, hr * 0.85, hr)) & body

    cr = max(rng.uniform(*cfg.cord_radius_mm), 0.55 * max(geo.spacing[:2]))
    cc = (rng.normal(0, 3), 0.72 * b)
    cord = ((X - cc[0]) ** 2 + (Y - cc[1]) ** 2 <= cr ** 2) & body

    er = max(rng.uniform(*cfg.esophagus_radius_mm), 0.55 * max(geo.spacing[:2]))
    ec = (cc[0] + rng.normal(0, 4), 0.42 * b)
    eso = ((X - ec[0]) ** 2 + (Y - ec[1]) ** 2 <= er ** 2) & body & (np.abs(Z) <= 1.1 * lz)

    for name in lungs:
        lungs[name] &= ~(heart | cord | eso)
        ct[lungs[name]] = HU_LUNG
    ct[heart] = HU_SOFT
    ct[eso] = HU_SOFT
    ct[cord] = HU_CORD
    cord = _ensure_nonempty(cord, X, Y, Z, (cc[0], cc[1], 0.0))
    eso = _ensure_nonempty(eso, X, Y, Z, (ec[0], ec[1], 0.0))
    masks = {"esophagus": eso, "cord": cord, "heart": heart, **lungs}
    return _Anatomy(ct=ct, masks=masks, body=body)


def _place_ptv(cfg, anat, rng, X, Y, Z):
    """PTV sphere centred inside a random lung, kept clear of the cord."""
    for _ in range(cfg.max_retries):
        side = "lung_l" if rng.random() < 0.5 else "lung_r"
        lung = anat.masks[side]
        if not lung.any():
            continue
        idx = np.argwhere(lung)
        c_idx = idx[rng.integers(len(idx))]
        center = (X[tuple(c_idx)], Y[tuple(c_idx)], Z[tuple(c_idx)])
        r = rng.uniform(*cfg.ptv_radius_mm)
        ptv = _ellipsoid(X, Y, Z, center, (r, r, r * rng.uniform(0.8, 1.2))) & anat.body
        if ptv.sum() < 4 or (ptv & anat.masks["cord"]).any():
            continue
        frac_in_lung = (ptv & lung).sum() / ptv.sum()
        if frac_in_lung < 0.3:
            continue
        return ptv, side
    raise RuntimeError(f"could not place a PTV after {cfg.max_retries} attempts")


def _beams(cfg: PhantomConfig, rng, iso) -> BeamSpec:
    n = int(rng.integers(cfg.beam_count[0], cfg.beam_count[1] + 1))
    start = rng.uniform(0, 360.0 / n)
    angles = [(start + k * 360.0 / n + rng.uniform(-cfg.angle_jitter_deg, cfg.angle_jitter_deg))
              % 360.0 for k in range(n)]
    return BeamSpec(tuple(sorted(angles)), tuple(float(c) for c in iso))


def reference_weights(per_beam, structures: StructureSet, oar_weight: float = 0.5,
                      prescription: float = PRESCRIPTION_GY, body=None,
                      body_weight: float = 2.0) -> np.ndarray:
    """Non-negative beam weights: uniform PTV dose at the prescription, low OAR means.

    With ``body`` given, the mean dose to non-PTV body tissue is penalised too,
    which spreads weight across beams instead of piling it onto two or three.
    """
    ptv = structures["ptv"]
    A = np.stack([b[ptv] for b in per_beam], axis=1)
    rows = [A / np.sqrt(ptv.sum())]
    rhs = [np.full(A.shape[0], prescription) / np.sqrt(ptv.sum())]
    for name in OAR_ORDER:
        if name in structures and structures[name].any():
            m = structures[name]
            rows.append(np.sqrt(oar_weight) * np.array([[b[m].mean() for b in per_beam]]))
            rhs.append(np.zeros(1))
    if body is not None:
        m = np.asarray(body, dtype=bool) & ~ptv
        if m.any():
            rows.append(np.sqrt(body_weight) * np.array([[b[m].mean() for b in per_beam]]))
            rhs.append(np.zeros(1))
    M = np.vstack(rows)
    y = np.concatenate(rhs)
    n = len(per_beam)
    try:
        w, _ = optimize.nnls(M, y)
    except (RuntimeError, ValueError):
        w = np.zeros(n)
    if not np.all(np.isfinite(w)) or w.sum() <= 0 or np.linalg.matrix_rank(M) < n:
        log.warning("beam weight fit is singular; falling back to uniform weights")
        w = np.ones(n)
    return w


def make_reference_plan(geometry: Geometry, per_beam, structures: StructureSet,
                        prescription: float = PRESCRIPTION_GY, body=None,
                        return_components: bool = False):
    """Consistent plan: weighted beam sum renormalised to the prescription PTV mean."""
    w = reference_weights(per_beam, structures, prescription=prescription, body=body)
    comps = [wi * b for wi, b in zip(w, per_beam)]
    dose = Grid3(geometry, np.sum(comps, axis=0))
    dose, scale = normalize_ptv_mean(dose, structures["ptv"], prescription)
    if return_components:
        return dose, scale, [c * scale for c in comps]
    return dose


def perturb_plan(dose: Grid3, ptv, spec: PerturbSpec, case_id: int,
                 components=None, prescription: float = PRESCRIPTION_GY) -> Grid3:
    """Per-case degraded copy of ``dose``.

    ``components`` are per-beam contributions summing to ``dose``; each gets
    its own weight jitter. Without them the whole dose is one component.
    """
    rng = substream(spec.seed, "perturb", case_id)
    comps = [np.asarray(c) for c in components] if components is not None else [dose.values]
    jit = 1.0 + spec.weight_jitter * rng.standard_normal(len(comps))
    jit = np.maximum(jit, 0.0)
    sigma_mm = rng.uniform(*spec.blur_sigma_mm)
    eta = spec.norm_jitter * rng.standard_normal()
    if (spec.weight_jitter == 0 and spec.norm_jitter == 0 and spec.blur_sigma_mm[1] == 0):
        return dose
    values = np.sum([j * c for j, c in zip(jit, comps)], axis=0)
    if sigma_mm > 0:
        sig = [sigma_mm / s for s in dose.geometry.spacing]
        values = ndimage.gaussian_filter(values, sig, mode="nearest")
    out, _ = normalize_ptv_mean(dose.with_values(values), ptv, prescription * (1.0 + eta),
                                case_id=str(case_id))
    return out


def generate_case(cfg: PhantomConfig, index: int,
                  perturb: PerturbSpec | None = None,
                  params: BeamKernelParams = BeamKernelParams()) -> tuple[CaseBundle, Grid3 | None]:
    """Case ``index`` of the phantom set: (bundle with consistent plan, perturbed dose)."""
    rng = substream(cfg.seed, "phantom", index)
    geo = cfg.geometry
    X, Y, Z = (geo.voxel_centers()[..., a] for a in range(3))
    for _ in range(cfg.max_retries):
        anat = _anatomy(cfg, rng)
        if all(m.any() for m in anat.masks.values()):
            break
    else:
        raise RuntimeError(f"case {index}: anatomy sampling failed after {cfg.max_retries} tries")
    ptv, side = _place_ptv(cfg, anat, rng, X, Y, Z)
    ct = anat.ct.copy()
    core = ptv & _ellipsoid(X, Y, Z, [v[ptv].mean() for v in (X, Y, Z)],
                            [0.7 * np.ptp(v[ptv]) / 2 + 1e-6 for v in (X, Y, Z)])
    ct[core] = HU_SOFT
    iso = [float(v[ptv].mean()) for v in (X, Y, Z)]
    beams = _beams(cfg, rng, iso)
    ct_grid = Grid3(geo, ct)
    structures = StructureSet(geo, {"ptv": ptv, **anat.masks})
    per_beam = beam_doses(ct_grid, ptv, beams, params)
    dose, _, comps = make_reference_plan(geo, per_beam, structures, body=anat.body,
                                             return_components=True)
    channel = ct_grid.with_values(combine_beams(per_beam, beams))
    perturbed = None
    if perturb is not None:
        perturbed = perturb_plan(dose, ptv, perturb, index, components=comps)
    case = CaseBundle(ct=ct_grid, structures=structures, beams=beams, reference_dose=dose,
                      case_id=str(index), provenance="consistent", beam_dose=channel,
                      body=anat.body)
    return case, perturbed


def split_indices(n_total: int, n_test: int, seed: int) -> tuple[list[int], list[int]]:
    """Seeded train/test split of case indices ``0..n_total-1``."""
    if not 0 < n_test < n_total:
        raise ValueError("need 0 < n_test < n_total")
    perm = substream(seed, "split").permutation(n_total)
    return sorted(int(i) for i in perm[n_test:]), sorted(int(i) for i in perm[:n_test])


__all__ = ["PhantomConfig", "PerturbSpec", "generate_case", "make_reference_plan",
           "perturb_plan", "reference_weights", "split_indices", "substream", "beam_dose"]
