"""Volumes with geometry, trilinear resampling and the input preprocessing chain.

Arrays are indexed ``[x, y, z]``. Voxel ``(i, j, k)`` has its center at
``origin + (i, j, k) * spacing`` in mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .beamsim import BeamSpec

CT_MIN_HU = -1000.0
CT_MAX_HU = 3071.0
PRESCRIPTION_GY = 60.0
STRUCTURE_NAMES = ("ptv", "esophagus", "cord", "heart", "lung_l", "lung_r")
OAR_ORDER = ("esophagus", "cord", "heart", "lung_l", "lung_r")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise GeometryError("dims, spacing and origin need three entries each")
        if min(dims) < 1:
            raise GeometryError(f"dims must be >= 1 on every axis, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise GeometryError(f"spacing must be positive, got {spacing}")
        if not all(math.isfinite(o) for o in origin):
            raise GeometryError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers in mm, shape (nx, ny, nz, 3)."""
        xs, ys, zs = (self.axis_coords(a) for a in range(3))
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class Grid3:
    """A scalar field on a :class:`Geometry`. Values are float64, shape ``dims``."""

    geometry: Geometry
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != self.geometry.dims:
            if v.size != self.geometry.size:
                raise GeometryError(
                    f"values have {v.size} entries, geometry needs {self.geometry.size}")
            v = v.reshape(self.geometry.dims, order="F")
        bad = ~np.isfinite(v)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValueError(f"non-finite voxel value at index {idx}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dims(self):
        return self.geometry.dims

    def with_values(self, values) -> "Grid3":
        return Grid3(self.geometry, values)

    def same_geometry(self, other: "Grid3 | Geometry") -> bool:
        g = other.geometry if isinstance(other, Grid3) else other
        return g == self.geometry


def _check_same(a: Geometry, b: Geometry, what: str = "volumes"):
    if a != b:
        raise GeometryError(f"geometry mismatch between {what}: {a} vs {b}")


@dataclass(frozen=True)
class StructureSet:
    geometry: Geometry
    masks: Mapping[str, np.ndarray]

    def __post_init__(self):
        clean = {}
        for name, m in self.masks.items():
            if name not in STRUCTURE_NAMES:
                raise ValueError(f"unknown structure name {name!r}")
            arr = np.asarray(m.values if isinstance(m, Grid3) else m)
            if isinstance(m, Grid3):
                _check_same(m.geometry, self.geometry, f"mask {name} and structure set")
            if arr.shape != self.geometry.dims:
                raise GeometryError(f"mask {name} has shape {arr.shape}, expected {self.geometry.dims}")
            if not np.isin(arr, (0, 1)).all():
                raise ValueError(f"mask {name} is not binary")
            b = arr.astype(bool)
            b.setflags(write=False)
            clean[name] = b
        if "ptv" not in clean or not clean["ptv"].any():
            raise ValueError("structure set needs a non-empty 'ptv' mask")
        object.__setattr__(self, "masks", dict(clean))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.masks[name]
        except KeyError:
            raise KeyError(f"structure {name!r} not present") from None

    def __contains__(self, name) -> bool:
        return name in self.masks

    @property
    def names(self) -> list[str]:
        return [n for n in STRUCTURE_NAMES if n in self.masks]

    def grid(self, name: str) -> Grid3:
        return Grid3(self.geometry, self[name].astype(np.float64))

    def union(self) -> np.ndarray:
        out = np.zeros(self.geometry.dims, dtype=bool)
        for m in self.masks.values():
            out |= m
        return out


@dataclass(frozen=True)
class CaseBundle:
    ct: Grid3
    structures: StructureSet
    beams: "BeamSpec"
    reference_dose: Grid3
    case_id: str = "0"
    provenance: str = "consistent"
    prescription: float = PRESCRIPTION_GY
    beam_dose: Grid3 | None = None
    extra_doses: Mapping[str, Grid3] = field(default_factory=dict)
    body: np.ndarray | None = None

    def __post_init__(self):
        if self.provenance not in ("consistent", "perturbed"):
            raise ValueError(f"provenance must be 'consistent' or 'perturbed', got {self.provenance!r}")
        if not self.prescription > 0:
            raise ValueError("prescription must be positive")
        _check_same(self.ct.geometry, self.structures.geometry, "ct and structures")
        _check_same(self.ct.geometry, self.reference_dose.geometry, "ct and reference dose")
        if self.beam_dose is not None:
            _check_same(self.ct.geometry, self.beam_dose.geometry, "ct and beam channel")
        for k, g in self.extra_doses.items():
            _check_same(self.ct.geometry, g.geometry, f"ct and dose {k}")
        if self.body is not None and np.shape(self.body) != self.ct.dims:
            raise GeometryError("body mask shape does not match ct")


# --------------------------------------------------------------------------
# preprocessing rules


def clip_rescale_ct(ct: Grid3) -> Grid3:
    v = ct.values
    bad = ~np.isfinite(v)
    if bad.any():
        raise ValueError(f"non-finite CT voxel at index {tuple(np.argwhere(bad)[0])}")
    return ct.with_values((np.clip(v, CT_MIN_HU, CT_MAX_HU) - CT_MIN_HU) / (CT_MAX_HU - CT_MIN_HU))


def clip_dose(dose: Grid3, lo: float = 0.0, hi: float = 70.0) -> Grid3:
    if not hi > lo:
        raise ValueError(f"clip_dose needs hi > lo, got lo={lo}, hi={hi}")
    return dose.with_values(np.clip(dose.values, lo, hi))


def _mask_array(mask, geometry: Geometry) -> np.ndarray:
    if isinstance(mask, Grid3):
        _check_same(mask.geometry, geometry, "mask and dose")
        mask = mask.values
    m = np.asarray(mask).astype(bool)
    if m.shape != geometry.dims:
        raise GeometryError(f"mask shape {m.shape} does not match dose dims {geometry.dims}")
    return m


def normalize_ptv_mean(dose: Grid3, ptv, prescription: float = PRESCRIPTION_GY,
                       case_id: str = "?") -> tuple[Grid3, float]:
    """Scale ``dose`` so the mean inside ``ptv`` equals ``prescription``."""
    m = _mask_array(ptv, dose.geometry)
    if not m.any():
        raise ValueError(f"case {case_id}: PTV mask is empty")
    mean = float(dose.values[m].mean())
    if not mean > 0:
        raise ValueError(f"case {case_id}: mean PTV dose is {mean}, cannot normalize")
    scale = prescription / mean
    return dose.with_values(dose.values * scale), scale


def override_ptv_dose(dose: Grid3, ptv, prescription: float = PRESCRIPTION_GY) -> Grid3:
    m = _mask_array(ptv, dose.geometry)
    return dose.with_values(np.where(m, prescription, dose.values))


def _interp_axis(values: np.ndarray, axis: int, u: np.ndarray) -> np.ndarray:
    """Linear interpolation along one axis at fractional indices ``u`` (clamp-to-edge)."""
    n = values.shape[axis]
    u = np.clip(u, 0.0, n - 1)
    if n == 1:
        return np.repeat(values, len(u), axis=axis)
    i0 = np.minimum(np.floor(u).astype(np.intp), n - 2)
    f = u - i0
    shape = [1, 1, 1]
    shape[axis] = len(u)
    f = f.reshape(shape)
    a = np.take(values, i0, axis=axis)
    b = np.take(values, i0 + 1, axis=axis)
    return a * (1.0 - f) + b * f


def resample(src: Grid3, target: Geometry) -> Grid3:
    """Trilinear resampling onto ``target`` voxel centers, clamped at the borders."""
    if not isinstance(target, Geometry):
        raise TypeError("target must be a Geometry")
    v = src.values
    g = src.geometry
    for axis in range(3):
        u = ((target.origin[axis] - g.origin[axis]) / g.spacing[axis]
             + np.arange(target.dims[axis]) * (target.spacing[axis] / g.spacing[axis]))
        v = _interp_axis(v, axis, u)
    return Grid3(target, v)


def one_hot(structures: StructureSet, order: Sequence[str] = OAR_ORDER,
            include_ptv: bool = True) -> np.ndarray:
    """Per-structure binary channels (OARs in ``order``, then PTV). Shape (C, nx, ny, nz)."""
    names = list(order) + (["ptv"] if include_ptv else [])
    chans = []
    for name in names:
        if name not in structures:
            raise KeyError(f"structure {name!r} missing from structure set")
        chans.append(structures[name].astype(np.float64))
    return np.stack(chans)


# --------------------------------------------------------------------------
# crop and resample


def crop_window(union: np.ndarray, crop_dims: Sequence[int]) -> tuple[tuple[int, int], ...]:
    """Inclusive (start, stop) per axis of a window centred on the mask union bounding box."""
    dims = union.shape
    if not union.any():
        raise ValueError("cannot place crop window: all masks are empty")
    idx = np.argwhere(union)
    lo, hi = idx.min(axis=0), idx.max(axis=0)
    overflow = {}
    window = []
    for ax in range(3):
        c = int(crop_dims[ax])
        if c > dims[ax]:
            raise ValueError(f"crop dims {tuple(crop_dims)} exceed volume dims {dims} on axis {ax}")
        extent = int(hi[ax] - lo[ax] + 1)
        if extent > c:
            overflow["xyz"[ax]] = extent - c
        center = 0.5 * (lo[ax] + hi[ax])
        start = int(math.floor(center - c / 2 + 0.5))
        start = min(max(start, 0), dims[ax] - c)
        window.append((start, start + c - 1))
    if overflow:
        raise ValueError(f"mask union does not fit crop window; overflow voxels per axis: {overflow}")
    return tuple(window)


def _crop(grid: Grid3, window) -> Grid3:
    sl = tuple(slice(a, b + 1) for a, b in window)
    g = grid.geometry
    origin = tuple(g.origin[ax] + window[ax][0] * g.spacing[ax] for ax in range(3))
    geo = Geometry(tuple(b - a + 1 for a, b in window), g.spacing, origin)
    return Grid3(geo, grid.values[sl])


def output_geometry(crop_geo: Geometry, out_dims: Sequence[int]) -> Geometry:
    """Geometry covering the same physical extent as ``crop_geo`` with ``out_dims`` voxels."""
    out_dims = tuple(int(d) for d in out_dims)
    if min(out_dims) < 1:
        raise GeometryError(f"degenerate output dims {out_dims}")
    spacing = tuple(crop_geo.dims[a] * crop_geo.spacing[a] / out_dims[a] for a in range(3))
    origin = tuple(crop_geo.origin[a] - 0.5 * crop_geo.spacing[a] + 0.5 * spacing[a]
                   for a in range(3))
    return Geometry(out_dims, spacing, origin)


def crop_resample(case: CaseBundle, crop_dims: Sequence[int], out_dims: Sequence[int]) -> CaseBundle:
    window = crop_window(case.structures.union(), crop_dims)

    def prep(grid: Grid3, target: Geometry | None) -> Grid3:
        c = _crop(grid, window)
        return c if target is None else resample(c, target)

    crop_geo = _crop(case.ct, window).geometry
    target = None if tuple(out_dims) == tuple(int(c) for c in crop_dims) \
        else output_geometry(crop_geo, out_dims)
    new_geo = crop_geo if target is None else target
    masks = {}
    for name, m in case.structures.masks.items():
        r = prep(Grid3(case.ct.geometry, m.astype(np.float64)), target)
        masks[name] = r.values >= 0.5
    return replace(
        case,
        ct=prep(case.ct, target),
        structures=StructureSet(new_geo, masks),
        reference_dose=prep(case.reference_dose, target),
        beam_dose=None if case.beam_dose is None else prep(case.beam_dose, target),
        extra_doses={k: prep(v, target) for k, v in case.extra_doses.items()},
        body=None if case.body is None
        else prep(Grid3(case.ct.geometry, case.body.astype(np.float64)), target).values >= 0.5,
    )
