"""Fast approximate beam dose used as the beam-configuration input channel.

Each beam gets an aperture from the beam's-eye-view projection of the PTV,
dilated by a margin and blurred by a Gaussian penumbra (the fluence). Dose at a
voxel is fluence x depth dose x inverse square, with depth measured
radiologically by fixed-step ray marching through the density volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .volcore import Grid3

AIR_HU = -1000.0


@dataclass(frozen=True)
class BeamSpec:
    angles_deg: tuple[float, ...]
    isocenter: tuple[float, float, float]
    sad: float = 1000.0
    margin: float = 5.0

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles_deg)
        if not 1 <= len(angles) <= 9:
            raise ValueError(f"need 1..9 beams, got {len(angles)}")
        if any(not (0.0 <= a < 360.0) for a in angles):
            raise ValueError(f"gantry angles must lie in [0, 360): {angles}")
        if not self.sad > 0 or self.margin < 0:
            raise ValueError("sad must be positive and margin non-negative")
        object.__setattr__(self, "angles_deg", angles)
        object.__setattr__(self, "isocenter", tuple(float(c) for c in self.isocenter))

    def rotated(self, delta_deg: float) -> "BeamSpec":
        return BeamSpec(tuple((a + delta_deg) % 360.0 for a in self.angles_deg),
                        self.isocenter, self.sad, self.margin)


@dataclass(frozen=True)
class BeamKernelParams:
    mu_eff: float = 0.005
    penumbra_sigma: float = 3.0
    d_max: float = 15.0

    def __post_init__(self):
        if min(self.mu_eff, self.penumbra_sigma, self.d_max) <= 0:
            raise ValueError("beam kernel parameters must all be positive")


def hu_to_density(ct: Grid3) -> Grid3:
    hu = ct.values
    rho = np.where(hu <= 0, (hu + 1000.0) / 1000.0, 1.0 + 0.5 * hu / 1000.0)
    return ct.with_values(np.clip(rho, 0.0, 2.0))


def ray_step(density: Grid3) -> float:
    return min(density.geometry.spacing) / 2.0


def radiological_depth(density: Grid3, source, point) -> float:
    """Density-weighted length (mm) of the segment from ``source`` to ``point``."""
    g = density.geometry
    pts = np.asarray(point, dtype=np.float64).reshape(1, 3)
    out = _kernels.radiological_depths(np.ascontiguousarray(density.values), g.spacing,
                                       g.origin, tuple(map(float, source)), pts,
                                       ray_step(density))
    return float(out[0])


def beam_frame(angle_deg: float, isocenter, sad: float):
    """Source position, central-axis direction and the two lateral BEV axes."""
    t = math.radians(angle_deg)
    direction = np.array([-math.sin(t), math.cos(t), 0.0])
    source = np.asarray(isocenter, dtype=np.float64) - sad * direction
    e_u = np.array([math.cos(t), math.sin(t), 0.0])
    e_v = np.array([0.0, 0.0, 1.0])
    return source, direction, e_u, e_v


def _project(points, source, direction, e_u, e_v, sad):
    r = points - source
    depth = r @ direction
    scale = sad / depth
    return (r @ e_u) * scale, (r @ e_v) * scale, depth


def _fluence_map(u_ptv, v_ptv, margin, sigma, voxel_extent, pixel):
    pad = margin + voxel_extent + 5.0 * sigma + 2 * pixel
    u0, v0 = u_ptv.min() - pad, v_ptv.min() - pad
    nu = int(math.ceil((u_ptv.max() + pad - u0) / pixel)) + 1
    nv = int(math.ceil((v_ptv.max() + pad - v0) / pixel)) + 1
    marks = np.zeros((nu, nv), dtype=bool)
    iu = np.rint((u_ptv - u0) / pixel).astype(np.intp)
    iv = np.rint((v_ptv - v0) / pixel).astype(np.intp)
    marks[iu, iv] = True
    dist = ndimage.distance_transform_edt(~marks) * pixel
    aperture = (dist <= margin + 0.5 * voxel_extent).astype(np.float64)
    fluence = ndimage.gaussian_filter(aperture, sigma / pixel, mode="constant", truncate=4.0)
    return fluence, u0, v0


def single_beam_dose(density: Grid3, ptv: np.ndarray, angle_deg: float, spec: BeamSpec,
                     params: BeamKernelParams) -> np.ndarray:
    """Unnormalised dose of one beam on the density grid."""
    g = density.geometry
    centers = g.voxel_centers().reshape(-1, 3)
    source, direction, e_u, e_v = beam_frame(angle_deg, spec.isocenter, spec.sad)
    u, v, depth = _project(centers, source, direction, e_u, e_v, spec.sad)
    ptv_flat = np.asarray(ptv, dtype=bool).reshape(-1)
    pixel = min(g.spacing) / 2.0
    fluence, u0, v0 = _fluence_map(u[ptv_flat], v[ptv_flat], spec.margin, params.penumbra_sigma,
                                   max(g.spacing), pixel)
    f = ndimage.map_coordinates(fluence, [(u - u0) / pixel, (v - v0) / pixel],
                                order=1, mode="constant", cval=0.0)
    f[depth <= 0] = 0.0
    live = np.flatnonzero(f > 0)
    dose = np.zeros(len(centers))
    if live.size:
        d_rad = _kernels.radiological_depths(np.ascontiguousarray(density.values), g.spacing,
                                             g.origin, tuple(source), centers[live],
                                             ray_step(density))
        dd = np.where(d_rad < params.d_max, d_rad / params.d_max,
                      np.exp(-params.mu_eff * (d_rad - params.d_max)))
        inv_sq = (spec.sad / depth[live]) ** 2
        dose[live] = f[live] * dd * inv_sq
    return dose.reshape(g.dims)


def beam_doses(ct: Grid3, ptv, spec: BeamSpec,
               params: BeamKernelParams = BeamKernelParams()) -> list[np.ndarray]:
    """Per-beam unnormalised doses, in the order of ``spec.angles_deg``."""
    ptv = np.asarray(ptv.values if isinstance(ptv, Grid3) else ptv).astype(bool)
    if not ptv.any():
        raise ValueError("beam dose needs a non-empty PTV")
    density = hu_to_density(ct)
    return [single_beam_dose(density, ptv, a, spec, params) for a in spec.angles_deg]


def beam_dose(ct: Grid3, ptv, spec: BeamSpec,
              params: BeamKernelParams = BeamKernelParams()) -> Grid3:
    """Summed beam dose over all beams, scaled so the maximum is 1."""
    return ct.with_values(combine_beams(beam_doses(ct, ptv, spec, params), spec))


def combine_beams(per_beam, spec: BeamSpec) -> np.ndarray:
    """Sum per-beam doses in gantry-angle order and scale to a maximum of 1."""
    total = np.zeros(np.shape(per_beam[0]))
    for order in np.argsort(spec.angles_deg, kind="stable"):
        total += per_beam[order]
    peak = total.max()
    if not peak > 0:
        raise ValueError("beam dose is zero everywhere; check isocenter and PTV placement")
    return total / peak
