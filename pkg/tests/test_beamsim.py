import math

import numpy as np
import pytest

from dosepred.beamsim import (BeamKernelParams, BeamSpec, beam_dose, beam_frame, hu_to_density,
                              radiological_depth, single_beam_dose)
from dosepred.volcore import Geometry, Grid3


def _grid(values, spacing=2.0):
    values = np.asarray(values, dtype=np.float64)
    n = np.array(values.shape)
    origin = tuple(-0.5 * (n - 1) * spacing)
    return Grid3(Geometry(values.shape, (spacing,) * 3, origin), values)


@pytest.mark.parametrize("hu, rho", [(-1000, 0.0), (0, 1.0), (-500, 0.5), (1000, 1.5),
                                     (5000, 2.0), (-2000, 0.0)])
def test_hu_to_density(hu, rho):
    assert hu_to_density(_grid(np.full((1, 1, 1), hu))).values[0, 0, 0] == pytest.approx(rho)


def test_beamspec_validation():
    with pytest.raises(ValueError):
        BeamSpec((), (0, 0, 0))
    with pytest.raises(ValueError):
        BeamSpec(tuple(range(10)), (0, 0, 0))
    with pytest.raises(ValueError):
        BeamSpec((360.0,), (0, 0, 0))
    with pytest.raises(ValueError):
        BeamKernelParams(mu_eff=0)


def test_depth_uniform_and_empty():
    rho = _grid(np.ones((64, 8, 8)))
    d = radiological_depth(rho, (-50.0, 0.0, 0.0), (50.0, 0.0, 0.0))
    assert d == pytest.approx(100.0, rel=0.01)
    assert radiological_depth(_grid(np.zeros((10, 10, 10))), (-5, 0, 0), (5, 0, 0)) == 0.0


def test_depth_outside_volume_is_air():
    rho = _grid(np.ones((10, 10, 10)), spacing=1.0)   # spans [-5, 5] mm
    d = radiological_depth(rho, (-500.0, 0.2, 0.1), (0.0, 0.2, 0.1))
    assert d == pytest.approx(5.0, rel=0.01)


def test_two_layer_slab():
    v = np.ones((60, 8, 8))
    v[:20] = 0.0                                       # x in [-60, -20) mm at 2 mm spacing
    rho = _grid(v)
    d = radiological_depth(rho, (-60.0, 0.0, 0.0), (40.0, 0.0, 0.0))
    assert d == pytest.approx(60.0, rel=0.01)


def test_beam_frame_geometry():
    src, direction, eu, ev = beam_frame(90.0, (1.0, 2.0, 3.0), 1000.0)
    assert np.allclose(direction, (-1, 0, 0), atol=1e-15)
    assert np.allclose(src, (1001.0, 2.0, 3.0))
    assert abs(direction @ eu) < 1e-15 and abs(direction @ ev) < 1e-15


def test_beam_dose_normalised_and_tail():
    ct = _grid(np.zeros((32, 32, 32)))
    ptv = np.zeros(ct.dims, bool)
    ptv[14:18, 14:18, 14:18] = True
    spec = BeamSpec((0.0,), (0.0, 0.0, 0.0))
    params = BeamKernelParams()
    out = beam_dose(ct, ptv, spec, params)
    assert out.values.max() == 1.0
    # beam 0 travels along +y, lateral axis x; aperture half-width ~ 4 + 5 + 1 mm
    x = ct.geometry.axis_coords(0)
    far = np.abs(x) > 4.0 + spec.margin + 1.0 + 5 * params.penumbra_sigma
    assert out.values[far].max() < 1e-4


def test_beam_dose_empty_ptv():
    ct = _grid(np.zeros((8, 8, 8)))
    with pytest.raises(ValueError):
        beam_dose(ct, np.zeros(ct.dims, bool), BeamSpec((0.0,), (0, 0, 0)))


def test_depth_falloff_monotone():
    ct = _grid(np.zeros((48, 48, 16)))
    ptv = np.zeros(ct.dims, bool)
    ptv[20:28, 20:28, 6:10] = True
    d = single_beam_dose(hu_to_density(ct), ptv, 0.0, BeamSpec((0.0,), (0, 0, 0)),
                         BeamKernelParams())
    axis = d[23, :, 8]            # along +y, the beam direction
    depth = ct.geometry.axis_coords(1) + 48.0
    past = depth > 20.0
    assert np.all(np.diff(axis[past]) < 0)


def test_beam_dose_deterministic(small_case):
    case, _ = small_case
    a = beam_dose(case.ct, case.structures["ptv"], case.beams)
    b = beam_dose(case.ct, case.structures["ptv"], case.beams)
    assert np.array_equal(a.values, b.values)
    assert np.allclose(a.values, case.beam_dose.values, rtol=0, atol=1e-12)
