import numpy as np
import pytest

from dosepred.pipeline import (load_prepared, n_input_channels, preprocess_case, stack_inputs,
                               write_prepared)


def test_channels():
    assert n_input_channels("ct_contours") == 7
    assert n_input_channels("ct_contours_beam") == 8
    with pytest.raises(ValueError):
        n_input_channels("ct")


def test_preprocess_and_stack(small_case):
    case, _ = small_case
    p = preprocess_case(case, (16, 16, 16))
    assert p.ct.dims == (16, 16, 16)
    assert 0.0 <= p.ct.values.min() and p.ct.values.max() <= 1.0
    assert p.reference_dose.values.max() <= 70.0 and p.reference_dose.values.min() >= 0
    x = stack_inputs(p, "ct_contours_beam")
    assert x.shape == (8, 16, 16, 16) and x.dtype == np.float32
    assert np.array_equal(x[:7], stack_inputs(p, "ct_contours"))
    assert np.array_equal(x[6], p.structures["ptv"].astype(np.float32))
    full = preprocess_case(case, case.ct.dims)
    assert np.all(full.reference_dose.values[full.structures["ptv"]] == 60.0)


def test_prepared_roundtrip(tmp_path, small_case):
    case, pert = small_case
    from dataclasses import replace
    p = preprocess_case(replace(case, extra_doses={"perturbed": pert}), (16, 16, 16))
    d = write_prepared(tmp_path, p, "ct_contours")
    s = load_prepared(d, "perturbed", "ct_contours")
    assert s.inputs.shape == (7, 16, 16, 16)
    assert np.allclose(s.target, p.extra_doses["perturbed"].values, atol=1e-4)
    with pytest.raises(ValueError, match="variant"):
        load_prepared(d, "consistent", "ct_contours_beam")
