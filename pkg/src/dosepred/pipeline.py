"""Raw case -> model-ready case, and model input stacks."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .beamsim import BeamKernelParams, beam_dose
from .volcore import (OAR_ORDER, CaseBundle, Grid3, clip_dose, clip_rescale_ct, crop_resample,
                      normalize_ptv_mean, one_hot, override_ptv_dose, resample)

VARIANTS = ("ct_contours", "ct_contours_beam")


def n_input_channels(variant: str) -> int:
    check_variant(variant)
    return 1 + len(OAR_ORDER) + 1 + (variant == "ct_contours_beam")


def check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown input variant {variant!r}; choose from {VARIANTS}")


def prepare_dose(dose: Grid3, case: CaseBundle, override: bool = True) -> Grid3:
    """Resample to the CT, clip to [0, 70] Gy, scale PTV mean to the prescription, override PTV."""
    if dose.geometry != case.ct.geometry:
        dose = resample(dose, case.ct.geometry)
    dose = clip_dose(dose)
    ptv = case.structures["ptv"]
    dose, _ = normalize_ptv_mean(dose, ptv, case.prescription, case_id=case.case_id)
    if override:
        dose = override_ptv_dose(dose, ptv, case.prescription)
    return dose


def preprocess_case(case: CaseBundle, out_dims, crop_dims=None, override: bool = True,
                    params: BeamKernelParams = BeamKernelParams()) -> CaseBundle:
    """Apply the full input chain to one raw case (HU CT, Gy doses)."""
    beam = case.beam_dose
    if beam is None:
        beam = beam_dose(case.ct, case.structures["ptv"], case.beams, params)
    prepped = replace(
        case,
        ct=clip_rescale_ct(case.ct),
        reference_dose=prepare_dose(case.reference_dose, case, override),
        extra_doses={k: prepare_dose(v, case, override) for k, v in case.extra_doses.items()},
        beam_dose=beam,
    )
    crop = tuple(crop_dims) if crop_dims is not None else case.ct.dims
    return crop_resample(prepped, crop, tuple(out_dims))


def stack_inputs(case: CaseBundle, variant: str, dtype=np.float32) -> np.ndarray:
    """(C, X, Y, Z) network input: CT, OAR channels, PTV and optionally the beam channel."""
    check_variant(variant)
    chans = [case.ct.values[None], one_hot(case.structures, OAR_ORDER, include_ptv=True)]
    if variant == "ct_contours_beam":
        if case.beam_dose is None:
            raise ValueError(f"case {case.case_id}: variant {variant} needs a beam channel")
        chans.append(case.beam_dose.values[None])
    return np.concatenate(chans).astype(dtype)


# prepared case directories: the usual case layout plus ``inputs.npy``


def write_prepared(root, case: CaseBundle, variant: str):
    from .io import write_case

    d = write_case(root, case, meta_extra={"variant": variant, "prepared": True})
    np.save(d / "inputs.npy", stack_inputs(case, variant), allow_pickle=False)
    return d


def load_prepared(case_dir, plan: str, variant: str):
    """Read a prepared case as a training/evaluation :class:`~dosepred.trainer.Sample`."""
    from pathlib import Path

    from .io import read_case, read_json
    from .trainer import Sample

    d = Path(case_dir)
    meta = read_json(d / "meta.json")
    if not meta.get("prepared"):
        raise ValueError(f"{d} is not a preprocessed case (run preprocess first)")
    if meta.get("variant") != variant:
        raise ValueError(f"{d} was prepared for variant {meta.get('variant')!r}, "
                         f"but {variant!r} was requested")
    case = read_case(d, plan)
    x = np.load(d / "inputs.npy", allow_pickle=False)
    masks = {k: m for k, m in case.structures.masks.items() if m.any()}
    return Sample(case.case_id, x, case.reference_dose.values.copy(), masks)
