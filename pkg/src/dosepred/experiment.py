"""Seeded train/test experiments over phantom cases (input variant x plan x loss arms)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .net3d import NetConfig
from .phantom import PerturbSpec, PhantomConfig, generate_case, split_indices
from .pipeline import n_input_channels, preprocess_case, stack_inputs
from .score import dose_score, dvh_score
from .trainer import Sample, TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class PreparedCase:
    case_id: str
    inputs: np.ndarray          # ct_contours_beam stack; the first 7 channels are ct_contours
    targets: dict               # plan tag -> dose array
    structures: dict

    def sample(self, variant: str, plan: str) -> Sample:
        x = self.inputs[:n_input_channels(variant)]
        return Sample(self.case_id, x, self.targets[plan], self.structures)


@dataclass
class Dataset:
    train: list
    test: list


def build_dataset(n_train=40, n_test=10, seed=0, dims=(64, 64, 64), out_dims=(32, 32, 32),
                  crop_dims=None, perturb: PerturbSpec | None = None) -> Dataset:
    """Generate, preprocess and split phantom cases; each keeps both reference plans."""
    cfg = PhantomConfig(seed=seed, dims=tuple(dims))
    perturb = perturb or PerturbSpec(seed=seed + 1)
    cases = []
    for i in range(n_train + n_test):
        case, pert = generate_case(cfg, i, perturb)
        p = preprocess_case(replace(case, extra_doses={"perturbed": pert}), tuple(out_dims), crop_dims)
        masks = {k: m for k, m in p.structures.masks.items() if m.any()}
        cases.append(PreparedCase(p.case_id, stack_inputs(p, "ct_contours_beam"),
                                  {"consistent": p.reference_dose.values,
                                   "perturbed": p.extra_doses["perturbed"].values}, masks))
    tr, te = split_indices(n_train + n_test, n_test, seed)
    return Dataset([cases[i] for i in tr], [cases[i] for i in te])


def evaluate(model, samples) -> dict:
    ds, vs = [], []
    for s in samples:
        pred = model.forward(s.inputs, train=False).astype(np.float64)
        ds.append(dose_score(pred, s.target))
        vs.append(dvh_score(pred, s.target, s.structures))
    return {"dose_score": float(np.mean(ds)), "dvh_score": float(np.mean(vs)),
            "dose_scores": ds, "dvh_scores": vs}


def run_arm(data: Dataset, variant: str, plan: str, loss: str, net: dict, train_cfg: dict,
            seed: int = 0) -> dict:
    """Train on ``plan`` targets and score the test split against consistent plans."""
    samples = [c.sample(variant, plan) for c in data.train]
    test = [c.sample(variant, "consistent") for c in data.test]
    size = samples[0].inputs.shape[1:]
    net_cfg = NetConfig(in_channels=n_input_channels(variant), input_size=size, **net)
    cfg = TrainConfig(loss=loss, plan=plan, variant=variant, seed=seed, **train_cfg)
    model, rows = train(samples, net_cfg, cfg)
    res = evaluate(model, test)
    res["final_train_mae"] = float(np.mean([r["mae"] for r in rows[-len(samples):]]))
    log.info("arm %s/%s/%s: %s", variant, plan, loss,
             {k: v for k, v in res.items() if not isinstance(v, list)})
    return res
