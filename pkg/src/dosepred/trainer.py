"""Adam training loop with a constant-then-linear-decay learning rate."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dvh import DvhConfig, dvh_loss_and_grad, mae_grad, mae_loss, soft_curves
from .net3d import UNet3D, NetConfig, read_checkpoint, save_checkpoint
from .phantom import substream

log = logging.getLogger(__name__)

LOSSES = ("mae", "mae_dvh")


class NumericError(FloatingPointError):
    """Raised when a loss or gradient is not finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    constant_epochs: int = 100
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    loss: str = "mae"
    dvh_weight: float = 10.0
    dvh_beta: float = 1.0
    seed: int = 0
    variant: str = "ct_contours_beam"
    plan: str = "consistent"
    checkpoint_every: int = 50
    val_every: int = 0

    def __post_init__(self):
        if not 0 < self.constant_epochs <= self.epochs:
            raise ValueError("need 0 < constant_epochs <= epochs")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.dvh_weight < 0:
            raise ValueError("dvh_weight must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.constant_epochs:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - cfg.constant_epochs)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One Adam update applied in place to ``params`` and ``state``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


@dataclass
class Sample:
    """One preprocessed training/evaluation case held in memory."""

    case_id: str
    inputs: np.ndarray
    target: np.ndarray
    structures: dict
    real_curves: dict = field(default_factory=dict)


def _check_dataset(samples: Sequence[Sample]):
    if not samples:
        raise ValueError("empty dataset")
    shp = samples[0].inputs.shape
    for s in samples:
        if s.inputs.shape != shp or s.target.shape != shp[1:]:
            raise ValueError(f"case {s.case_id}: shape {s.inputs.shape} differs from {shp}")


def step_loss(pred, sample: Sample, cfg: TrainConfig, dvh_cfg: DvhConfig):
    """(mae, dvh, total, gradient wrt pred) for one sample."""
    p = np.asarray(pred, dtype=np.float64)
    mae = mae_loss(p, sample.target)
    grad = mae_grad(p, sample.target)
    dvh = float("nan")
    if cfg.loss == "mae_dvh":
        dvh, gd = dvh_loss_and_grad(p, sample.target, sample.structures, dvh_cfg,
                                    sample.real_curves or None)
        if cfg.dvh_weight != 0:
            grad = grad + cfg.dvh_weight * gd
        total = mae + cfg.dvh_weight * dvh
    else:
        total = mae
    if not np.isfinite(total) or not np.all(np.isfinite(grad)):
        raise NumericError(f"case {sample.case_id}: non-finite loss {total}")
    return mae, dvh, total, grad


def predict(model: UNet3D, inputs) -> np.ndarray:
    return model.forward(inputs, train=False)


def _ckpt_arrays(adam: AdamState):
    return ([(f"adam.m.{k}", v) for k, v in adam.m.items()]
            + [(f"adam.v.{k}", v) for k, v in adam.v.items()])


def save_training_checkpoint(path, model, adam, cfg, epoch):
    save_checkpoint(path, model, {"epoch": epoch, "seed": cfg.seed, "adam_t": adam.t,
                                  "train": asdict(cfg)}, _ckpt_arrays(adam))


def train(samples: Sequence[Sample], net_cfg: NetConfig, cfg: TrainConfig, out_dir=None,
          resume=None, val_samples: Sequence[Sample] = (), evaluate=None):
    """Train on ``samples``; returns (model, loss rows).

    ``resume`` is a checkpoint path written by this function. ``evaluate``
    (model, val_samples) -> dict is called every ``cfg.val_every`` epochs for
    logging only.
    """
    _check_dataset(samples)
    dvh_cfg = DvhConfig(beta=cfg.dvh_beta)
    if cfg.loss == "mae_dvh":
        for s in samples:
            if not s.real_curves:
                s.real_curves = soft_curves(s.target, s.structures, dvh_cfg)
    model = UNet3D(net_cfg, seed=int(substream(cfg.seed, "init").integers(2 ** 31)))
    adam = AdamState.zeros_like(model.params)
    start = 0
    if resume is not None:
        head, arrays = read_checkpoint(resume)
        model.load_state(arrays)
        for k in model.params:
            adam.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=model.dtype)
            adam.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=model.dtype)
        adam.t = int(head["adam_t"])
        start = int(head["epoch"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    for epoch in range(start, cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = substream(cfg.seed, "shuffle", epoch).permutation(len(samples))
        for step, idx in enumerate(order):
            s = samples[int(idx)]
            pred = model.forward(s.inputs, train=True,
                                 rng=substream(cfg.seed, "dropout", epoch, step))
            mae, dvh, total, grad = step_loss(pred, s, cfg, dvh_cfg)
            model.backward(grad)
            adam_step(model.params, model.grads, adam, lr, cfg)
            rows.append({"epoch": epoch, "case": s.case_id, "mae": mae, "dvh": dvh,
                         "total": total, "lr": lr})
        done = epoch + 1
        if evaluate is not None and cfg.val_every and val_samples and done % cfg.val_every == 0:
            scores = evaluate(model, val_samples)
            log.info("epoch %d validation %s", done, scores)
            rows[-1] = {**rows[-1], **{f"val_{k}": v for k, v in scores.items()}}
        if out is not None and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
            save_training_checkpoint(out / f"ckpt_epoch{done:04d}.bin", model, adam, cfg, done)
    if out is not None:
        write_loss_log(out / "loss_log.csv", rows)
        if rows or start == cfg.epochs:
            save_training_checkpoint(out / "model.bin", model, adam, cfg, cfg.epochs)
    return model, rows


def write_loss_log(path, rows):
    base = ["epoch", "case", "mae", "dvh", "total", "lr"]
    extra = sorted({k for r in rows for k in r} - set(base))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=base + extra)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
