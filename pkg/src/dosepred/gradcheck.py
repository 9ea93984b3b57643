"""Finite-difference and adjoint checks for the analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import net3d
from .dvh import DvhConfig, dvh_loss, dvh_loss_and_grad, mae_grad, mae_loss

FD_STEP_GY = 1e-3
DVH_TOL = 1e-4
NET_TOL = 1e-2
ADJ_TOL = 1e-10


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: error {self.error:.3e} (tol {self.tol:.0e})"


def rel_error(analytic, numeric) -> float:
    """Largest component difference relative to the largest analytic component."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    return float(np.abs(a - n).max() / scale)


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float, idx) -> np.ndarray:
    """Central differences of scalar ``f`` at flat indices ``idx`` of ``x`` (float64, restored)."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        v = flat[i]
        flat[i] = v + h
        fp = f(x)
        flat[i] = v - h
        fm = f(x)
        flat[i] = v
        out[j] = (fp - fm) / (2 * h)
    return out


# -- losses -------------------------------------------------------------------


def random_instance(rng, n=8, n_struct=3):
    """Random dose pair and overlapping structures on an ``n``^3 grid."""
    real = rng.uniform(0, 70, (n, n, n))
    pred = np.clip(real + rng.normal(0, 5, real.shape), 0, 70)
    names = ("ptv", "esophagus", "cord", "heart", "lung_l", "lung_r")[:n_struct]
    structs = {}
    for name in names:
        m = rng.random(real.shape) < 0.3
        m.flat[rng.integers(m.size)] = True
        structs[name] = m
    return pred, real, structs


def check_dvh(n_instances=10, seed=0, n=8, beta=1.0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = DvhConfig(beta=beta)
    worst = 0.0
    for _ in range(n_instances):
        pred, real, structs = random_instance(rng, n)
        _, g = dvh_loss_and_grad(pred, real, structs, cfg)
        idx = np.arange(pred.size)
        fd = central_diff(lambda p: dvh_loss(p, real, structs, cfg), pred, FD_STEP_GY, idx)
        worst = max(worst, rel_error(g.reshape(-1)[idx], fd))
    return CheckResult(f"dvh_loss_grad ({n_instances} x {n}^3, beta={beta})", worst, DVH_TOL)


def check_mae(n_instances=10, seed=1, n=8) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        real = rng.uniform(0, 70, (n, n, n))
        off = rng.uniform(0.01, 3, real.shape) * rng.choice([-1.0, 1.0], real.shape)
        pred = real + off  # every |pred - real| > h, so no sign ties
        g = mae_grad(pred, real)
        fd = central_diff(lambda p: mae_loss(p, real), pred, FD_STEP_GY, np.arange(pred.size))
        worst = max(worst, rel_error(g.reshape(-1), fd))
    return CheckResult(f"mae_grad ({n_instances} x {n}^3)", worst, DVH_TOL)


# -- layers (float64) -------------------------------------------------------------


def _dot(a, b):
    return float(np.dot(np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)))


def check_upsample_adjoint(seed=2) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 5, 6))
    y = rng.normal(size=(3, 8, 10, 12))
    lhs, rhs = _dot(net3d.upsample(x), y), _dot(x, net3d.upsample_adjoint(y))
    return CheckResult("upsample adjoint", abs(lhs - rhs) / max(abs(lhs), 1e-300), ADJ_TOL)


def _layer_check(name, fwd, bwd, shapes, seed, tol=1e-6, h=1e-6, n_probe=40):
    """FD check of every input of ``fwd`` against ``bwd`` using loss = <fwd(*args), R>."""
    rng = np.random.default_rng(seed)
    args = [rng.normal(size=s) for s in shapes]
    R = rng.normal(size=np.shape(fwd(*args)))
    grads = bwd(R, *args)
    worst = 0.0
    for k, (a, g) in enumerate(zip(args, grads)):
        if g is None:
            continue
        idx = rng.choice(a.size, size=min(n_probe, a.size), replace=False)

        def f(_a, k=k):
            return _dot(fwd(*args), R)

        fd = central_diff(f, a, h, idx)
        worst = max(worst, rel_error(np.ravel(g)[idx], fd))
    return CheckResult(name, worst, tol)


def check_conv_down(seed=3) -> CheckResult:
    return _layer_check(
        "conv_down (k4 s2)",
        lambda x, w, b: net3d.conv_down_forward(x, w, b),
        lambda R, x, w, b: net3d.conv_down_backward(R, x, w, True),
        [(2, 6, 4, 8), (3, 2, 4, 4, 4), (3,)], seed)


def check_upconv(seed=4) -> CheckResult:
    def bwd(R, x, w, b):
        _, u = net3d.upconv_forward(x, w, b)
        return net3d.upconv_backward(R, u, w, True)
    return _layer_check("upconv (x2, k3)", lambda x, w, b: net3d.upconv_forward(x, w, b)[0], bwd,
                        [(3, 3, 2, 4), (5, 3, 3, 3, 3), (5,)], seed)


def check_conv_direct(seed=5) -> CheckResult:
    return _layer_check(
        "conv k3 s1 (direct path)",
        lambda x, w: net3d.conv3d_forward(x, w, None, 1, 1),
        lambda R, x, w: net3d.conv3d_backward(R, x, w, 1, 1, False)[:2],
        [(4, 5, 4, 3), (1, 4, 3, 3, 3)], seed)


def check_batchnorm(seed=6) -> CheckResult:
    def fwd(x, g, b):
        return net3d.batchnorm_forward(x, g, b, train=True)[0]

    def bwd(R, x, g, b):
        _, cache = net3d.batchnorm_forward(x, g, b, train=True)
        return net3d.batchnorm_backward(R, g, cache)
    return _layer_check("batchnorm (train)", fwd, bwd, [(3, 4, 3, 5), (3,), (3,)], seed)


def check_activations(seed=7) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    R = rng.normal(size=x.shape)
    worst = 0.0
    for fwd, bwd in ((lambda v: net3d.leaky_relu_forward(v, 0.2),
                      lambda d, v: net3d.leaky_relu_backward(d, v, 0.2)),
                     (net3d.relu_forward, net3d.relu_backward)):
        fd = central_diff(lambda v: _dot(fwd(v), R), x, 1e-6, np.arange(x.size))
        worst = max(worst, rel_error(np.ravel(bwd(R, x)), fd))
    return CheckResult("leaky_relu / relu", worst, 1e-6)


# -- whole network ------------------------------------------------------------------


TINY_NET = dict(in_channels=3, base_width=2, depth=2, input_size=(8, 8, 8), dropout=0.5)


def check_network(dtype="float32", seed=8, n_dirs=3, tol=NET_TOL) -> CheckResult:
    """Directional-derivative check of every parameter gradient with dropout frozen.

    The analytic gradient comes from a ``dtype`` model; the central-difference
    reference (h = 1e-6) is taken on a float64 copy holding the same parameter
    values, so float32 rounding in the reference cannot mask or fake an error.
    The loss is <out, R>.
    """
    cfg = net3d.NetConfig(**TINY_NET, dtype=dtype)
    model = net3d.UNet3D(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    # larger weights than the default init so activations are not all near zero
    for k, p in model.params.items():
        if k.endswith(".w"):
            p[...] = rng.normal(0, 0.3, p.shape).astype(p.dtype)
    x = rng.normal(size=(cfg.in_channels,) + cfg.input_size).astype(dtype)
    R = rng.normal(size=cfg.input_size)

    model.forward(x, train=True, rng=np.random.default_rng(1234))
    G = model.backward(R.astype(dtype))
    ref = net3d.UNet3D(net3d.NetConfig(**TINY_NET, dtype="float64"), seed=seed)
    ref.load_state(dict(model.state_arrays()))
    x64 = x.astype(np.float64)

    def loss():
        return _dot(ref.forward(x64, train=True, rng=np.random.default_rng(1234)), R)

    h = 1e-6
    base = {k: p.copy() for k, p in ref.params.items()}
    worst = 0.0
    for _ in range(n_dirs):
        d = {k: rng.normal(size=p.shape) for k, p in ref.params.items()}
        norm = np.sqrt(sum(float((v ** 2).sum()) for v in d.values()))
        vals = []
        for sgn in (1, -1):
            for k in ref.params:
                ref.params[k][...] = base[k] + sgn * h * d[k] / norm
            vals.append(loss())
        for k in ref.params:
            ref.params[k][...] = base[k]
        fd = (vals[0] - vals[1]) / (2 * h)
        an = sum(_dot(G[k], d[k]) for k in ref.params) / norm
        worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-300))
    return CheckResult(f"network gradient ({dtype}, 8^3, depth 2, width 2)", worst, tol)


SUITES = {
    "dvh": (check_dvh, check_mae),
    "net3d": (check_upsample_adjoint, check_conv_down, check_conv_direct, check_upconv,
              check_batchnorm, check_activations, check_network),
}


def run(module: str = "all", log=print) -> list[CheckResult]:
    if module not in ("all", *SUITES):
        raise ValueError(f"unknown gradcheck module {module!r}")
    mods = list(SUITES) if module == "all" else [module]
    results = []
    for m in mods:
        for fn in SUITES[m]:
            t0 = time.perf_counter()
            r = fn()
            if log is not None:
                log(f"{r.line()} [{time.perf_counter() - t0:.1f}s]")
            results.append(r)
    return results
