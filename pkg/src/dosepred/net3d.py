"""3D encoder-decoder with hand-written forward and backward passes.

Volumes are ``(channels, x, y, z)`` arrays for a single sample (batch size 1).

Encoder level ``l`` applies a 4x4x4 stride-2 convolution, batch norm (not on
the first level) and a leaky ReLU. Each decoder level upsamples trilinearly by
2, applies a 3x3x3 convolution, batch norm, optional dropout and a ReLU, then
concatenates the matching encoder output. The last layer maps to one channel
at input resolution followed by a ReLU.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels

COL_BUDGET_BYTES = 48 * 2 ** 20
# stride-1 convs with at most this many output channels skip im2col
DIRECT_MAX_COUT = 4


# --------------------------------------------------------------------------
# layer primitives


def _chunk_rows(rows: int, per_x: int, itemsize: int, total: int) -> int:
    return max(1, min(total, COL_BUDGET_BYTES // max(1, rows * per_x * itemsize)))


def conv3d_forward(x, w, b, stride: int, pad: int):
    """Cross-correlation of ``x`` (Cin, X, Y, Z) with ``w`` (Cout, Cin, k, k, k)."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[0] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[0]}")
    xp = np.ascontiguousarray(np.pad(x, ((0, 0),) + ((pad, pad),) * 3))
    ox, oy, oz = ((n + 2 * pad - k) // stride + 1 for n in x.shape[1:])
    if stride == 1 and cout <= DIRECT_MAX_COUT:
        y = np.zeros((cout, ox, oy, oz), dtype=x.dtype)
        _kernels.direct_conv(xp, np.ascontiguousarray(w), y)
        if b is not None:
            y += b.reshape(-1, 1, 1, 1)
        return y
    w2 = w.reshape(cout, -1)
    y = np.empty((cout, ox, oy, oz), dtype=x.dtype)
    step = _chunk_rows(cin * k ** 3, oy * oz, x.itemsize, ox)
    for x0 in range(0, ox, step):
        x1 = min(ox, x0 + step)
        cols = _kernels.vol2col(xp, k, stride, x0, x1, oy, oz)
        y[:, x0:x1] = (w2 @ cols).reshape(cout, x1 - x0, oy, oz)
    if b is not None:
        y += b.reshape(-1, 1, 1, 1)
    return y


def conv3d_backward(dy, x, w, stride: int, pad: int, with_bias: bool):
    """Gradients (dx, dw, db) of a conv3d_forward call."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    xp = np.ascontiguousarray(np.pad(x, ((0, 0),) + ((pad, pad),) * 3))
    dxp = np.zeros_like(xp)
    ox, oy, oz = dy.shape[1:]
    p = pad
    if stride == 1 and cout <= DIRECT_MAX_COUT:
        dw = np.zeros_like(w)
        _kernels.direct_conv_bwd(xp, np.ascontiguousarray(w), np.ascontiguousarray(dy), dxp, dw)
        dx = dxp[:, p:xp.shape[1] - p, p:xp.shape[2] - p, p:xp.shape[3] - p]
        db = dy.sum(axis=(1, 2, 3)) if with_bias else None
        return np.ascontiguousarray(dx), dw, db
    w2 = w.reshape(cout, -1)
    dw2 = np.zeros_like(w2)
    step = _chunk_rows(cin * k ** 3, oy * oz, x.itemsize, ox)
    for x0 in range(0, ox, step):
        x1 = min(ox, x0 + step)
        cols = _kernels.vol2col(xp, k, stride, x0, x1, oy, oz)
        dy2 = np.ascontiguousarray(dy[:, x0:x1]).reshape(cout, -1)
        dw2 += dy2 @ cols.T
        dcols = np.ascontiguousarray(w2.T @ dy2)
        _kernels.col2vol(dcols, dxp, k, stride, x0, x1, oy, oz)
    dx = dxp[:, p:xp.shape[1] - p, p:xp.shape[2] - p, p:xp.shape[3] - p]
    db = dy.sum(axis=(1, 2, 3)) if with_bias else None
    return np.ascontiguousarray(dx), dw2.reshape(w.shape), db


def conv_down_forward(x, w, b=None):
    if any(n % 2 for n in x.shape[1:]):
        raise ValueError(f"downsampling conv needs even spatial dims, got {x.shape[1:]}")
    return conv3d_forward(x, w, b, stride=2, pad=1)


def conv_down_backward(dy, x, w, with_bias=False):
    return conv3d_backward(dy, x, w, stride=2, pad=1, with_bias=with_bias)


def upsample(x):
    return _kernels.upsample2x(np.ascontiguousarray(x))


def upsample_adjoint(g):
    return _kernels.upsample2x_adjoint(np.ascontiguousarray(g))


def upconv_forward(x, w, b=None):
    """Trilinear x2 upsampling then a 3x3x3 stride-1 convolution. Returns (y, upsampled)."""
    u = upsample(x)
    return conv3d_forward(u, w, b, stride=1, pad=1), u


def upconv_backward(dy, u, w, with_bias=False):
    du, dw, db = conv3d_backward(dy, u, w, stride=1, pad=1, with_bias=with_bias)
    return upsample_adjoint(du), dw, db


def batchnorm_forward(x, gamma, beta, eps=1e-5, running=None, momentum=0.1, train=True):
    """Per-channel normalisation over the spatial volume.

    In training mode ``running`` (mean, var) is updated in place.
    Returns ``(y, cache)``.
    """
    c = x.shape[0]
    flat = x.reshape(c, -1)
    if train:
        mu = flat.mean(axis=1)
        var = flat.var(axis=1)
        if running is not None:
            n = flat.shape[1]
            rm, rv = running
            rm *= 1 - momentum
            rm += momentum * mu
            rv *= 1 - momentum
            rv += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (flat - mu[:, None].astype(x.dtype)) * inv[:, None]
    y = gamma[:, None] * xhat + beta[:, None]
    return y.reshape(x.shape), (xhat, inv)


def batchnorm_backward(dy, gamma, cache):
    xhat, inv = cache
    c = dy.shape[0]
    g = dy.reshape(c, -1)
    n = g.shape[1]
    dbeta = g.sum(axis=1)
    dgamma = (g * xhat).sum(axis=1)
    dx = (gamma * inv / n)[:, None] * (n * g - dbeta[:, None] - xhat * dgamma[:, None])
    return dx.reshape(dy.shape), dgamma, dbeta


def leaky_relu_forward(x, slope):
    return np.where(x > 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(dy, x, slope):
    return np.where(x > 0, dy, dy * dy.dtype.type(slope))


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return np.where(x > 0, dy, 0).astype(dy.dtype)


def dropout_mask(shape, rate, rng, dtype):
    if rate <= 0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype(1.0 - rate)


def dropout_forward(x, mask):
    return x if mask is None else x * mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def concat_forward(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=0)


def concat_backward(dy, n_first):
    return dy[:n_first], dy[n_first:]


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 8
    base_width: int = 16
    depth: int = 4
    dropout: float = 0.5
    dropout_levels: int = 3
    leaky_slope: float = 0.2
    input_size: tuple[int, int, int] = (64, 64, 64)
    max_width_mult: int = 8
    output_scale: float = 70.0
    init_std: float = 0.02
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        size = self.input_size
        if isinstance(size, int):
            size = (size,) * 3
        object.__setattr__(self, "input_size", tuple(int(s) for s in size))
        if self.depth < 1 or self.base_width < 1 or self.in_channels < 1:
            raise ValueError("depth, base_width and in_channels must be >= 1")
        if any(s % 2 ** self.depth for s in self.input_size):
            raise ValueError(f"input size {self.input_size} not divisible by 2**{self.depth}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def width(self, level: int) -> int:
        return self.base_width * min(2 ** (level - 1), self.max_width_mult)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)


class UNet3D:
    """Encoder-decoder network with its parameters, batch-norm buffers and tape."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._tape = None
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
        self._build(rng)

    # parameter layout -----------------------------------------------------

    def _conv(self, rng, name, cout, cin, k, bias):
        w = rng.normal(0.0, self.cfg.init_std, size=(cout, cin, k, k, k))
        self.params[f"{name}.w"] = w.astype(self.dtype)
        if bias:
            self.params[f"{name}.b"] = np.zeros(cout, dtype=self.dtype)

    def _bn(self, name, c):
        self.params[f"{name}.gamma"] = np.ones(c, dtype=self.dtype)
        self.params[f"{name}.beta"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)

    def _build(self, rng):
        cfg = self.cfg
        cin = cfg.in_channels
        for level in range(1, cfg.depth + 1):
            w = cfg.width(level)
            self._conv(rng, f"enc{level}", w, cin, 4, bias=(level == 1))
            if level > 1:
                self._bn(f"enc{level}", w)
            cin = w
        for level in range(cfg.depth - 1, 0, -1):
            w = cfg.width(level)
            self._conv(rng, f"dec{level}", w, cin, 3, bias=False)
            self._bn(f"dec{level}", w)
            cin = 2 * w
        self._conv(rng, "final", 1, cin, 3, bias=True)

    def dropout_rate(self, level: int) -> float:
        # decoder levels counted from the bottleneck
        k = self.cfg.depth - 1 - level
        return self.cfg.dropout if k < self.cfg.dropout_levels else 0.0

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # forward / backward ---------------------------------------------------

    def _check_input(self, x):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[0] != cfg.in_channels:
            raise ValueError(f"expected input ({cfg.in_channels}, X, Y, Z), got {x.shape}")
        if tuple(x.shape[1:]) != cfg.input_size:
            raise ValueError(f"expected spatial size {cfg.input_size}, got {x.shape[1:]}")

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None):
        """Predicted dose (X, Y, Z). Training mode records the tape for :meth:`backward`."""
        cfg = self.cfg
        x = np.ascontiguousarray(x, dtype=self.dtype)
        self._check_input(x)
        if train and rng is None:
            rng = np.random.default_rng(0)
        P = self.params
        tape = {} if train else None
        h = x
        skips = []
        for level in range(1, cfg.depth + 1):
            name = f"enc{level}"
            z = conv_down_forward(h, P[f"{name}.w"], P.get(f"{name}.b"))
            rec = {"in": h}
            if level > 1:
                run = (self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"])
                z, rec["bn"] = batchnorm_forward(z, P[f"{name}.gamma"], P[f"{name}.beta"],
                                                 cfg.bn_eps, run, cfg.bn_momentum, train)
            rec["pre"] = z
            h = leaky_relu_forward(z, cfg.leaky_slope)
            skips.append(h)
            if train:
                tape[name] = rec
        for level in range(cfg.depth - 1, 0, -1):
            name = f"dec{level}"
            z, u = upconv_forward(h, P[f"{name}.w"])
            run = (self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"])
            z, bn = batchnorm_forward(z, P[f"{name}.gamma"], P[f"{name}.beta"],
                                      cfg.bn_eps, run, cfg.bn_momentum, train)
            mask = dropout_mask(z.shape, self.dropout_rate(level), rng, self.dtype.type) \
                if train else None
            z = dropout_forward(z, mask)
            a = relu_forward(z)
            h = concat_forward(a, skips[level - 1])
            if train:
                tape[name] = {"u": u, "bn": bn, "mask": mask, "pre": z, "n": a.shape[0]}
        z, u = upconv_forward(h, P["final.w"], P["final.b"])
        out = relu_forward(z[0]) * self.dtype.type(cfg.output_scale)
        if train:
            tape["final"] = {"u": u, "pre": z}
            self._tape = tape
        return out

    def backward(self, dout):
        """Accumulate parameter gradients into ``self.grads`` from d(loss)/d(output)."""
        if self._tape is None:
            raise RuntimeError("backward called without a training-mode forward pass")
        cfg = self.cfg
        tape, self._tape = self._tape, None
        P = self.params
        G = {k: np.zeros_like(v) for k, v in P.items()}
        dout = np.asarray(dout, dtype=self.dtype)
        rec = tape["final"]
        dz = relu_backward(dout * self.dtype.type(cfg.output_scale), rec["pre"][0])[None]
        dh, G["final.w"], G["final.b"] = upconv_backward(dz, rec["u"], P["final.w"], True)
        dskips = {}
        for level in range(1, cfg.depth):
            name = f"dec{level}"
            rec = tape[name]
            da, dskips[level] = concat_backward(dh, rec["n"])
            dz = relu_backward(da, rec["pre"])
            dz = dropout_backward(dz, rec["mask"])
            dz, G[f"{name}.gamma"], G[f"{name}.beta"] = batchnorm_backward(
                dz, P[f"{name}.gamma"], rec["bn"])
            dh, G[f"{name}.w"], _ = upconv_backward(dz, rec["u"], P[f"{name}.w"])
        for level in range(cfg.depth, 0, -1):
            name = f"enc{level}"
            rec = tape[name]
            if level in dskips:
                dh = dh + dskips[level]
            dz = leaky_relu_backward(dh, rec["pre"], cfg.leaky_slope)
            if level > 1:
                dz, G[f"{name}.gamma"], G[f"{name}.beta"] = batchnorm_backward(
                    dz, P[f"{name}.gamma"], rec["bn"])
            has_b = f"{name}.b" in P
            dh, G[f"{name}.w"], db = conv_down_backward(dz, rec["in"], P[f"{name}.w"], has_b)
            if has_b:
                G[f"{name}.b"] = db
        self.grads = G
        return G

    # state ------------------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then batch-norm buffers, in declared layer order."""
        return list(self.params.items()) + list(self.buffers.items())

    def load_state(self, arrays: dict):
        for k in list(self.params) + list(self.buffers):
            tgt = self.params if k in self.params else self.buffers
            src = arrays[k]
            if src.shape != tgt[k].shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {tgt[k].shape}")
            tgt[k] = np.array(src, dtype=self.dtype)


# --------------------------------------------------------------------------
# checkpoint file: JSON header line, then float32 little-endian arrays


def save_checkpoint(path, model: UNet3D, header: dict | None = None,
                    extra: list[tuple[str, np.ndarray]] | None = None) -> None:
    arrays = model.state_arrays() + list(extra or [])
    head = {"net": asdict(model.cfg), **(header or {}),
            "layout": [[k, list(v.shape)] for k, v in arrays]}
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(head, separators=(",", ":"), sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for _, v in arrays:
            fh.write(np.asarray(v, dtype="<f4").tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    head = json.loads(raw[:nl].decode("utf-8"))
    arrays = {}
    off = nl + 1
    for name, shape in head["layout"]:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after declared arrays")
    return head, arrays


def load_model(path) -> tuple[UNet3D, dict]:
    head, arrays = read_checkpoint(path)
    model = UNet3D(NetConfig.from_dict(head["net"]))
    model.load_state(arrays)
    return model, head
