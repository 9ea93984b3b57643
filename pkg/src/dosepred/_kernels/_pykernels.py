"""Pure-numpy versions of the compiled kernels.

Same call signatures as ``_ckernels``; results agree to rounding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def vol2col(xpad, k, s, x0, x1, oy, oz):
    C = xpad.shape[0]
    win = sliding_window_view(xpad, (k, k, k), axis=(1, 2, 3))
    # win: (C, X', Y', Z', k, k, k) -> pick strided output positions
    win = win[:, x0 * s:(x1 - 1) * s + 1:s, 0:(oy - 1) * s + 1:s, 0:(oz - 1) * s + 1:s]
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3))
    return cols.reshape(C * k ** 3, (x1 - x0) * oy * oz)


def col2vol(cols, dxpad, k, s, x0, x1, oy, oz):
    C = dxpad.shape[0]
    c6 = cols.reshape(C, k, k, k, x1 - x0, oy, oz)
    for a in range(k):
        xs = slice(x0 * s + a, (x1 - 1) * s + a + 1, s)
        for b in range(k):
            ys = slice(b, (oy - 1) * s + b + 1, s)
            for d in range(k):
                zs = slice(d, (oz - 1) * s + d + 1, s)
                dxpad[:, xs, ys, zs] += c6[:, a, b, d]


def _up_axis(x, axis):
    n = x.shape[axis]
    lo = np.take(x, np.r_[0, np.arange(n - 1)], axis=axis)
    hi = np.take(x, np.r_[np.arange(1, n), n - 1], axis=axis)
    even = 0.75 * x + 0.25 * lo
    odd = 0.75 * x + 0.25 * hi
    out = np.stack([even, odd], axis=axis + 1)
    shp = list(x.shape)
    shp[axis] = 2 * n
    return out.reshape(shp).astype(x.dtype, copy=False)


def _up_axis_adj(g, axis):
    n = g.shape[axis] // 2
    shp = list(g.shape)
    shp[axis:axis + 1] = [n, 2]
    g2 = g.reshape(shp)
    ge = np.take(g2, 0, axis=axis + 1)
    go = np.take(g2, 1, axis=axis + 1)
    out = 0.75 * (ge + go)
    lead = (slice(None),) * axis
    # even outputs pull from i-1 (clamped), odd from i+1 (clamped)
    out[lead + (slice(0, n - 1),)] += 0.25 * ge[lead + (slice(1, n),)]
    out[lead + (slice(0, 1),)] += 0.25 * ge[lead + (slice(0, 1),)]
    out[lead + (slice(1, n),)] += 0.25 * go[lead + (slice(0, n - 1),)]
    out[lead + (slice(n - 1, n),)] += 0.25 * go[lead + (slice(n - 1, n),)]
    return out.astype(g.dtype, copy=False)


def upsample2x(x):
    for axis in (1, 2, 3):
        x = _up_axis(x, axis)
    return np.ascontiguousarray(x)


def upsample2x_adjoint(g):
    for axis in (3, 2, 1):
        g = _up_axis_adj(g, axis)
    return np.ascontiguousarray(g)


def trilinear_clamped(vol, u):
    """Sample ``vol`` at fractional indices ``u`` (..., 3), clamping to the edge."""
    shape = np.array(vol.shape)
    u = np.clip(u, 0, shape - 1)
    i0 = np.clip(np.floor(u).astype(np.intp), 0, np.maximum(shape - 2, 0))
    i1 = np.minimum(i0 + 1, shape - 1)
    f = u - i0
    out = 0.0
    for cx in (0, 1):
        wx = f[..., 0] if cx else 1 - f[..., 0]
        ix = i1[..., 0] if cx else i0[..., 0]
        for cy in (0, 1):
            wy = f[..., 1] if cy else 1 - f[..., 1]
            iy = i1[..., 1] if cy else i0[..., 1]
            for cz in (0, 1):
                wz = f[..., 2] if cz else 1 - f[..., 2]
                iz = i1[..., 2] if cz else i0[..., 2]
                out = out + wx * wy * wz * vol[ix, iy, iz]
    return out


def radiological_depths(density, spacing, origin, source, points, step, chunk=2048):
    density = np.asarray(density, dtype=np.float64)
    sp = np.asarray(spacing, dtype=np.float64)
    org = np.asarray(origin, dtype=np.float64)
    src = np.asarray(source, dtype=np.float64)
    lo = org - 0.5 * sp
    hi = org + (np.array(density.shape) - 0.5) * sp
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(points))
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        d = p - src
        t0 = np.zeros(len(p))
        t1 = np.ones(len(p))
        with np.errstate(divide="ignore", invalid="ignore"):
            for ax in range(3):
                zero = d[:, ax] == 0
                ta = (lo[ax] - src[ax]) / d[:, ax]
                tb = (hi[ax] - src[ax]) / d[:, ax]
                tmin = np.where(zero, -np.inf, np.minimum(ta, tb))
                tmax = np.where(zero, np.inf, np.maximum(ta, tb))
                if src[ax] < lo[ax] or src[ax] > hi[ax]:
                    tmax = np.where(zero, -np.inf, tmax)
                t0 = np.maximum(t0, tmin)
                t1 = np.minimum(t1, tmax)
        hit = t1 > t0
        if not hit.any():
            continue
        d, t0, t1 = d[hit], t0[hit], t1[hit]
        inside = (t1 - t0) * np.sqrt((d * d).sum(axis=1))
        nsteps = np.maximum(np.ceil(inside / step), 1).astype(np.intp)
        dt = (t1 - t0) / nsteps
        jmax = int(nsteps.max())
        acc = np.zeros(len(d))
        # march all rays of the chunk together; finished rays are masked out
        for j in range(jmax):
            live = j < nsteps
            t = t0 + (j + 0.5) * dt
            q = src + t[:, None] * d
            val = trilinear_clamped(density, (q - org) / sp)
            acc += np.where(live, val, 0.0)
        res = np.zeros(len(p))
        res[hit] = acc * inside / nsteps
        out[start:start + chunk] = res
    return out


def direct_conv(xpad, w, out):
    co, ci, k = w.shape[:3]
    X, Y, Z = out.shape[1:]
    for a in range(k):
        for b in range(k):
            for d in range(k):
                xs = xpad[:, a:a + X, b:b + Y, d:d + Z].reshape(ci, -1)
                out += (w[:, :, a, b, d] @ xs).reshape(out.shape)


def direct_conv_bwd(xpad, w, dy, dxpad, dw):
    co, ci, k = w.shape[:3]
    X, Y, Z = dy.shape[1:]
    dy2 = dy.reshape(co, -1)
    for a in range(k):
        for b in range(k):
            for d in range(k):
                xs = xpad[:, a:a + X, b:b + Y, d:d + Z].reshape(ci, -1)
                dw[:, :, a, b, d] += dy2 @ xs.T
                dxpad[:, a:a + X, b:b + Y, d:d + Z] += (w[:, :, a, b, d].T @ dy2).reshape(ci, X, Y, Z)
