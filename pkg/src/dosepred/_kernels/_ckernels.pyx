# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Signatures and results mirror ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from cython.parallel cimport prange
from libc.math cimport ceil, floor, sqrt

cnp.import_array()


def vol2col(const floating[:, :, :, ::1] xpad, int k, int s,
            int x0, int x1, int oy, int oz):
    cdef Py_ssize_t C = xpad.shape[0]
    cdef Py_ssize_t ncol = (x1 - x0) * oy * oz
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((C * k * k * k, ncol), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t c, a, b, d, row, ix, iy, iz, col, bx, by
    for c in prange(C, nogil=True, schedule="static"):
        for a in range(k):
            for b in range(k):
                for d in range(k):
                    row = ((c * k + a) * k + b) * k + d
                    col = 0
                    for ix in range(x0, x1):
                        bx = ix * s + a
                        for iy in range(oy):
                            by = iy * s + b
                            for iz in range(oz):
                                cols[row, col] = xpad[c, bx, by, iz * s + d]
                                col = col + 1
    return out


def col2vol(const floating[:, ::1] cols, floating[:, :, :, ::1] dxpad, int k, int s,
            int x0, int x1, int oy, int oz):
    cdef Py_ssize_t C = dxpad.shape[0]
    cdef Py_ssize_t c, a, b, d, row, ix, iy, iz, col, bx, by
    # one channel per thread: accumulation order within a channel is fixed
    for c in prange(C, nogil=True, schedule="static"):
        for a in range(k):
            for b in range(k):
                for d in range(k):
                    row = ((c * k + a) * k + b) * k + d
                    col = 0
                    for ix in range(x0, x1):
                        bx = ix * s + a
                        for iy in range(oy):
                            by = iy * s + b
                            for iz in range(oz):
                                dxpad[c, bx, by, iz * s + d] += cols[row, col]
                                col = col + 1


def _up_axis(const floating[:, :, ::1] x, floating[:, :, ::1] out):
    # x: (outer, n, inner) -> out: (outer, 2n, inner)
    cdef Py_ssize_t A = x.shape[0], n = x.shape[1], B = x.shape[2]
    cdef Py_ssize_t a, i, b, im, ip
    with nogil:
        for a in range(A):
            for i in range(n):
                im = i - 1 if i > 0 else 0
                ip = i + 1 if i < n - 1 else n - 1
                for b in range(B):
                    out[a, 2 * i, b] = 0.75 * x[a, i, b] + 0.25 * x[a, im, b]
                    out[a, 2 * i + 1, b] = 0.75 * x[a, i, b] + 0.25 * x[a, ip, b]


def _up_axis_adj(const floating[:, :, ::1] g, floating[:, :, ::1] out):
    # g: (outer, 2n, inner) -> out: (outer, n, inner), out zeroed by caller
    cdef Py_ssize_t A = out.shape[0], n = out.shape[1], B = out.shape[2]
    cdef Py_ssize_t a, i, b, im, ip
    with nogil:
        for a in range(A):
            for i in range(n):
                im = i - 1 if i > 0 else 0
                ip = i + 1 if i < n - 1 else n - 1
                for b in range(B):
                    out[a, i, b] += 0.75 * (g[a, 2 * i, b] + g[a, 2 * i + 1, b])
                    out[a, im, b] += 0.25 * g[a, 2 * i, b]
                    out[a, ip, b] += 0.25 * g[a, 2 * i + 1, b]


def _as3(arr, int axis):
    shp = arr.shape
    outer = int(np.prod(shp[:axis]))
    inner = int(np.prod(shp[axis + 1:]))
    return arr.reshape(outer, shp[axis], inner)


def upsample2x(x):
    x = np.ascontiguousarray(x)
    for axis in (1, 2, 3):
        shp = list(x.shape)
        shp[axis] *= 2
        out = np.empty(shp, dtype=x.dtype)
        _up_axis(_as3(x, axis), _as3(out, axis))
        x = out
    return x


def upsample2x_adjoint(g):
    g = np.ascontiguousarray(g)
    for axis in (3, 2, 1):
        shp = list(g.shape)
        shp[axis] //= 2
        out = np.zeros(shp, dtype=g.dtype)
        _up_axis_adj(_as3(g, axis), _as3(out, axis))
        g = out
    return g


cdef inline double _trilinear(const double[:, :, ::1] vol, double ux, double uy, double uz) noexcept nogil:
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    cdef Py_ssize_t i, j, l, i1, j1, l1
    cdef double fx, fy, fz
    if ux < 0: ux = 0
    if uy < 0: uy = 0
    if uz < 0: uz = 0
    if ux > nx - 1: ux = nx - 1
    if uy > ny - 1: uy = ny - 1
    if uz > nz - 1: uz = nz - 1
    i = <Py_ssize_t>floor(ux)
    j = <Py_ssize_t>floor(uy)
    l = <Py_ssize_t>floor(uz)
    if i > nx - 2: i = nx - 2
    if j > ny - 2: j = ny - 2
    if l > nz - 2: l = nz - 2
    if i < 0: i = 0
    if j < 0: j = 0
    if l < 0: l = 0
    i1 = i + 1 if nx > 1 else 0
    j1 = j + 1 if ny > 1 else 0
    l1 = l + 1 if nz > 1 else 0
    fx = ux - i
    fy = uy - j
    fz = uz - l
    return ((1 - fx) * ((1 - fy) * ((1 - fz) * vol[i, j, l] + fz * vol[i, j, l1])
                        + fy * ((1 - fz) * vol[i, j1, l] + fz * vol[i, j1, l1]))
            + fx * ((1 - fy) * ((1 - fz) * vol[i1, j, l] + fz * vol[i1, j, l1])
                    + fy * ((1 - fz) * vol[i1, j1, l] + fz * vol[i1, j1, l1])))


cdef inline double _ray(const double[:, :, ::1] density, const double* sp, const double* org,
                        const double* src, const double* lo, const double* hi,
                        double px, double py, double pz, double step) noexcept nogil:
    cdef double d[3]
    cdef double t0 = 0.0, t1 = 1.0, ta, tb, tmp, length, inside, dt, t, acc = 0.0
    cdef Py_ssize_t ax, j, nsteps
    d[0] = px - src[0]
    d[1] = py - src[1]
    d[2] = pz - src[2]
    for ax in range(3):
        if d[ax] == 0:
            if src[ax] < lo[ax] or src[ax] > hi[ax]:
                return 0.0
        else:
            ta = (lo[ax] - src[ax]) / d[ax]
            tb = (hi[ax] - src[ax]) / d[ax]
            if ta > tb:
                tmp = ta
                ta = tb
                tb = tmp
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t1 <= t0:
        return 0.0
    length = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    inside = (t1 - t0) * length
    nsteps = <Py_ssize_t>ceil(inside / step)
    if nsteps < 1:
        nsteps = 1
    dt = (t1 - t0) / nsteps
    for j in range(nsteps):
        t = t0 + (j + 0.5) * dt
        acc += _trilinear(density,
                          (src[0] + t * d[0] - org[0]) / sp[0],
                          (src[1] + t * d[1] - org[1]) / sp[1],
                          (src[2] + t * d[2] - org[2]) / sp[2])
    return acc * inside / nsteps


def radiological_depths(const double[:, :, ::1] density, spacing, origin, source,
                        const double[:, ::1] points, double step):
    cdef double sp[3]
    cdef double org[3]
    cdef double src[3]
    cdef double lo[3]
    cdef double hi[3]
    cdef Py_ssize_t ax, p
    for ax in range(3):
        sp[ax] = spacing[ax]
        org[ax] = origin[ax]
        src[ax] = source[ax]
        lo[ax] = org[ax] - 0.5 * sp[ax]
        hi[ax] = org[ax] + (density.shape[ax] - 0.5) * sp[ax]
    out = np.zeros(points.shape[0], dtype=np.float64)
    cdef double[::1] res = out
    for p in prange(points.shape[0], nogil=True, schedule="static"):
        res[p] = _ray(density, sp, org, src, lo, hi,
                      points[p, 0], points[p, 1], points[p, 2], step)
    return out


def direct_conv(const floating[:, :, :, ::1] xpad, const floating[:, :, :, :, ::1] w,
                floating[:, :, :, ::1] out):
    """Stride-1 correlation accumulated into ``out`` (Cout, X, Y, Z); for narrow Cout."""
    cdef Py_ssize_t co = w.shape[0], ci = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t X = out.shape[1], Y = out.shape[2], Z = out.shape[3]
    cdef Py_ssize_t o, c, a, b, d, x, y, z
    cdef floating wv
    with nogil:
        for o in range(co):
            for c in range(ci):
                for a in range(k):
                    for b in range(k):
                        for d in range(k):
                            wv = w[o, c, a, b, d]
                            for x in range(X):
                                for y in range(Y):
                                    for z in range(Z):
                                        out[o, x, y, z] += wv * xpad[c, x + a, y + b, z + d]


def direct_conv_bwd(const floating[:, :, :, ::1] xpad, const floating[:, :, :, :, ::1] w,
                    const floating[:, :, :, ::1] dy, floating[:, :, :, ::1] dxpad,
                    floating[:, :, :, :, ::1] dw):
    """Input and weight gradients of :func:`direct_conv`, accumulated in place."""
    cdef Py_ssize_t co = w.shape[0], ci = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t X = dy.shape[1], Y = dy.shape[2], Z = dy.shape[3]
    cdef Py_ssize_t o, c, a, b, d, x, y, z
    cdef floating wv
    cdef double acc
    with nogil:
        for o in range(co):
            for c in range(ci):
                for a in range(k):
                    for b in range(k):
                        for d in range(k):
                            wv = w[o, c, a, b, d]
                            acc = 0.0
                            for x in range(X):
                                for y in range(Y):
                                    for z in range(Z):
                                        dxpad[c, x + a, y + b, z + d] += wv * dy[o, x, y, z]
                                        acc = acc + dy[o, x, y, z] * xpad[c, x + a, y + b, z + d]
                            dw[o, c, a, b, d] += acc
