# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: ray casting, clearance, unicycle sweeps, and the
fused quantile Huber loss.

Mirrors ``_kernels_py`` exactly (same operation order), so both backends
agree to rounding.
"""

import numpy as np

from libc.math cimport cos, sin, sqrt, fabs, fmod, fmin, copysign, INFINITY, M_PI

cdef double TWO_PI = 2.0 * M_PI


cdef inline double _wrap(double a) nogil:
    if -M_PI < a <= M_PI:
        return a
    cdef double r = fmod(M_PI - a, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    return M_PI - r


def wrap_angle(double a):
    return _wrap(a)


cdef inline double _ray(double x, double y, double ang, double half,
                        const double[:, ::1] obs) nogil:
    cdef double dx = cos(ang)
    cdef double dy = sin(ang)
    cdef double best = INFINITY
    cdef double t, ox, oy, r, bq, cq, disc, s
    cdef Py_ssize_t k
    if dx > 1e-12:
        t = (half - x) / dx
        if t < best:
            best = t
    elif dx < -1e-12:
        t = (-half - x) / dx
        if t < best:
            best = t
    if dy > 1e-12:
        t = (half - y) / dy
        if t < best:
            best = t
    elif dy < -1e-12:
        t = (-half - y) / dy
        if t < best:
            best = t
    for k in range(obs.shape[0]):
        ox = x - obs[k, 0]
        oy = y - obs[k, 1]
        r = obs[k, 2]
        bq = ox * dx + oy * dy
        cq = ox * ox + oy * oy - r * r
        if cq <= 0.0:
            # origin inside the disc
            return 0.0
        disc = bq * bq - cq
        if disc < 0.0 or bq > 0.0:
            continue
        s = -bq - sqrt(disc)
        if s >= 0.0 and s < best:
            best = s
    if best < 0.0:
        best = 0.0
    return best


def cast_ray(double x, double y, double angle, double half, obstacles):
    cdef const double[:, ::1] obs = np.ascontiguousarray(obstacles, dtype=np.float64).reshape(-1, 3)
    return _ray(x, y, angle, half, obs)


def lidar_scan(double x, double y, double theta, double half, obstacles,
               int n_rays, double max_range):
    cdef const double[:, ::1] obs = np.ascontiguousarray(obstacles, dtype=np.float64).reshape(-1, 3)
    out = np.empty(n_rays)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef double ang, d, step
    step = M_PI / (n_rays - 1) if n_rays > 1 else 0.0
    for i in range(n_rays):
        if n_rays > 1:
            ang = theta - 0.5 * M_PI + i * step
        else:
            ang = theta
        d = _ray(x, y, ang, half, obs)
        if d > max_range:
            d = max_range
        o[i] = d
    return out


cdef inline double _clearance(double x, double y, double half,
                              const double[:, ::1] obs) nogil:
    cdef double best = half - fabs(x)
    cdef double w = half - fabs(y)
    cdef double d, ox, oy
    cdef Py_ssize_t k
    if w < best:
        best = w
    for k in range(obs.shape[0]):
        ox = x - obs[k, 0]
        oy = y - obs[k, 1]
        d = sqrt(ox * ox + oy * oy) - obs[k, 2]
        if d < best:
            best = d
    return best


def min_obstacle_distance(double x, double y, double half, obstacles):
    cdef const double[:, ::1] obs = np.ascontiguousarray(obstacles, dtype=np.float64).reshape(-1, 3)
    return _clearance(x, y, half, obs)


def unicycle_rollout(double x, double y, double theta, double v, double w,
                     double dt, int k):
    out = np.empty((k, 3))
    cdef double[:, ::1] o = out
    cdef double h = dt / k
    cdef Py_ssize_t i
    for i in range(k):
        x = x + v * cos(theta) * h
        y = y + v * sin(theta) * h
        theta = _wrap(theta + w * h)
        o[i, 0] = x
        o[i, 1] = y
        o[i, 2] = theta
    return out


def sweep_min_clearance(double x, double y, double theta, double v, double w,
                        double dt, int k, double half, obstacles):
    """Minimum clearance over the ``k`` sub-step poses of one action."""
    cdef const double[:, ::1] obs = np.ascontiguousarray(obstacles, dtype=np.float64).reshape(-1, 3)
    cdef double h = dt / k
    cdef double best = INFINITY
    cdef double d
    cdef Py_ssize_t i
    for i in range(k):
        x = x + v * cos(theta) * h
        y = y + v * sin(theta) * h
        theta = _wrap(theta + w * h)
        d = _clearance(x, y, half, obs)
        if d < best:
            best = d
    return best


def quantile_huber(pred, target, double kappa):
    """Fused quantile Huber loss over all (batch, i, j) pairs.

    ``pred`` (B, M), ``target`` (B, Mt). Returns ``(loss, dloss/dpred)``
    with the loss averaged over ``B * M * Mt`` terms.
    """
    cdef const double[:, ::1] p = np.ascontiguousarray(pred, dtype=np.float64)
    cdef const double[:, ::1] t = np.ascontiguousarray(target, dtype=np.float64)
    cdef Py_ssize_t B = p.shape[0], M = p.shape[1], Mt = t.shape[1]
    grad = np.empty((B, M))
    cdef double[:, ::1] g = grad
    cdef double norm = 1.0 / (<double>B * M * Mt)
    cdef double inv_k = 1.0 / kappa
    cdef double total = 0.0, row, gi, tau, wgt, d, ad, hq
    cdef Py_ssize_t b, i, j
    with nogil:
        for b in range(B):
            for i in range(M):
                tau = (2.0 * i + 1.0) / (2.0 * M)
                row = 0.0
                gi = 0.0
                for j in range(Mt):
                    d = t[b, j] - p[b, i]
                    ad = fabs(d)
                    hq = fmin(ad, kappa)
                    wgt = tau - (1.0 if d < 0.0 else 0.0)
                    wgt = fabs(wgt)
                    row += wgt * hq * (ad - 0.5 * hq)
                    gi -= wgt * copysign(hq, d)
                total += row
                g[b, i] = gi * inv_k * norm
    return total * inv_k * norm, grad
