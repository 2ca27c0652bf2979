"""Pure-Python geometry kernels, used when the compiled extension is absent."""

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    if -math.pi < a <= math.pi:
        return a
    r = math.fmod(math.pi - a, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    return math.pi - r


def _as_obs(obstacles):
    return np.ascontiguousarray(obstacles, dtype=np.float64).reshape(-1, 3).tolist()


def _ray(x, y, ang, half, obs):
    dx = math.cos(ang)
    dy = math.sin(ang)
    best = math.inf
    if dx > 1e-12:
        best = min(best, (half - x) / dx)
    elif dx < -1e-12:
        best = min(best, (-half - x) / dx)
    if dy > 1e-12:
        best = min(best, (half - y) / dy)
    elif dy < -1e-12:
        best = min(best, (-half - y) / dy)
    for cx, cy, r in obs:
        ox = x - cx
        oy = y - cy
        bq = ox * dx + oy * dy
        cq = ox * ox + oy * oy - r * r
        if cq <= 0.0:
            return 0.0
        disc = bq * bq - cq
        if disc < 0.0 or bq > 0.0:
            continue
        s = -bq - math.sqrt(disc)
        if 0.0 <= s < best:
            best = s
    return max(best, 0.0)


def cast_ray(x, y, angle, half, obstacles):
    return _ray(x, y, angle, half, _as_obs(obstacles))


def lidar_scan(x, y, theta, half, obstacles, n_rays, max_range):
    obs = _as_obs(obstacles)
    out = np.empty(n_rays)
    step = math.pi / (n_rays - 1) if n_rays > 1 else 0.0
    for i in range(n_rays):
        ang = theta - 0.5 * math.pi + i * step if n_rays > 1 else theta
        out[i] = min(_ray(x, y, ang, half, obs), max_range)
    return out


def _clearance(x, y, half, obs):
    best = min(half - abs(x), half - abs(y))
    for cx, cy, r in obs:
        ox = x - cx
        oy = y - cy
        d = math.sqrt(ox * ox + oy * oy) - r
        if d < best:
            best = d
    return best


def min_obstacle_distance(x, y, half, obstacles):
    return _clearance(x, y, half, _as_obs(obstacles))


def unicycle_rollout(x, y, theta, v, w, dt, k):
    out = np.empty((k, 3))
    h = dt / k
    for i in range(k):
        x = x + v * math.cos(theta) * h
        y = y + v * math.sin(theta) * h
        theta = wrap_angle(theta + w * h)
        out[i] = (x, y, theta)
    return out


def sweep_min_clearance(x, y, theta, v, w, dt, k, half, obstacles):
    obs = _as_obs(obstacles)
    h = dt / k
    best = math.inf
    for _ in range(k):
        x = x + v * math.cos(theta) * h
        y = y + v * math.sin(theta) * h
        theta = wrap_angle(theta + w * h)
        best = min(best, _clearance(x, y, half, obs))
    return best


def quantile_huber(pred, target, kappa):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    B, M = pred.shape
    Mt = target.shape[1]
    tau = ((2.0 * np.arange(M) + 1.0) / (2.0 * M))[None, :, None]
    delta = target[:, None, :] - pred[:, :, None]
    absd = np.abs(delta)
    quad = absd <= kappa
    weight = np.where(delta < 0.0, 1.0 - tau, tau)
    huber = np.where(quad, 0.5 * delta * delta, kappa * (absd - 0.5 * kappa))
    norm = 1.0 / (B * M * Mt)
    loss = float((weight * huber).sum()) / kappa * norm
    dh = np.where(quad, delta, np.where(delta > 0.0, kappa, -kappa))
    grad = -(weight * dh).sum(axis=2) / kappa * norm
    return loss, grad
