"""Tail-risk machinery for the constrained learner.

Budget recursion, the monotone quantile head, the tail-conditional cost
value, quantile Huber loss, the exceedance-driven VaR tracker, the projected
Lagrange multiplier, and a brute-force CVaR reference used by the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels


def budget_update(e: float, c: float, gamma: float) -> float:
    """Next-step cost allowance ``(e - c) / gamma``."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    return (e - c) / gamma


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class QuantileSet:
    values: np.ndarray  # (..., M), nondecreasing along the last axis

    @property
    def M(self) -> int:
        return self.values.shape[-1]

    @property
    def fractions(self) -> np.ndarray:
        return np.arange(1, self.M + 1) / self.M


def quantile_midpoints(M: int) -> np.ndarray:
    return (2.0 * np.arange(1, M + 1) - 1.0) / (2.0 * M)


def noncrossing_quantiles(head_out):
    """Map raw head outputs ``[f_phi (M), f_k, f_d]`` to monotone quantiles.

    ``q_i = softplus(f_k) * cumsum(softmax(f_phi))_i + f_d``. Works on a
    single vector or a batch of rows. Returns ``(q, cache)``; the cache feeds
    :func:`noncrossing_backward`.
    """
    h = np.asarray(head_out, dtype=np.float64)
    logits = h[..., :-2]
    fk = h[..., -2]
    d = h[..., -1]
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=-1, keepdims=True)
    phi = np.cumsum(p, axis=-1)
    k = softplus(fk)
    q = k[..., None] * phi + d[..., None]
    # Softmax masses below the float spacing of phi (or of q) make the sum
    # saturate; lift each value to at least the next float above its
    # predecessor so the order stays strict. Only collapsed entries move,
    # by a few ulps, and the gradient treats the lift as identity.
    for i in range(1, q.shape[-1]):
        q[..., i] = np.maximum(q[..., i], np.nextafter(q[..., i - 1], np.inf))
    return q, (p, phi, k, fk)


def noncrossing_backward(cache, grad_q):
    """dLoss/d(head outputs) given dLoss/dq."""
    p, phi, k, fk = cache
    g = np.asarray(grad_q, dtype=np.float64)
    grad_d = g.sum(axis=-1)
    grad_k = (g * phi).sum(axis=-1) * sigmoid(fk)
    gphi = g * k[..., None]
    # phi_i = sum_{j<=i} p_j  =>  dL/dp_j = sum_{i>=j} dL/dphi_i
    gp = np.cumsum(gphi[..., ::-1], axis=-1)[..., ::-1]
    glog = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
    return np.concatenate([glog, grad_k[..., None], grad_d[..., None]], axis=-1)


def tail_mask(q, e):
    """Indicator of quantiles at or above the budget; falls back to the top
    quantile when none qualify."""
    q = np.asarray(q, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    mask = q >= e[..., None]
    empty = ~mask.any(axis=-1)
    if np.any(empty):
        mask = mask.copy()
        mask[empty, -1] = True
    return mask


def cvar_cost_value(q, e):
    """Mean of the quantiles ``>= e`` (``q_M`` if there are none)."""
    q = np.asarray(q, dtype=np.float64)
    mask = tail_mask(q, e)
    return (q * mask).sum(axis=-1) / mask.sum(axis=-1)


def cvar_cost_value_grad(q, e):
    """d V / d q with the selection mask held fixed."""
    mask = tail_mask(q, e)
    return mask / mask.sum(axis=-1, keepdims=True)


def huber_quantile_loss(pred, target, kappa: float = 1.0):
    """Quantile Huber loss averaged over the ``M x M`` pairs (and the batch).

    ``pred`` is ``(B, M)`` (or ``(M,)``), ``target`` is ``(B, M')`` of already
    bootstrapped targets ``c + gamma * q_j'``. Returns ``(loss, dloss/dpred)``.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape[0] != target.shape[0]:
        raise ValueError("pred and target batch sizes differ")
    loss, grad = kernels.quantile_huber(pred, target, float(kappa))
    return float(loss), grad


@dataclass(frozen=True)
class VarTracker:
    u: float
    alpha: float
    lr: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


def exceedance_probability(costs, u: float) -> float:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size == 0:
        raise ValueError("need at least one episode cost")
    return float(np.count_nonzero(costs >= u)) / costs.size


def var_update(tracker: VarTracker, costs) -> tuple[VarTracker, float]:
    """One exceedance step; returns the new tracker and the exceedance rate."""
    p_hat = exceedance_probability(costs, tracker.u)
    u = tracker.u + tracker.lr * (p_hat - (1.0 - tracker.alpha))
    return replace(tracker, u=u), p_hat


@dataclass(frozen=True)
class LagrangeMultiplier:
    value: float = 0.0
    lr: float = 0.01
    lam_max: float = 100.0
    threshold: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.value <= self.lam_max:
            raise ValueError("multiplier outside [0, lam_max]")


def lambda_update(lm: LagrangeMultiplier, u: float, mean_cost: float) -> LagrangeMultiplier:
    """Projected step ``lam - lr * (b - u - mean_cost)`` clipped to ``[0, lam_max]``."""
    raw = lm.value - lm.lr * (lm.threshold - u - mean_cost)
    return replace(lm, value=float(min(max(raw, 0.0), lm.lam_max)))


def lambda_update_expectation(lm: LagrangeMultiplier, mean_cost: float) -> LagrangeMultiplier:
    """Expected-cost variant: slack ``b - mean_cost`` with no VaR term."""
    raw = lm.value - lm.lr * (lm.threshold - mean_cost)
    return replace(lm, value=float(min(max(raw, 0.0), lm.lam_max)))


def empirical_quantile(samples, alpha: float) -> float:
    """Order statistic at 1-based rank ``ceil(alpha * N)``."""
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    if xs.size == 0:
        raise ValueError("need at least one sample")
    rank = math.ceil(round(alpha * xs.size, 9))
    return float(xs[min(max(rank, 1), xs.size) - 1])


def cvar_brute_force(samples, alpha: float, grid_step: float | None = None):
    """Reference (VaR, CVaR) by direct search.

    VaR is the smallest sample whose empirical CDF reaches ``alpha``. CVaR
    minimises ``u + E[(C - u)^+] / (1 - alpha)`` over a uniform grid across
    the sample range (spacing at most 1e-3 of the range).
    """
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    if xs.size == 0:
        raise ValueError("need at least one sample")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    n = xs.size
    cdf = np.arange(1, n + 1) / n
    var = float(xs[np.argmax(cdf >= alpha - 1e-12)])
    lo, hi = xs[0], xs[-1]
    span = hi - lo
    if span == 0.0:
        return var, float(lo)
    step = grid_step if grid_step is not None else 1e-3 * span
    grid = np.linspace(lo, hi, int(math.ceil(span / step)) + 1)
    best = np.inf
    for chunk in np.array_split(grid, max(1, grid.size // 512)):
        excess = np.maximum(xs[None, :] - chunk[:, None], 0.0).mean(axis=1)
        best = min(best, float(np.min(chunk + excess / (1.0 - alpha))))
    return var, best
