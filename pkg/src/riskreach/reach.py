"""Degree-2 Taylor models pushed through a dense tanh network.

A :class:`TMVector` holds ``m`` Taylor models over the same ``n`` symbolic
variables ``z in [-1, 1]^n``::

    T_k(z) = c_k + sum_i L_ki z_i + sum_{i<=j} Q_kij z_i z_j + [lo_k, hi_k]

Every operation returns an enclosure of the exact real-valued image. Float
rounding in coefficient arithmetic is bounded a priori (``gamma_n`` style
bounds on the absolute coefficient mass) and folded into the remainder, and
remainder endpoints are pushed outward by a few ulps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import DenseNet

UNIT = 2.0 ** -53
ROUND_SLACK = 4  # ulps added to every remainder endpoint
SAMPLES = 1001  # grid points for the activation error bound
TINY_WIDTH = 1e-8  # below this, activations use a constant enclosure


class ReachabilityError(ArithmeticError):
    pass


def _gamma(k):
    # 2x margin also covers the rounding of the float forward pass being compared
    ku = (k + 2) * UNIT
    return 2.0 * ku / (1.0 - ku)


def _outward(lo, hi, k=ROUND_SLACK):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    for _ in range(k):
        lo = np.nextafter(lo, -np.inf)
        hi = np.nextafter(hi, np.inf)
    return lo, hi


@dataclass
class TMVector:
    const: np.ndarray  # (m,)
    lin: np.ndarray  # (m, n)
    quad: np.ndarray  # (m, n, n), upper triangle incl. diagonal
    lo: np.ndarray  # (m,)
    hi: np.ndarray  # (m,)

    @property
    def m(self) -> int:
        return self.const.shape[0]

    @property
    def n(self) -> int:
        return self.lin.shape[1]

    def __len__(self):
        return self.m

    def __getitem__(self, k) -> "TaylorModel":
        return TaylorModel.from_row(self, k)

    def mass(self):
        """Sum of absolute coefficients per model (bounds every monomial sum)."""
        return (np.abs(self.const) + np.abs(self.lin).sum(axis=1)
                + np.abs(self.quad).sum(axis=(1, 2)))

    def evaluate(self, z):
        """Polynomial parts at points ``z`` of shape ``(S, n)`` -> ``(S, m)``."""
        z = np.atleast_2d(z)
        quad = np.einsum("si,kij,sj->sk", z, self.quad, z, optimize=True)
        return self.const[None, :] + z @ self.lin.T + quad


@dataclass
class TaylorModel:
    """One polynomial-plus-interval model, as an exponent-tuple coefficient map."""

    n: int
    coeffs: dict  # exponent tuple -> coefficient
    lo: float
    hi: float

    @classmethod
    def from_row(cls, tms: TMVector, k: int) -> "TaylorModel":
        n = tms.n
        coeffs = {}
        if tms.const[k] != 0.0:
            coeffs[(0,) * n] = float(tms.const[k])
        for i in np.flatnonzero(tms.lin[k]):
            e = [0] * n
            e[i] = 1
            coeffs[tuple(e)] = float(tms.lin[k, i])
        for i, j in zip(*np.nonzero(tms.quad[k])):
            e = [0] * n
            e[i] += 1
            e[j] += 1
            coeffs[tuple(e)] = float(tms.quad[k, i, j])
        return cls(n, coeffs, float(tms.lo[k]), float(tms.hi[k]))

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.coeffs), default=0)

    def bounds(self):
        const = self.coeffs.get((0,) * self.n, 0.0)
        spread = sum(abs(c) for e, c in self.coeffs.items() if sum(e))
        lo, hi = _outward(const - spread + self.lo, const + spread + self.hi)
        return float(lo), float(hi)


def _constant(values, n):
    values = np.asarray(values, dtype=np.float64)
    m = values.shape[0]
    z = np.zeros(m)
    return TMVector(values.copy(), np.zeros((m, n)), np.zeros((m, n, n)), z, z.copy())


def input_tm(state, eps, mask=None) -> TMVector:
    """``s_i + eps_i * z_i`` for masked dimensions, constants elsewhere.

    One symbolic variable per perturbed dimension. ``eps`` may be a scalar
    or per-dimension.
    """
    s = np.asarray(state, dtype=np.float64)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), s.shape)
    if np.any(eps < 0):
        raise ValueError("perturbation radius must be nonnegative")
    mask = np.ones(s.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    tms = _constant(s, idx.size)
    tms.lin[idx, np.arange(idx.size)] = eps[idx]
    return tms


def tm_bounds(tms: TMVector):
    """Interval enclosure of each model over ``[-1, 1]^n`` plus remainder.

    Off-diagonal and linear monomials span ``[-|c|, |c|]``; squares ``z_i^2``
    span ``[min(c, 0), max(c, 0)]``.
    """
    diag = np.diagonal(tms.quad, axis1=1, axis2=2)
    off = np.abs(tms.quad).sum(axis=(1, 2)) - np.abs(diag).sum(axis=1)
    spread = np.abs(tms.lin).sum(axis=1) + off
    lo = tms.const - spread + np.minimum(diag, 0.0).sum(axis=1) + tms.lo
    hi = tms.const + spread + np.maximum(diag, 0.0).sum(axis=1) + tms.hi
    # sums above carry O(n) rounding of the coefficient mass
    err = _gamma(tms.n * tms.n + 4) * (tms.mass() + np.maximum(np.abs(tms.lo), np.abs(tms.hi)))
    return _outward(lo - err, hi + err)


def _poly_bounds(tms: TMVector):
    z = np.zeros(tms.m)
    return tm_bounds(TMVector(tms.const, tms.lin, tms.quad, z, z))


def propagate_affine(tms: TMVector, W, b) -> TMVector:
    """``W @ T + b``; exact on polynomials up to the bounded rounding term."""
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != tms.m or b.shape != (W.shape[0],):
        raise ValueError(f"affine shapes {W.shape}, {b.shape} do not match {tms.m} models")
    const = W @ tms.const + b
    lin = W @ tms.lin
    quad = np.tensordot(W, tms.quad, axes=(1, 0))
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    lo = Wp @ tms.lo + Wn @ tms.hi
    hi = Wp @ tms.hi + Wn @ tms.lo
    mass = np.abs(W) @ (tms.mass() + np.maximum(np.abs(tms.lo), np.abs(tms.hi)))
    # the bias add rounds once, relative to the stored result
    err = _gamma(tms.m) * (mass + np.abs(const))
    wlo, whi = _outward(lo - err, hi + err)
    # rows whose products all vanish are exact: const == b, zero remainder
    exact = mass == 0.0
    lo = np.where(exact, 0.0, wlo)
    hi = np.where(exact, 0.0, whi)
    return TMVector(const, lin, quad, lo, hi)


def _bernstein2(a, b, f=np.tanh):
    """Quadratic Bernstein interpolant of ``f`` on ``[a, b]`` in the centred
    variable ``y = x - mid``: returns ``(mid, c0, c1, c2)``."""
    mid = 0.5 * (a + b)
    w = b - a
    f0, f1, f2 = f(a), f(mid), f(b)
    c0 = 0.25 * (f0 + 2.0 * f1 + f2)
    c1 = (f2 - f0) / w
    c2 = (f0 - 2.0 * f1 + f2) / (w * w)
    return mid, c0, c1, c2


def bernstein_error_bound(a, b, mid, c0, c1, c2, f=np.tanh, samples=SAMPLES):
    """Upper bound on ``|f(x) - P(x)|`` over ``[a, b]`` for ``f`` 1-Lipschitz.

    Max sampled error on a uniform grid plus ``(1 + max|P'|) * h``, which
    covers every point within one spacing ``h`` of a sample.
    """
    t = np.linspace(0.0, 1.0, samples)
    w = b - a
    x = a[:, None] + w[:, None] * t[None, :]
    y = x - mid[:, None]
    p = c0[:, None] + c1[:, None] * y + c2[:, None] * y * y
    sampled = np.abs(f(x) - p).max(axis=1)
    h = w / (samples - 1)
    dmax = np.maximum(np.abs(c1 - c2 * w), np.abs(c1 + c2 * w))
    scale = 1.0 + np.abs(c0) + np.abs(c1) * w + np.abs(c2) * w * w
    return sampled + (1.0 + dmax) * h + 16.0 * UNIT * scale


def propagate_activation(tms: TMVector, activation: str) -> TMVector:
    """Enclose ``act(T)`` for ``act`` in {identity, tanh}.

    For tanh the quadratic Bernstein interpolant on the model's range
    ``[a, b]`` is composed with the polynomial part and truncated to degree
    two. The remainder collects: the input remainder (tanh is 1-Lipschitz),
    the interpolation error on ``[a, b]``, the dropped degree-3/4 terms, and
    coefficient rounding.
    """
    if activation == "identity":
        return tms
    if activation != "tanh":
        raise ValueError(f"unsupported activation {activation!r}")
    full_lo, full_hi = tm_bounds(tms)
    p_lo, p_hi = _poly_bounds(tms)
    a = np.minimum(full_lo, p_lo)
    b = np.maximum(full_hi, p_hi)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ReachabilityError("non-finite pre-activation bounds")
    m, n = tms.m, tms.n
    tiny = (b - a) < TINY_WIDTH
    wide = ~tiny
    const = np.empty(m)
    lin = np.zeros((m, n))
    quad = np.zeros((m, n, n))
    lo = np.empty(m)
    hi = np.empty(m)

    if np.any(tiny):
        # tanh(x) in tanh(mid) +/- (b - a) / 2 for x in [a, b]
        mid = 0.5 * (a[tiny] + b[tiny])
        fm = np.tanh(mid)
        r = 0.5 * (b[tiny] - a[tiny]) + 8.0 * UNIT * (1.0 + np.abs(fm))
        const[tiny] = fm
        lo[tiny] = -r
        hi[tiny] = r

    if np.any(wide):
        aw, bw = a[wide], b[wide]
        mid, c0, c1, c2 = _bernstein2(aw, bw)
        err = bernstein_error_bound(aw, bw, mid, c0, c1, c2)
        k = tms.const[wide] - mid
        L = tms.lin[wide]
        Q = tms.quad[wide]
        # y^2 up to degree 2: k^2 + 2kL.z + (L.z)^2 + 2kQ
        LL = L[:, :, None] * L[:, None, :]
        LL = np.triu(LL + np.transpose(LL, (0, 2, 1))) - LL * np.eye(n)[None]
        const[wide] = c0 + c1 * k + c2 * k * k
        lin[wide] = (c1 + 2.0 * c2 * k)[:, None] * L
        quad[wide] = (c1 + 2.0 * c2 * k)[:, None, None] * Q + c2[:, None, None] * LL
        # dropped part of y^2: 2(L.z)(Q(z)) in [-2 AL AQ, 2 AL AQ]; Q(z)^2 in [0, AQ^2]
        AL = np.abs(L).sum(axis=1)
        AQ = np.abs(Q).sum(axis=(1, 2))
        drop_lo = -2.0 * AL * AQ
        drop_hi = 2.0 * AL * AQ + AQ * AQ
        cd_lo = np.where(c2 >= 0, c2 * drop_lo, c2 * drop_hi)
        cd_hi = np.where(c2 >= 0, c2 * drop_hi, c2 * drop_lo)
        rin = np.maximum(np.abs(tms.lo[wide]), np.abs(tms.hi[wide]))
        S = np.abs(k) + AL + AQ
        rounding = _gamma(n * n + 8) * (np.abs(c0) + np.abs(c1) * S + np.abs(c2) * S * S
                                        + np.abs(cd_lo) + np.abs(cd_hi) + rin + err)
        lo[wide] = cd_lo - err - rin - rounding
        hi[wide] = cd_hi + err + rin + rounding

    lo, hi = _outward(lo, hi)
    out = TMVector(const, lin, quad, lo, hi)
    if not (np.all(np.isfinite(out.const)) and np.all(np.isfinite(out.lo)) and np.all(np.isfinite(out.hi))):
        raise ReachabilityError("non-finite Taylor model after activation")
    return out


def propagate_network(net: DenseNet, tms: TMVector) -> TMVector:
    for layer in net.layers:
        tms = propagate_activation(propagate_affine(tms, layer.W, layer.b), layer.activation)
    return tms


@dataclass(frozen=True)
class ReachableActionBox:
    lo: np.ndarray  # (action_dim,)
    hi: np.ndarray
    remainder_width: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, action) -> bool:
        a = np.asarray(action)
        return bool(np.all(a >= self.lo) and np.all(a <= self.hi))


def action_reachable_set(policy: DenseNet, state, eps, mask=None, action_low=None,
                         action_high=None) -> ReachableActionBox:
    """Guaranteed per-dimension bounds on ``policy(state + eps * z)``.

    ``mask`` picks the perturbed input dimensions (default: all but the
    last, which carries the cost budget). The policy's final affine layer
    maps to physical action units; bounds are intersected with
    ``[action_low, action_high]`` when given.
    """
    state = np.asarray(state, dtype=np.float64)
    if mask is None:
        mask = np.ones(state.shape, dtype=bool)
        mask[-1] = False
    tms = propagate_network(policy, input_tm(state, eps, mask))
    lo, hi = tm_bounds(tms)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ReachabilityError("non-finite action bounds")
    if action_low is not None:
        lo = np.maximum(lo, action_low)
        hi = np.maximum(hi, action_low)
    if action_high is not None:
        hi = np.minimum(hi, action_high)
        lo = np.minimum(lo, action_high)
    return ReachableActionBox(lo, hi, tms.hi - tms.lo)
