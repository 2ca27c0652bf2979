import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskreach import nn
from riskreach.risk import (
    LagrangeMultiplier,
    VarTracker,
    budget_update,
    cvar_brute_force,
    cvar_cost_value,
    empirical_quantile,
    exceedance_probability,
    huber_quantile_loss,
    lambda_update,
    lambda_update_expectation,
    noncrossing_backward,
    noncrossing_quantiles,
    quantile_midpoints,
    var_update,
)


def test_budget_update_examples():
    assert budget_update(10.0, 1.0, 0.99) == pytest.approx(9.0 / 0.99, rel=1e-15)
    assert budget_update(5.0, 0.0, 0.99) == pytest.approx(5.0505050505, rel=1e-10)


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.5])
def test_budget_update_rejects_bad_gamma(gamma):
    with pytest.raises(ValueError):
        budget_update(1.0, 0.0, gamma)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=60), st.floats(-5, 20), st.floats(0.5, 0.999))
def test_budget_unrolls_to_closed_form(costs, e0, gamma):
    e = e0
    for c in costs:
        e = budget_update(e, c, gamma)
    T = len(costs)
    closed = e0 / gamma ** T - sum(c / gamma ** (T - t) for t, c in enumerate(costs))
    assert e == pytest.approx(closed, rel=1e-9, abs=1e-9)


def test_uniform_logits_give_exact_fractions():
    M = 8
    head = np.concatenate([np.full(M, 0.37), [2.0, -1.0]])
    q, (p, phi, k, _) = noncrossing_quantiles(head)
    assert np.allclose(phi, np.arange(1, M + 1) / M, rtol=0, atol=1e-15)
    assert np.allclose(q, k * np.arange(1, M + 1) / M - 1.0, atol=1e-14)


def test_vanishing_slope_collapses_quantiles():
    rng = np.random.default_rng(0)
    head = np.concatenate([rng.normal(size=32), [-30.0, 4.2]])
    q, _ = noncrossing_quantiles(head)
    assert q.max() - q.min() < 1e-12 * 4.2 + 1e-9


def test_noncrossing_over_random_trunks():
    rng = np.random.default_rng(123)
    trunk = nn.DenseNet([28, 26], ["relu"], rng=rng)
    head = nn.DenseNet([26, 34], ["identity"], rng=rng)
    x = rng.normal(0.0, 2.0, size=(10_000, 28))
    q, _ = noncrossing_quantiles(head(trunk(x)))
    assert np.all(np.diff(q, axis=1) > 0.0)


def test_noncrossing_survives_saturated_softmax():
    # a peaked softmax leaves masses far below the float spacing of phi near 1
    M = 32
    logits = np.linspace(40.0, -40.0, M)
    head = np.stack([np.concatenate([logits, [60.0, 30.0]]),
                     np.concatenate([logits[::-1], [4.0, -2.0]]),
                     np.concatenate([np.full(M, -800.0), [800.0, 1e3]])])
    head[2, 0] = 0.0
    q, _ = noncrossing_quantiles(head)
    assert np.all(np.diff(q, axis=1) > 0.0)


def test_noncrossing_lift_leaves_separated_quantiles_alone():
    rng = np.random.default_rng(9)
    head = rng.normal(size=(50, 18))
    q, (p, phi, k, _) = noncrossing_quantiles(head)
    assert np.array_equal(q, k[:, None] * phi + head[:, -1:])


def test_noncrossing_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    head = rng.normal(size=(3, 10))
    w = rng.normal(size=(3, 8))
    q, cache = noncrossing_quantiles(head)
    g = noncrossing_backward(cache, w)
    num = np.zeros_like(head)
    for idx in np.ndindex(head.shape):
        h2 = head.copy()
        h2[idx] += 1e-6
        up = float(np.sum(noncrossing_quantiles(h2)[0] * w))
        h2[idx] -= 2e-6
        down = float(np.sum(noncrossing_quantiles(h2)[0] * w))
        num[idx] = (up - down) / 2e-6
    assert np.allclose(g, num, atol=1e-8)


def test_cvar_cost_value_examples():
    q = np.array([1.0, 2.0, 3.0, 4.0])
    assert cvar_cost_value(q, 2.5) == 3.5
    assert cvar_cost_value(q, 0.5) == 2.5
    assert cvar_cost_value(q, 9.0) == 4.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16), st.floats(-12, 12), st.floats(0, 5))
def test_cvar_cost_value_nondecreasing_in_budget(vals, e, de):
    q = np.sort(np.array(vals))
    assert cvar_cost_value(q, e + de) >= cvar_cost_value(q, e) - 1e-12


def _huber_oracle(pred, target, kappa):
    """Term-by-term pinball-Huber average over every (i, j) pair."""
    B, M = pred.shape
    total = 0.0
    for b in range(B):
        for i in range(M):
            tau = (2 * i + 1) / (2 * M)
            for j in range(target.shape[1]):
                d = target[b, j] - pred[b, i]
                h = 0.5 * d * d if abs(d) <= kappa else kappa * (abs(d) - 0.5 * kappa)
                total += abs(tau - (1.0 if d < 0 else 0.0)) * h / kappa
    return total / (B * M * target.shape[1])


def test_midpoints():
    assert np.allclose(quantile_midpoints(4), [0.125, 0.375, 0.625, 0.875])


def test_huber_zero_residual_is_zero():
    # every pairwise residual is zero only for a constant distribution
    c = np.full((1, 3), 2.0)
    loss, grad = huber_quantile_loss(c, c, 1.0)
    assert loss == 0.0 and np.all(grad == 0.0)


@pytest.mark.parametrize("kappa", [0.5, 1.0, 2.0])
def test_single_quantile_at_kappa(kappa):
    loss, _ = huber_quantile_loss(np.array([[0.0]]), np.array([[kappa]]), kappa)
    assert loss == pytest.approx(0.5 * (kappa * kappa / 2.0) / kappa, rel=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 3.0), st.integers(0, 2 ** 31))
def test_huber_matches_pairwise_oracle(B, M, Mt, kappa, seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(0, 2, size=(B, M))
    target = rng.normal(0, 2, size=(B, Mt))
    loss, _ = huber_quantile_loss(pred, target, kappa)
    assert loss == pytest.approx(_huber_oracle(pred, target, kappa), rel=1e-12, abs=1e-15)
    assert loss >= 0.0


def test_huber_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    pred = rng.normal(size=(4, 6))
    target = rng.normal(size=(4, 6))
    _, grad = huber_quantile_loss(pred, target, 1.0)
    num = np.zeros_like(pred)
    for idx in np.ndindex(pred.shape):
        p = pred.copy()
        p[idx] += 1e-6
        up = huber_quantile_loss(p, target, 1.0)[0]
        p[idx] -= 2e-6
        down = huber_quantile_loss(p, target, 1.0)[0]
        num[idx] = (up - down) / 2e-6
    assert np.max(np.abs(grad - num)) <= 1e-5 * np.max(np.abs(num))


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 3))
def test_huber_convex_along_residual(d1, d2, kappa):
    def f(d):
        return huber_quantile_loss(np.array([[0.0, 0.0]]), np.array([[d, d]]), kappa)[0]

    assert f(0.5 * (d1 + d2)) <= 0.5 * (f(d1) + f(d2)) + 1e-12


def test_huber_rejects_nonpositive_kappa():
    with pytest.raises(ValueError):
        huber_quantile_loss(np.zeros((1, 2)), np.zeros((1, 2)), 0.0)


def test_var_update_example():
    tracker = VarTracker(5.0, 0.9, lr=1.0)
    new, p_hat = var_update(tracker, [0, 0, 0, 0, 0, 0, 0, 6, 7, 8])
    assert p_hat == pytest.approx(0.3)
    assert new.u == pytest.approx(5.2)


def test_var_update_fixed_point():
    tracker = VarTracker(5.0, 0.9, lr=0.3)
    costs = [0.0] * 9 + [6.0]
    assert exceedance_probability(costs, 5.0) == pytest.approx(0.1)
    assert var_update(tracker, costs)[0].u == pytest.approx(5.0, abs=1e-15)


def test_var_update_rejects_empty():
    with pytest.raises(ValueError):
        var_update(VarTracker(1.0, 0.9), [])


@pytest.mark.parametrize("draw", [
    lambda rng, n: rng.poisson(6.0, size=n).astype(float),
    lambda rng, n: rng.lognormal(1.5, 0.5, size=n),
])
def test_var_tracker_converges_to_sorted_quantile(draw):
    rng = np.random.default_rng(2024)
    costs = draw(rng, 10_000)
    tracker = VarTracker(0.0, 0.9, lr=0.05)
    for c in costs:
        tracker, _ = var_update(tracker, [c])
    oracle = float(np.sort(costs)[math.ceil(0.9 * costs.size) - 1])
    assert abs(tracker.u - oracle) <= 0.5


def test_lambda_update_examples():
    lm = LagrangeMultiplier(1.0, lr=0.1, lam_max=100.0, threshold=10.0)
    assert lambda_update(lm, 6.0, 5.0).value == pytest.approx(1.1)
    assert lambda_update(lm, 0.0, 0.0).value == 0.0
    top = LagrangeMultiplier(99.9, lr=1.0, lam_max=100.0, threshold=10.0)
    assert lambda_update(top, 50.0, 50.0).value == 100.0


def test_expectation_variant_ignores_var():
    lm = LagrangeMultiplier(1.0, lr=0.1, threshold=10.0)
    assert lambda_update_expectation(lm, 12.0).value == pytest.approx(1.2)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 100), st.floats(1e-3, 5), st.floats(-50, 50), st.floats(0, 100))
def test_lambda_stays_in_box(lam, lr, u, cbar):
    lm = LagrangeMultiplier(lam, lr=lr, lam_max=100.0, threshold=10.0)
    assert 0.0 <= lambda_update(lm, u, cbar).value <= 100.0


def test_multiplier_rejects_out_of_box_value():
    with pytest.raises(ValueError):
        LagrangeMultiplier(-1.0)


def test_brute_force_textbook_case():
    var, cvar = cvar_brute_force([0, 0, 0, 10], 0.75)
    assert var == 0.0
    assert cvar == pytest.approx(10.0, abs=1e-2)


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9, 0.99])
def test_brute_force_constant_samples(alpha):
    assert cvar_brute_force([3.5] * 7, alpha) == (3.5, 3.5)


def _tail_mean(xs, alpha):
    """Sorted-tail CVaR with the fractional atom at the VaR."""
    xs = np.sort(xs)
    n = xs.size
    k = math.ceil(round(alpha * n, 9))
    var = xs[k - 1]
    return var + np.sum(np.maximum(xs - var, 0.0)) / (n * (1.0 - alpha))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 60), st.floats(0.05, 0.95))
def test_brute_force_ordering_and_tail_shortcut(seed, n, alpha):
    xs = np.random.default_rng(seed).exponential(3.0, size=n)
    var, cvar = cvar_brute_force(xs, alpha)
    assert cvar >= var - 1e-12
    span = xs.max() - xs.min()
    assert cvar == pytest.approx(_tail_mean(xs, alpha), abs=2e-3 * span / (1.0 - alpha) + 1e-12)


def test_brute_force_tends_to_max_as_alpha_rises():
    xs = np.random.default_rng(1).normal(size=50)
    _, cvar = cvar_brute_force(xs, 0.999)
    assert cvar == pytest.approx(xs.max(), abs=1e-2)


def test_empirical_quantile_rank():
    assert empirical_quantile([5, 1, 3, 2, 4], 0.9) == 5.0
    assert empirical_quantile([5, 1, 3, 2, 4], 0.4) == 2.0
    assert empirical_quantile(list(range(1, 11)), 0.9) == 9.0
