"""The compiled and pure-Python kernel backends must agree."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskreach import _kernels_py, kernels
from riskreach.navsim import ScenarioConfig, generate_arena

try:
    from riskreach import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension unavailable")
CFG = ScenarioConfig()


def test_backend_flag_matches_module():
    assert kernels.BACKEND in ("cython", "python")
    if compiled is not None:
        assert kernels.BACKEND == "cython" or kernels.wrap_angle is _kernels_py.wrap_angle


@pytest.mark.parametrize("impl", [_kernels_py, compiled], ids=["python", "cython"])
def test_wrap_angle_range_and_identity(impl):
    if impl is None:
        pytest.skip("compiled extension unavailable")
    assert impl.wrap_angle(0.3) == 0.3
    assert impl.wrap_angle(-math.pi) == math.pi
    assert impl.wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    for a in np.linspace(-50, 50, 2001):
        w = impl.wrap_angle(float(a))
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


@needs_compiled
@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_geometry_backends_agree(seed):
    rng = np.random.default_rng(seed)
    arena, _ = generate_arena(seed, CFG)
    x, y = rng.uniform(-4.5, 4.5, 2)
    th = rng.uniform(-math.pi, math.pi)
    obs = arena.obstacles
    h = arena.half_extent
    assert compiled.cast_ray(x, y, th, h, obs) == pytest.approx(_kernels_py.cast_ray(x, y, th, h, obs), abs=1e-12)
    np.testing.assert_allclose(compiled.lidar_scan(x, y, th, h, obs, 20, 3.5),
                               _kernels_py.lidar_scan(x, y, th, h, obs, 20, 3.5), atol=1e-12)
    assert compiled.min_obstacle_distance(x, y, h, obs) == pytest.approx(
        _kernels_py.min_obstacle_distance(x, y, h, obs), abs=1e-12)
    v, w = rng.uniform([0, -1], [1, 1])
    np.testing.assert_allclose(compiled.unicycle_rollout(x, y, th, v, w, 0.1, 10),
                               _kernels_py.unicycle_rollout(x, y, th, v, w, 0.1, 10), atol=1e-12)
    assert compiled.sweep_min_clearance(x, y, th, v, w, 0.1, 10, h, obs) == pytest.approx(
        _kernels_py.sweep_min_clearance(x, y, th, v, w, 0.1, 10, h, obs), abs=1e-12)


@needs_compiled
@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12), st.floats(0.1, 3.0), st.integers(0, 2 ** 31))
def test_huber_backends_agree(B, M, kappa, seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(0, 3, (B, M))
    target = rng.normal(0, 3, (B, M))
    loss_c, grad_c = compiled.quantile_huber(pred, target, kappa)
    loss_p, grad_p = _kernels_py.quantile_huber(pred, target, kappa)
    assert loss_c == pytest.approx(loss_p, rel=1e-12)
    np.testing.assert_allclose(grad_c, grad_p, rtol=1e-12, atol=1e-15)


def test_pure_python_switch(monkeypatch):
    import importlib

    monkeypatch.setenv("RISKREACH_PURE_PYTHON", "1")
    try:
        reloaded = importlib.reload(kernels)
        assert reloaded.BACKEND == "python"
        assert reloaded.cast_ray is _kernels_py.cast_ray
    finally:
        monkeypatch.delenv("RISKREACH_PURE_PYTHON")
        importlib.reload(kernels)
