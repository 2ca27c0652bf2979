import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskreach import nn


def test_identity_layer_passes_input_through():
    net = nn.DenseNet([2, 2], ["identity"])
    net.layers[0].W[...] = np.eye(2)
    net.layers[0].b[...] = 0.0
    assert np.array_equal(net(np.array([1.0, 2.0])), [1.0, 2.0])


def test_zero_tanh_layer_outputs_zero():
    net = nn.DenseNet([3, 4], ["tanh"], params=np.zeros(16))
    assert np.array_equal(net(np.array([5.0, -2.0, 7.0])), np.zeros(4))


def test_two_layer_forward_matches_hand_computation():
    net = nn.DenseNet([2, 2, 1], ["tanh", "identity"])
    net.layers[0].W[...] = [[0.5, -1.0], [2.0, 0.25]]
    net.layers[0].b[...] = [0.1, -0.2]
    net.layers[1].W[...] = [[1.5, -0.5]]
    net.layers[1].b[...] = [0.3]
    x = (0.4, -0.6)
    h1 = math.tanh(0.5 * x[0] - 1.0 * x[1] + 0.1)
    h2 = math.tanh(2.0 * x[0] + 0.25 * x[1] - 0.2)
    expected = 1.5 * h1 - 0.5 * h2 + 0.3
    assert net(np.array(x))[0] == pytest.approx(expected, abs=1e-15)


def test_batch_forward_matches_rowwise():
    rng = np.random.default_rng(3)
    net = nn.DenseNet([5, 7, 3], ["relu", "tanh"], rng=rng)
    x = rng.normal(size=(6, 5))
    rows = np.stack([net(r) for r in x])
    assert np.allclose(net(x), rows, atol=1e-15)


def test_forward_is_bitwise_pure():
    rng = np.random.default_rng(0)
    net = nn.DenseNet([4, 6, 2], ["tanh", "identity"], rng=rng)
    x = rng.normal(size=4)
    assert net(x).tobytes() == net(x.copy()).tobytes()


def test_input_width_mismatch_rejected():
    net = nn.DenseNet([3, 2], ["tanh"])
    with pytest.raises(nn.ShapeError):
        net(np.zeros(4))


def test_params_length_mismatch_rejected():
    with pytest.raises(nn.ShapeError):
        nn.DenseNet([3, 2], ["tanh"], params=np.zeros(5))


def test_unknown_activation_rejected():
    with pytest.raises(ValueError):
        nn.DenseNet([3, 2], ["sigmoid"])


def test_init_within_fan_in_bound():
    net = nn.DenseNet([16, 9, 4], ["tanh", "identity"], rng=np.random.default_rng(1))
    for layer in net.layers:
        bound = 1.0 / math.sqrt(layer.in_dim)
        assert np.all(np.abs(layer.W) <= bound)
        assert np.all(np.abs(layer.b) <= bound)


def _squared_error(net, x, y):
    out, cache = net.forward_cache(x)
    diff = out - y
    grad, _ = net.backward(cache, 2.0 * diff / x.shape[0])
    return float(np.sum(diff * diff) / x.shape[0]), grad


def _central_difference(f, params, h=1e-6):
    g = np.zeros_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + h
        up = f()
        params[i] = old - h
        down = f()
        params[i] = old
        g[i] = (up - down) / (2.0 * h)
    return g


@pytest.mark.parametrize("acts", [["tanh"], ["identity"], ["tanh", "identity"], ["relu", "tanh"]])
def test_backward_matches_finite_differences(acts):
    rng = np.random.default_rng(11)
    sizes = [4] + [5] * (len(acts) - 1) + [3]
    net = nn.DenseNet(sizes, acts, rng=rng)
    x = rng.normal(size=(4, 4))
    y = rng.normal(size=(4, 3))
    _, grad = _squared_error(net, x, y)
    num = _central_difference(lambda: _squared_error(net, x, y)[0], net.params)
    assert np.max(np.abs(grad - num)) <= 1e-5 * max(1.0, np.max(np.abs(num)))


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    net = nn.DenseNet([3, 6, 2], ["tanh", "identity"], rng=rng)
    x = rng.normal(size=(2, 3))
    w = rng.normal(size=(2, 2))
    _, cache = net.forward_cache(x)
    _, gx = net.backward(cache, w)
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + 1e-6
        up = float(np.sum(net(x) * w))
        flat[i] = old - 1e-6
        down = float(np.sum(net(x) * w))
        flat[i] = old
        num.reshape(-1)[i] = (up - down) / 2e-6
    assert np.allclose(gx, num, atol=1e-8)


def test_adam_zero_gradient_only_advances_counter():
    p = np.array([1.0, -2.0, 3.0])
    opt = nn.Adam(3, lr=0.1)
    opt.step(p, np.zeros(3))
    assert np.array_equal(p, [1.0, -2.0, 3.0])
    assert opt.t == 1


def test_adam_two_steps_follow_moment_recursion():
    g = np.array([0.5, -2.0])
    p = np.zeros(2)
    opt = nn.Adam(2, lr=1e-3)
    opt.step(p, g)
    opt.step(p, g)
    m1, v1 = 0.1 * g, 0.001 * g * g
    m2, v2 = 0.9 * m1 + 0.1 * g, 0.999 * v1 + 0.001 * g * g
    assert np.allclose(opt.m, m2, rtol=1e-15)
    assert np.allclose(opt.v, v2, rtol=1e-15)
    step1 = 1e-3 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    step2 = 1e-3 * (m2 / (1 - 0.9 ** 2)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert np.allclose(p, -(step1 + step2), rtol=1e-12)


def test_adam_rejects_nonfinite_gradient():
    p = np.zeros(2)
    opt = nn.Adam(2)
    with pytest.raises(nn.NonFiniteGradientError):
        opt.step(p, np.array([1.0, np.nan]))
    assert opt.t == 0


def test_adam_mask_freezes_entries():
    p = np.ones(3)
    opt = nn.Adam(3, lr=0.5)
    opt.step(p, np.ones(3), mask=np.array([1.0, 0.0, 1.0]))
    assert p[1] == 1.0 and p[0] < 1.0


def _pair(shape=(2, 3)):
    a = nn.DenseNet([shape[0], shape[1]], ["identity"], params=np.full(shape[0] * shape[1] + shape[1], 2.0))
    b = nn.DenseNet([shape[0], shape[1]], ["identity"], params=np.full(shape[0] * shape[1] + shape[1], 4.0))
    return a, b


@pytest.mark.parametrize("rho,expected", [(1.0, 2.0), (0.0, 4.0), (0.5, 3.0)])
def test_polyak_endpoints_and_midpoint(rho, expected):
    target, online = _pair()
    nn.polyak_update(target, online, rho)
    assert np.all(target.params == expected)


def test_polyak_architecture_mismatch_rejected():
    with pytest.raises(nn.ShapeError):
        nn.polyak_update(nn.DenseNet([2, 3], ["tanh"]), nn.DenseNet([3, 2], ["tanh"]), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 2 ** 31))
def test_polyak_contracts_toward_online(rho, seed):
    rng = np.random.default_rng(seed)
    target = nn.DenseNet([3, 4], ["tanh"], rng=rng)
    online = nn.DenseNet([3, 4], ["tanh"], rng=rng)
    before = np.linalg.norm(target.params - online.params)
    nn.polyak_update(target, online, rho)
    after = np.linalg.norm(target.params - online.params)
    assert after <= rho * before + 1e-12


def test_save_load_round_trip_is_exact(tmp_path):
    net = nn.DenseNet([26, 26, 2, 2], ["tanh", "tanh", "identity"], rng=np.random.default_rng(9))
    path = nn.save(net, tmp_path / "actor.txt")
    back = nn.load(path)
    assert back.sizes == net.sizes
    assert back.activations == net.activations
    assert np.array_equal(back.params, net.params)
    x = np.linspace(-1, 1, 26)
    assert back(x).tobytes() == net(x).tobytes()


def test_26_hidden_actor_file_loads_and_evaluates(tmp_path):
    rng = np.random.default_rng(2)
    lines = ["densenet v1", "layer 26 26 tanh"]
    lines += [" ".join(repr(float(v)) for v in rng.uniform(-0.2, 0.2, 26)) for _ in range(26)]
    lines.append(" ".join("0.0" for _ in range(26)))
    lines.append("layer 26 2 tanh")
    lines += [" ".join(repr(float(v)) for v in rng.uniform(-0.2, 0.2, 26)) for _ in range(2)]
    lines.append("0.0 0.0")
    (tmp_path / "a.txt").write_text("\n".join(lines) + "\n")
    net = nn.load(tmp_path / "a.txt")
    assert (net.in_dim, net.out_dim) == (26, 2)
    out = net(np.zeros(26))
    assert out.shape == (2,) and np.all(np.isfinite(out))


def test_weight_count_mismatch_is_parse_error():
    text = "densenet v1\nlayer 2 2 tanh\n1.0 2.0\n3.0\n0.0 0.0\n"
    with pytest.raises(nn.NetParseError) as info:
        nn.loads(text)
    assert info.value.line == 4


@pytest.mark.parametrize("text,field", [
    ("densenet v2\n", "header"),
    ("densenet v1\nlayer 2 x tanh\n", "layer"),
    ("densenet v1\nlayer 1 1 softsign\n1.0\n0.0\n", "activation"),
    ("densenet v1\nlayer 1 1 tanh\nfoo\n0.0\n", "weight row 0"),
    ("densenet v1\nlayer 1 1 tanh\n1.0\n", "bias"),
])
def test_malformed_files_name_the_field(text, field):
    with pytest.raises(nn.NetParseError) as info:
        nn.loads(text)
    assert info.value.field == field
