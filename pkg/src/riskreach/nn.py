"""Small dense feedforward networks with hand-written reverse mode.

All parameters of a :class:`DenseNet` live in one contiguous float64 vector
(``net.params``); each layer's weight matrix and bias are views into it.
That keeps Adam and Polyak averaging to a single vectorised operation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "identity", "relu")


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class NetParseError(ValueError):
    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: {field}: {message}")
        self.line = line
        self.field = field


@dataclass
class Layer:
    in_dim: int
    out_dim: int
    activation: str
    W: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)


def _activate(z, tag):
    if tag == "tanh":
        return np.tanh(z)
    if tag == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z, y, tag):
    if tag == "tanh":
        return 1.0 - y * y
    if tag == "relu":
        return (z > 0.0).astype(np.float64)
    return None


class DenseNet:
    """Feedforward net ``x -> act_L(W_L ... act_1(W_1 x + b_1) ... + b_L)``."""

    def __init__(self, sizes, activations, rng=None, params=None):
        sizes = [int(s) for s in sizes]
        activations = list(activations)
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise ShapeError("need len(activations) == len(sizes) - 1 >= 1")
        for tag in activations:
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        self.sizes = sizes
        self.activations = activations
        n = sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
        if params is None:
            self.params = np.zeros(n)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ShapeError(f"expected {n} parameters, got {params.shape}")
            self.params = params.copy()
        self.layers = []
        off = 0
        for i, o, tag in zip(sizes[:-1], sizes[1:], activations):
            W = self.params[off:off + o * i].reshape(o, i)
            off += o * i
            b = self.params[off:off + o]
            off += o
            self.layers.append(Layer(i, o, tag, W, b))
        self._slices = []
        off = 0
        for layer in self.layers:
            n_layer = layer.out_dim * layer.in_dim + layer.out_dim
            self._slices.append((off, off + n_layer))
            off += n_layer
        if params is None and rng is not None:
            # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases
            for layer in self.layers:
                bound = 1.0 / np.sqrt(layer.in_dim)
                layer.W[...] = rng.uniform(-bound, bound, size=layer.W.shape)
                layer.b[...] = rng.uniform(-bound, bound, size=layer.b.shape)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def layer_slices(self):
        """(start, stop) offsets of each layer's parameters in ``params``."""
        return list(self._slices)

    def copy(self) -> "DenseNet":
        return DenseNet(self.sizes, self.activations, params=self.params)

    def same_architecture(self, other: "DenseNet") -> bool:
        return self.sizes == other.sizes and self.activations == other.activations

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[-1] if x.ndim else 0} != {self.in_dim}")
        return x

    def forward(self, x):
        """Evaluate on one input vector or a batch (rows)."""
        h = self._check_input(x)
        for layer in self.layers:
            h = _activate(h @ layer.W.T + layer.b, layer.activation)
        return h

    __call__ = forward

    def forward_cache(self, x):
        h = self._check_input(x)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        cache = [h]
        pre = []
        for layer in self.layers:
            z = h @ layer.W.T + layer.b
            h = _activate(z, layer.activation)
            pre.append(z)
            cache.append(h)
        return (h[0] if squeeze else h), (cache, pre, squeeze)

    def backward(self, cache, grad_out):
        """Reverse pass.

        ``grad_out`` is dLoss/dOutput with the same shape as the forward
        output. Returns ``(grad_params, grad_input)``; batch contributions are
        summed, so scale ``grad_out`` for a mean loss.
        """
        acts, pre, squeeze = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        grad = np.zeros_like(self.params)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            dact = _activation_grad(pre[idx], acts[idx + 1], layer.activation)
            if dact is not None:
                g = g * dact
            start, stop = self._slices[idx]
            nw = layer.out_dim * layer.in_dim
            grad[start:start + nw] = (g.T @ acts[idx]).ravel()
            grad[start + nw:stop] = g.sum(axis=0)
            g = g @ layer.W
        return grad, (g[0] if squeeze else g)


class Adam:
    """Adam state for one flat parameter vector."""

    def __init__(self, size, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad, mask=None):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.m.shape:
            raise ShapeError(f"gradient shape {grad.shape} != {self.m.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError("non-finite gradient; aborting update")
        if mask is not None:
            grad = grad * mask
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if mask is not None:
            upd *= mask
        params -= upd


def grad_step(net: DenseNet, grad_params, opt: Adam, mask=None) -> DenseNet:
    opt.step(net.params, grad_params, mask)
    return net


def polyak_update(target: DenseNet, online: DenseNet, rho: float) -> DenseNet:
    """In place: ``target <- rho * target + (1 - rho) * online``."""
    if not target.same_architecture(online):
        raise ShapeError("polyak_update needs identical architectures")
    target.params *= rho
    target.params += (1.0 - rho) * online.params
    return target


def dumps(net: DenseNet) -> str:
    lines = ["densenet v1"]
    for layer in net.layers:
        lines.append(f"layer {layer.in_dim} {layer.out_dim} {layer.activation}")
        for row in layer.W:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in layer.b))
    return "\n".join(lines) + "\n"


def loads(text: str) -> DenseNet:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "densenet v1":
        raise NetParseError(1, "header", "expected 'densenet v1'")
    pos = 1
    sizes: list[int] = []
    acts: list[str] = []
    chunks = []

    def floats(lineno, field, expect):
        if lineno >= len(lines):
            raise NetParseError(lineno + 1, field, "unexpected end of file")
        parts = lines[lineno].split()
        if len(parts) != expect:
            raise NetParseError(lineno + 1, field, f"expected {expect} values, got {len(parts)}")
        try:
            return [float(p) for p in parts]
        except ValueError as exc:
            raise NetParseError(lineno + 1, field, str(exc)) from None

    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        head = lines[pos].split()
        if len(head) != 4 or head[0] != "layer":
            raise NetParseError(pos + 1, "layer", "expected 'layer <in> <out> <activation>'")
        try:
            i, o = int(head[1]), int(head[2])
        except ValueError:
            raise NetParseError(pos + 1, "layer", "widths must be integers") from None
        if i <= 0 or o <= 0:
            raise NetParseError(pos + 1, "layer", "widths must be positive")
        if head[3] not in ACTIVATIONS:
            raise NetParseError(pos + 1, "activation", f"unknown activation {head[3]!r}")
        if sizes and sizes[-1] != i:
            raise NetParseError(pos + 1, "layer", f"input width {i} does not chain from {sizes[-1]}")
        if not sizes:
            sizes.append(i)
        sizes.append(o)
        acts.append(head[3])
        pos += 1
        for r in range(o):
            chunks.append(floats(pos, f"weight row {r}", i))
            pos += 1
        bias = floats(pos, "bias", o)
        pos += 1
        chunks.append(bias)
    if not acts:
        raise NetParseError(len(lines), "layer", "no layers")
    params = np.array([v for chunk in chunks for v in chunk], dtype=np.float64)
    return DenseNet(sizes, acts, params=params)


def save(net: DenseNet, path) -> Path:
    path = Path(path)
    path.write_text(dumps(net), encoding="utf-8")
    return path


def load(path) -> DenseNet:
    return loads(Path(path).read_text(encoding="utf-8"))
