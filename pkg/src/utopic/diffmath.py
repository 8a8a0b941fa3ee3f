"""Dense float64 tensors with a reverse-mode tape.

Every differentiable op builds a new :class:`Tensor` whose ``_vjp`` closure maps
the output cotangent to one cotangent per parent. :func:`backward` sorts the
recorded graph topologically once and accumulates cotangents additively, so a
tensor used twice receives the sum of both contributions.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out axes that were broadcast in the forward pass
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _vjp: Callable | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def max(self, axis=None, keepdims=False): return tmax(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def tensor(x, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad, name=name)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                         _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p: float) -> Tensor:
    a = tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * s,)
    return _make(out, (a,), vjp)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    a = tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        k = int(np.argmax(flat))
        def vjp(g):
            out = np.zeros(flat.shape)
            out[k] = float(g)
            return (out.reshape(a.shape),)
        val = flat[k]
        return _make(np.asarray(val).reshape((1,) * a.ndim) if keepdims else np.asarray(val), (a,), vjp)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)
    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        res = np.zeros(a.shape)
        np.put_along_axis(res, idx, g, axis=axis)
        return (res,)
    return _make(out if keepdims else np.squeeze(out, axis), (a,), vjp)


def tmin(a, axis=None, keepdims: bool = False) -> Tensor:
    return -tmax(-tensor(a), axis, keepdims)


def logsumexp(a, axis: int, keepdims: bool = True) -> Tensor:
    a = tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)
    return _make(out if keepdims else np.squeeze(out, axis), (a,), vjp)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilised by max subtraction."""
    a = tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _make(out, (a,), vjp)


# ---------------------------------------------------------------- structure

def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [tensor(t) for t in items]
    out = np.concatenate([t.data for t in items], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in items])[:-1]
    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))
    return _make(out, items, vjp)


def getitem(a, idx) -> Tensor:
    a = tensor(a)
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in parts)
    def vjp(g):
        res = np.zeros(a.shape)
        if basic:
            res[idx] += g
        else:
            np.add.at(res, idx, g)
        return (res,)
    return _make(np.array(out), (a,), vjp)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """``a[index]`` for an integer array of any shape; rows of a 2-D tensor."""
    return getitem(a, np.asarray(index))


def neighbor_max(a, nbr: np.ndarray) -> Tensor:
    """out[i, c] = max over k of a[nbr[i, k], c]; first maximal neighbour gets the gradient."""
    a = tensor(a)
    nbr = np.asarray(nbr)
    gathered = a.data[nbr]                                   # N x k x C
    arg = np.argmax(gathered, axis=1)                        # N x C
    src = np.take_along_axis(nbr, arg, axis=1) if nbr.shape[1] else arg
    out = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :]
    cols = np.broadcast_to(np.arange(a.shape[1]), src.shape)
    def vjp(g):
        res = np.zeros(a.shape)
        np.add.at(res, (src, cols), g)
        return (res,)
    return _make(out, (a,), vjp)


# ---------------------------------------------------------------- composites

def layer_norm(x, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + eps)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    With ``params`` given, returns one gradient array per parameter in the same
    order (zeros for parameters the loss does not depend on). Without it, returns
    the raw cotangent map keyed by ``id(tensor)``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return grads
    return [grads.get(id(p), np.zeros(p.shape)) for p in params]


def grad_check(fn: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = _as_array(x).copy()
    xt = parameter(x0)
    (analytic,) = backward(fn(xt), [xt])
    worst = 0.0
    flat = x0.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = fn(Tensor(x0.copy())).item()
        flat[k] = orig - step
        fm = fn(Tensor(x0.copy())).item()
        flat[k] = orig
        numeric = (fp - fm) / (2 * step)
        a = analytic.reshape(-1)[k]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------- layers

def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.W = parameter(init_uniform(rng, d_in, (d_in, d_out)))
        self.b = parameter(init_uniform(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.W": self.W}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "identity": lambda x: x,
}


class MLP:
    """Stack of linear layers with leaky-ReLU between them.

    ``final`` names the activation applied after the last layer.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, final: str = "identity"):
        if len(widths) < 2:
            raise ContractError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.final = final

    def __call__(self, x) -> Tensor:
        return mlp_forward(x, self.layers, self.final)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        return out


def mlp_forward(x, layers: Sequence[Linear], final: str = "identity") -> Tensor:
    x = tensor(x)
    for i, layer in enumerate(layers):
        if x.shape[-1] != layer.W.shape[0]:
            raise DimensionError(f"layer {i} expects width {layer.W.shape[0]}, got {x.shape[-1]}")
        x = layer(x)
        x = ACTIVATIONS[final](x) if i == len(layers) - 1 else leaky_relu(x)
    return x
