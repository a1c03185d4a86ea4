"""Dense float64 tensors with define-by-run reverse-mode autodiff, dense layers and Adam."""

from __future__ import annotations

import itertools
import math

import numpy as np

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("linear", "sigmoid", "tanh", "leaky_relu", "softmax")

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """A float64 array plus the tape node that produced it.

    Leaves created with ``requires_grad=True`` are parameters; their ``grad``
    accumulates across ``backward`` calls until ``zero_grad``.
    """

    __array_priority__ = 100
    __slots__ = ("values", "_grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, name=None, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self._grad = None
        self._parents = _parents
        self._backward = _backward
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    def zero_grad(self):
        self._grad = None

    def detach(self):
        return Tensor(self.values)

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self):
        return self.values.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(values, parents, backward):
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            return Tensor(values, requires_grad=True, _parents=parents, _backward=backward)
        return Tensor(values)

    def backward(self):
        if self.values.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not on the tape (no parameter reaches it)")

        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))

        grads = {self.node_id: np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                node._grad = g.copy() if node._grad is None else node._grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.values + b.values,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.values, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.values - b.values,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.values * b.values,
            (a, b),
            lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = a.values / b.values
        return Tensor._make(
            out,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * out / b.values, b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        x = self.values
        return Tensor._make(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return Tensor._make(
            a.values @ b.values, (a, b), lambda g: (g @ b.values.T, a.values.T @ g)
        )

    # -- reductions and shape ------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.values.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.values.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        return Tensor._make(self.values.reshape(shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self):
        return Tensor._make(self.values.T, (self,), lambda g: (g.T,))

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.values[idx], (self,), back)

    # -- nonlinearities -------------------------------------------------------

    def exp(self):
        out = np.exp(self.values)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.values
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.values)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def sigmoid(self):
        x = self.values
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def tanh(self):
        out = np.tanh(self.values)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def leaky_relu(self, slope=LEAKY_SLOPE):
        x = self.values
        scale = np.where(x > 0, 1.0, slope)
        return Tensor._make(x * scale, (self,), lambda g: (g * scale,))

    def softmax(self, axis=-1):
        out = softmax_np(self.values, axis)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), back)

    def clip(self, lo, hi):
        x = self.values
        inside = (x >= lo) & (x <= hi)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * inside,))

    def norm(self, axis=-1):
        """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
        x = self.values
        n = np.sqrt((x * x).sum(axis=axis))

        def back(g):
            safe = np.where(n > 0, n, 1.0)
            scale = np.where(n > 0, 1.0 / safe, 0.0)
            return (np.expand_dims(g * scale, axis) * x,)

        return Tensor._make(n, (self,), back)


def softmax_np(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    return as_tensor(x).softmax(axis)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.values for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    return Tensor._make(
        np.stack([t.values for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def activate(x, activation):
    if activation == "linear":
        return x
    if activation == "sigmoid":
        return x.sigmoid()
    if activation == "tanh":
        return x.tanh()
    if activation == "leaky_relu":
        return x.leaky_relu()
    if activation == "softmax":
        return x.softmax(axis=-1)
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


# -- modules ------------------------------------------------------------------


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {values.shape} != parameter shape {p.shape}")
            p.values = values.copy()


def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class DenseLayer(Module):
    """activation(x @ W.T + b) with W of shape (out, in)."""

    def __init__(self, in_dim, out_dim, activation="linear", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = Tensor(glorot_uniform(rng, in_dim, out_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"dense layer expects input (batch, {self.in_dim}), got {x.shape}; "
                f"weight shape is {self.weight.shape}"
            )
        return activate(x @ self.weight.T + self.bias, self.activation)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Adam:
    """Adam over a fixed parameter list; each instance owns its own moments."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        grads = [p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise DivergenceError(
                    f"non-finite gradient for parameter {p.name or p.node_id} (shape {p.shape}); step aborted"
                )
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- finite differences ---------------------------------------------------------


def numerical_grad(fn, param, eps=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``param``."""
    param.values = np.ascontiguousarray(param.values)
    out = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def relative_error(analytic, numeric, floor=1e-6):
    """Entrywise |a - n| / max(|a|, |n|, floor), maximised."""
    analytic = np.asarray(analytic).reshape(-1)
    numeric = np.asarray(numeric).reshape(-1)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(fn, params, eps=1e-5):
    """Max relative error between backprop and central differences over ``params``."""
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numerical_grad(fn, p, eps)))
    return worst
