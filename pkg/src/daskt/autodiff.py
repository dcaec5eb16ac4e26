"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations the knowledge-tracing model needs are provided. Every op
builds a :class:`Tensor` node holding its parents and a closure that pushes the
output gradient back into them. Gradients accumulate in place, so slicing a
large tensor step by step does not allocate a full-size buffer per step.
"""

from __future__ import annotations

import json
import zipfile
import zlib
from collections.abc import Callable, Iterable, Sequence
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class GraphReuseError(RuntimeError):
    """Raised when backward is run twice through the same graph."""


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "_consumed", "name", "requires_grad")

    def __init__(
        self, data, parents: tuple["Tensor", ...] = (), backward=None, name=None, requires_grad=True
    ):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = backward
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        for node in order:
            if node._consumed:
                raise GraphReuseError(
                    "backward already ran through this graph; rebuild it (forward again) first"
                )
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if not node.is_leaf:
                node._consumed = True
                node._backward = None
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# --- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return Tensor(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(2.0 * x.data * g)

    return Tensor(x.data * x.data, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(g / x.data)

    return Tensor(np.log(x.data), (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x._accum(g * inside)

    return Tensor(np.clip(x.data, lo, hi), (x,), backward)


# --- reductions and shape ops -----------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return Tensor(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accum(g.reshape(x.shape))

    return Tensor(x.data.reshape(shape), (x,), backward)


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[idx] += g

    return Tensor(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            x._accum(g[tuple(sl)])

    return Tensor(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def backward(g):
        for i, x in enumerate(xs):
            x._accum(np.take(g, i, axis=axis))

    return Tensor(np.stack([x.data for x in xs], axis=axis), tuple(xs), backward)


def shift(x: Tensor, offset: int, axis: int = 1) -> Tensor:
    """out[..., t, ...] = x[..., t + offset, ...], zero where t + offset is out of range."""
    n = x.shape[axis]

    def _sl(lo, hi):
        s = [slice(None)] * x.data.ndim
        s[axis] = slice(lo, hi)
        return tuple(s)

    out = np.zeros_like(x.data)
    if offset >= 0:
        dst, src = _sl(0, n - offset), _sl(offset, n)
    else:
        dst, src = _sl(-offset, n), _sl(0, n + offset)
    out[dst] = x.data[src]

    def backward(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[src] += g[dst]

    return Tensor(out, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate their gradients."""
    ids = np.asarray(ids)

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))

    return Tensor(table.data[ids], (table,), backward)


# --- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _binary(a, b)

    def backward(g):
        if b.data.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.data.ndim - 1)), tuple(range(g.ndim))))
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            if b.data.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        a._accum(_unbroadcast(ga, a.shape))
        b._accum(gb)

    return Tensor(a.data @ b.data, (a, b), backward)


def affine(x, W, b=None) -> Tensor:
    """``x @ W + b`` with ``W`` stored (in, out)."""
    y = matmul(x, W)
    return y if b is None else add(y, b)


# --- activations -------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        x._accum(g * out * (1.0 - out))

    return Tensor(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x._accum(g * (1.0 - out * out))

    return Tensor(out, (x,), backward)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    d = x.data
    neg = alpha * np.expm1(np.minimum(d, 0.0))
    out = np.where(d > 0, d, neg)

    def backward(g):
        x._accum(g * np.where(d > 0, 1.0, neg + alpha))

    return Tensor(out, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    d = x.data
    scale = np.where(d > 0, 1.0, slope).astype(d.dtype)

    def backward(g):
        x._accum(g * scale)

    return Tensor(d * scale, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor(out, (x,), backward)


# --- recurrent cell and loss -------------------------------------------------


def lstm_gates(gx: Tensor, h_prev: Tensor, c_prev: Tensor, W_h: Tensor, b: Tensor):
    """One LSTM step given the already-projected input ``gx = x @ W_x``.

    Gate layout along the last axis is (input, forget, cell, output).
    """
    d = h_prev.shape[-1]
    z = add(add(gx, matmul(h_prev, W_h)), b)
    i = sigmoid(z[..., 0:d])
    f = sigmoid(z[..., d : 2 * d])
    g = tanh(z[..., 2 * d : 3 * d])
    o = sigmoid(z[..., 3 * d : 4 * d])
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def lstm_cell(x, h_prev, c_prev, W_x, W_h, b):
    x = as_tensor(x)
    return lstm_gates(matmul(x, W_x), as_tensor(h_prev), as_tensor(c_prev), W_h, b)


def l2_penalty(params: Iterable[Tensor]) -> Tensor:
    terms = [sum_(square(p)) for p in params]
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def bce_l2_loss(pred: Tensor, label, mask, lam: float = 0.0, params=(), eps: float = 1e-7) -> Tensor:
    """Masked mean binary cross-entropy plus ``lam * sum ||theta||^2``."""
    label = np.asarray(label, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=pred.dtype)
    n = mask.sum()
    if n <= 0:
        raise ValueError("loss mask selects no prediction steps")
    y = clip(pred, eps, 1.0 - eps)
    ll = add(mul(log(y), label), mul(log(sub(1.0, y)), 1.0 - label))
    loss = mul(sum_(mul(ll, mask)), -1.0 / n)
    params = list(params)
    if lam and params:
        loss = add(loss, mul(l2_penalty(params), lam))
    return loss


# --- parameters and optimisation -------------------------------------------


class ParamStore:
    """Named trainable tensors with deterministic per-name initialisation."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def uniform(self, name: str, shape, fan_in: int | None = None) -> Tensor:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); ``fan_in`` defaults to ``shape[-2]``."""
        shape = tuple(shape)
        if fan_in is None:
            fan_in = shape[-2] if len(shape) >= 2 else shape[0]
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        data = self._rng(name).uniform(-bound, bound, size=shape).astype(self.dtype)
        return self.add(name, data)

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape, dtype=self.dtype))

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.values())

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.params[k].data = np.array(v, dtype=self.dtype)

    def save(self, path, meta: dict | None = None) -> None:
        header = {
            "version": CHECKPOINT_VERSION,
            "dtype": self.dtype.name,
            "seed": self.seed,
            "params": {k: list(v.shape) for k, v in self.params.items()},
            "meta": meta or {},
        }
        arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
        arrays.update({f"p/{k}": v.data for k, v in self.params.items()})
        # fixed zip timestamps keep identical checkpoints byte-identical
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                with zf.open(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as fh:
                    np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header.get('version')}")
            store = cls(seed=header["seed"], dtype=header["dtype"])
            for name in header["params"]:
                store.add(name, z[f"p/{name}"])
        return store, header["meta"]


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


class Adam:
    def __init__(self, params: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
