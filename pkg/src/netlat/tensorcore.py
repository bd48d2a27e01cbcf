"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them. :func:`backward` runs the
closures in reverse topological order. Sparse matrices only ever appear as
constants (graph operators), never as differentiable values.
"""
from __future__ import annotations

import hashlib
import json
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

LOG_EPS = 1e-7
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=float)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, tuple(parents) if req else (), fn if req else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        if a.requires_grad: a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad: b._accum(_unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        if a.requires_grad: a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad: b._accum(_unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad: a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad: b._accum(_unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad: a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad: b._accum(_unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad: a._accum(g @ b.data.T)
        if b.requires_grad: b._accum(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bw)


def spmm(s: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    if s.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {s.shape} and {x.shape}")
    st = s.T.tocsr()

    def bw(g):
        x._accum(np.asarray(st @ g))
    return _make(np.asarray(s @ x.data), (x,), bw)


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].data.ndim
    for x in xs[1:]:
        if x.data.ndim != xs[0].data.ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.data.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=ax)):
            if x.requires_grad:
                x._accum(part)
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)
    return _make(x.data[idx], (x,), bw)


def gather(x, index: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by an integer index vector."""
    x = as_tensor(x)
    index = np.asarray(index)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accum(full)
    return _make(x.data[index], (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.shape)))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: x._accum(g.T))


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))
    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis, keepdims), 1.0 / count)


def segment_sum(x, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id; output has ``n_segments`` rows."""
    x = as_tensor(x)
    segments = np.asarray(segments)
    if segments.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_sum: {segments.shape[0]} segment ids for {x.shape[0]} rows")
    out = np.zeros((n_segments,) + x.shape[1:])
    np.add.at(out, segments, x.data)
    return _make(out, (x,), lambda g: x._accum(g[segments]))


def segment_mean(x, segments: np.ndarray, n_segments: int) -> Tensor:
    counts = np.bincount(np.asarray(segments), minlength=n_segments).astype(float)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    x = as_tensor(x)
    inv = inv.reshape((-1,) + (1,) * (x.data.ndim - 1))
    return mul(segment_sum(x, segments, n_segments), inv)


def segment_softmax(x, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of the rows of ``x`` within each segment (columnwise for 2-D inputs)."""
    x = as_tensor(x)
    segments = np.asarray(segments)
    if segments.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_softmax: {segments.shape[0]} segment ids for {x.shape[0]} rows")
    mx = np.full((n_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(mx, segments, x.data)
    e = np.exp(x.data - mx[segments])
    z = np.zeros_like(mx)
    np.add.at(z, segments, e)
    out = e / z[segments]

    def bw(g):
        dot = np.zeros_like(mx)
        np.add.at(dot, segments, g * out)
        x._accum(out * (g - dot[segments]))
    return _make(out, (x,), bw)


# ---------------------------------------------------------------- elementwise

def _unary(x, value: np.ndarray, dvalue: Callable[[], np.ndarray]) -> Tensor:
    x = as_tensor(x)
    return _make(value, (x,), lambda g: x._accum(g * dvalue()))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _unary(x, y, lambda: 1.0 - y * y)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _unary(x, y, lambda: y * (1.0 - y))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _unary(x, y, lambda: y)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _unary(x, np.abs(x.data), lambda: np.sign(x.data))


def guarded_log_abs(x, eps: float = LOG_EPS) -> Tensor:
    """log(|x| + eps)."""
    x = as_tensor(x)
    return _unary(x, np.log(np.abs(x.data) + eps), lambda: np.sign(x.data) / (np.abs(x.data) + eps))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _unary(x, np.where(pos, x.data, slope * x.data), lambda: np.where(pos, 1.0, slope))


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.data)
    return _unary(x, y, lambda: 0.5 * (1.0 + np.tanh(0.5 * x.data)))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero outside [lo, hi]."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda: inside.astype(float))


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Parameters listed in ``params`` that the loss does not reach get a zero
    gradient instead of ``None``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = _topo(loss)
        for node in order:
            if node._parents:
                node.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable tensors plus Adam moment estimates."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=float), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the old norm."""
        grads = [t.grad for t in self.params.values() if t.grad is not None]
        norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))
        if norm > max_norm:
            for g in grads:
                g *= max_norm / norm
        return norm

    def n_values(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))

    def adam_step(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                  eps: float = 1e-8) -> None:
        b1, b2 = betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(t.data)
                self._v[name] = np.zeros_like(t.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.params.items():
            out.add(name, t.data.copy())
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ShapeError(f"parameter {k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=float)

    def to_checkpoint(self, config_hash: str, extra: dict | None = None) -> dict:
        out = {
            "format_version": CHECKPOINT_VERSION,
            "config_hash": config_hash,
            "params": [{"name": k, "shape": list(t.shape), "values": t.data.ravel().tolist()}
                       for k, t in self.params.items()],
        }
        if extra:
            out.update(extra)
        return out

    @classmethod
    def from_checkpoint(cls, obj: dict) -> "ParamStore":
        if obj.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {obj.get('format_version')!r}")
        store = cls()
        for p in obj["params"]:
            store.add(p["name"], np.asarray(p["values"], dtype=float).reshape(p["shape"]))
        return store


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
              floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the graph from the current ``.data`` of ``params``.
    Relative error is |a - n| / max(|a|, |n|, floor) per entry.
    """
    for p in params:
        # perturbations below write through a flat view, so the data must be a real array
        p.data = np.ascontiguousarray(p.data, dtype=float)
        p.grad = None
    backward(fn(), params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            a = ga.reshape(-1)[i]
            worst = max(worst, float(np.abs(a - num)) / max(float(np.abs(a)), float(np.abs(num)), floor))
    return worst
