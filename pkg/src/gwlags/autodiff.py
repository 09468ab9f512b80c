"""Minimal dense reverse-mode autodiff on float64 numpy arrays.

Each primitive returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
that implicit tape in reverse topological order.  Shapes are explicit: the
only broadcasting allowed is a scalar operand or a 1-D bias added to the
last axis of a 2-D tensor.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

CHECKPOINT_SCHEMA = 1

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_binary(a: Tensor, b: Tensor, op: str) -> str:
    """Classify the operand layout: 'same', 'bias' (b is a row bias) or 'scalar'."""
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0:
        return "scalar_b"
    if a.data.ndim == 0:
        return "scalar_a"
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return "bias"
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_like(g: np.ndarray, layout: str, which: str) -> np.ndarray:
    if layout == "same":
        return g
    if layout == "bias":
        return g if which == "a" else g.sum(axis=0)
    if (layout == "scalar_b" and which == "b") or (layout == "scalar_a" and which == "a"):
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    layout = _check_binary(a, b, "add")

    def backward(g):
        return _reduce_like(g, layout, "a"), _reduce_like(g, layout, "b")

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    layout = _check_binary(a, b, "sub")

    def backward(g):
        return _reduce_like(g, layout, "a"), -_reduce_like(g, layout, "b")

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    layout = _check_binary(a, b, "mul")

    def backward(g):
        return (_reduce_like(g * b.data, layout, "a"),
                _reduce_like(g * a.data, layout, "b"))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    layout = _check_binary(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_reduce_like(g / b.data, layout, "a"),
                _reduce_like(-g * out / b.data, layout, "b"))

    return _result(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def linear_map(m, x) -> Tensor:
    """``m @ x`` for a constant (dense or scipy.sparse) matrix ``m``."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ValueError(f"linear_map: incompatible shapes {m.shape} and {x.shape}")
    out = np.asarray(m @ x.data)

    def backward(g):
        mt = m.T.tocsr() if sp.issparse(m) else m.T
        return (np.asarray(mt @ g),)

    return _result(out, (x,), backward)


def sum_(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(x.data.sum(axis=axis), (x,), backward)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    # s(1 - s) = z / (1 + z)^2 without the cancellation in 1 - s once s rounds to 1
    slope = z / (1.0 + z) ** 2

    def backward(g):
        return (g * slope,)

    return _result(out, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input; clamp first")

    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward)


def log2(x) -> Tensor:
    return mul(log(x), 1.0 / np.log(2.0))


def abs_(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g * np.sign(x.data),)

    return _result(np.abs(x.data), (x,), backward)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the clip is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (g * inside,)

    return _result(np.clip(x.data, lo, hi), (x,), backward)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(xs)))

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, backward)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


def l1_normalize(x, budget, segments: np.ndarray | None = None,
                 eps: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Rescale nonnegative ``x`` so each segment sums to its budget.

    ``segments`` assigns each leading-axis row to a segment (default: one
    segment).  ``budget`` is a scalar or one value per segment.  Segments
    whose L1 mass is below ``eps`` fall back to a uniform split and pass no
    gradient.  Returns the tensor and a boolean fallback flag per segment.
    """
    x = as_tensor(x)
    n = x.shape[0]
    seg = np.zeros(n, dtype=np.int64) if segments is None else np.asarray(segments)
    nseg = int(seg.max()) + 1 if n else 0
    budget = np.broadcast_to(np.asarray(budget, dtype=np.float64), (nseg,))
    flat = x.data.reshape(n, -1).sum(axis=1)
    mass = np.bincount(seg, weights=np.abs(flat), minlength=nseg)
    counts = np.bincount(seg, minlength=nseg) * (x.data.size // max(n, 1))
    fallback = mass < eps
    safe_mass = np.where(fallback, 1.0, mass)
    scale = (budget / safe_mass)[seg]
    col = (slice(None),) + (None,) * (x.data.ndim - 1)
    out = x.data * scale[col]
    uniform = (budget / np.maximum(counts, 1))[seg]
    out = np.where(fallback[seg][col], np.broadcast_to(uniform[col], x.shape), out)
    live = (~fallback[seg])[col]

    def backward(g):
        # d out_i / d x_j = scale (delta_ij - out_i / budget) within a segment
        dot = np.bincount(seg, weights=(g * out).reshape(n, -1).sum(axis=1), minlength=nseg)
        corr = (dot / np.where(fallback, 1.0, budget))[seg]
        return ((g - corr[col]) * scale[col] * live,)

    return _result(out, (x,), backward), fallback


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None) -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "meta": meta or {},
        "params": {name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                   for name, t in params.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    params = {name: Tensor(np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]),
                           requires_grad=True)
              for name, entry in doc["params"].items()}
    return params, doc.get("meta", {})
