"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the forecaster and its losses
need. Every op stores its parents and a vector-Jacobian closure on the output
node; the resulting graph is the tape, and `backward` replays it in reverse
topological order, accumulating gradients additively at fan-out. Evaluation of
recurrences is sequential by design (no associative scan).

All buffers are contiguous little-endian float64. Ops validate finiteness of
their outputs unless `finite_checks(False)` is active.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NotAScalarError, NumericOverflowError, ShapeError

_GRAD_ENABLED = True
_FINITE_CHECKS = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def finite_checks(enabled: bool):
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 buffer plus the bookkeeping needed for the backward pass."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _vjps: tuple = ()):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjps = _vjps

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every operator routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, reciprocal(as_tensor(other)))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*parents: Tensor) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents)


def _make(data: np.ndarray, parents: tuple, vjps: tuple, op: str) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericOverflowError(f"{op} produced a non-finite value")
    if _tracked(*parents):
        return Tensor(data, requires_grad=False, _parents=parents, _vjps=vjps)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(g, b.data.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(-g, b.data.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.data.shape),
                  lambda g: _unbroadcast(g * a.data, b.data.shape)), "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data
    return _make(out, (a, b),
                 (lambda g: g @ b.data.T,
                  lambda g: a.data.T @ g), "matmul")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), (lambda g: g / a.data,), "log")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), (lambda g: g * expit(a.data),), "softplus")


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    out = a.data * s
    return _make(out, (a,), (lambda g: g * (s * (1.0 + a.data * (1.0 - s))),), "silu")


def square(a) -> Tensor:
    a = as_tensor(a)
    out = a.data * a.data
    return _make(out, (a,), (lambda g: g * (2.0 * a.data),), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    # subgradient at 0 is unbounded; clamp so a zero residual cannot emit inf
    return _make(out, (a,), (lambda g: g * (0.5 / np.maximum(out, 1e-150)),), "sqrt")


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return _make(out, (a,), (lambda g: -g * out * out,), "reciprocal")


# ---------------------------------------------------------------------------
# reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(x % a.data.ndim for x in ax)
            shape = [1 if i in ax else s for i, s in enumerate(a.data.shape)]
            gg = np.reshape(g, shape)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(np.asarray(out, dtype=np.float64), (a,), (vjp,), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[x % a.data.ndim] for x in ax]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), (lambda g: g.reshape(a.data.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _make(out, (a,), (lambda g: np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), (lambda g: _unbroadcast(g, a.data.shape),), "broadcast")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return vjp

    return _make(out, tuple(ts), tuple(make_vjp(i) for i in range(len(ts))), "concat")


def _has_array_index(key) -> bool:
    if isinstance(key, (np.ndarray, list)):
        return True
    if isinstance(key, tuple):
        return any(isinstance(k, (np.ndarray, list)) for k in key)
    return False


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    fancy = _has_array_index(key)

    def vjp(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, key, g)  # advanced indexing may repeat positions
        else:
            full[key] += g
        return full

    return _make(np.ascontiguousarray(out), (a,), (vjp,), "slice")


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by `gain`."""
    x = as_tensor(x)
    ms = mean(square(x), axis=-1, keepdims=True)
    inv = reciprocal(sqrt(add(ms, eps)))
    return mul(mul(x, inv), gain)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> dict:
    """Populate .grad for every tensor reachable from `loss` that wants one.

    Traverses the tape in exact reverse topological order. Grads in the
    subgraph are zeroed first, so repeated calls after a fresh forward are
    idempotent. Returns {leaf tensor: grad} for requires_grad leaves.
    """
    if loss.data.size != 1:
        raise NotAScalarError(f"backward needs a scalar, got shape {loss.shape}")

    # iterative DFS: rollouts can produce graphs deeper than the recursion limit
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in topo:
        if node.requires_grad or node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(topo):
        if node.grad is None or not node._parents:
            continue
        g = node.grad
        for parent, vjp in zip(node._parents, node._vjps):
            if parent.requires_grad or parent._parents:
                contrib = vjp(g)
                if parent.grad is None:
                    # copy: a vjp may hand back a view of the child's grad
                    parent.grad = np.array(contrib)
                else:
                    parent.grad += contrib

    for t in topo:
        if (t.requires_grad or t._parents) and t.grad is None:
            t.grad = np.zeros_like(t.data)
    return {t: t.grad for t in topo if t.requires_grad and not t._parents}


# ---------------------------------------------------------------------------
# optimizer

def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, dict]:
    """One Adam update with bias correction on plain float64 arrays.

    `state` holds {"t": int, "m": {name: arr}, "v": {name: arr}}; pass {} to
    start. Returns (new_params, new_state) without mutating the inputs.
    """
    if not state:
        state = {"t": 0,
                 "m": {k: np.zeros_like(v) for k, v in params.items()},
                 "v": {k: np.zeros_like(v) for k, v in params.items()}}
    t = state["t"] + 1
    new_m, new_v, new_p = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        new_m[k], new_v[k] = m, v
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return new_p, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """In-place Adam over a dict of parameter Tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict = {}

    def step(self):
        values = {k: t.data for k, t in self.params.items()}
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in self.params.items()}
        new_values, self.state = adam_step(values, grads, self.state, self.lr,
                                           self.beta1, self.beta2, self.eps)
        for k, t in self.params.items():
            t.data = new_values[k]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most `max_norm`."""
    ts = [t for t in params if t.grad is not None]
    total = float(np.sqrt(sum(float((t.grad ** 2).sum()) for t in ts)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for t in ts:
            t.grad *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoint i/o: concatenated little-endian float64 buffers + JSON manifest

def save_tensors(path_prefix: str, named: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write `<prefix>.bin` (raw '<f8' buffers) and `<prefix>.json` (manifest)."""
    entries = []
    offset = 0
    with open(path_prefix + ".bin", "wb") as fh:
        for name, arr in named.items():
            buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            fh.write(buf)
            offset += len(buf)
    manifest = {"dtype": "<f8", "tensors": entries, "meta": meta or {}}
    with open(path_prefix + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_tensors(path_prefix: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path_prefix + ".json") as fh:
        manifest = json.load(fh)
    with open(path_prefix + ".bin", "rb") as fh:
        raw = fh.read()
    named = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        named[entry["name"]] = arr.astype(np.float64).copy()
    return named, manifest.get("meta", {})
