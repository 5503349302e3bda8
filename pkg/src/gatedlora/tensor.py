"""Dense tensors with reverse-mode differentiation.

Every op records its inputs and a backward closure on the output tensor.
``backward`` walks the recorded nodes in exact reverse creation order, which
for a single-threaded forward pass is reverse execution order.  Storage is a
C-ordered numpy array (row-major, explicit shape, no views exposed).

Broadcasting is restricted to a *suffix* rule: the right operand may have a
shape equal to a trailing slice of the left operand's shape (a bias vector
over rows, a positional table over a batch) or be a 0-d scalar.
"""

from __future__ import annotations

import itertools
import json
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, LengthError

_ids = itertools.count()
_state = threading.local()

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _consumed(_g):
    raise ContractError("graph already consumed by a previous backward(); rebuild the forward pass")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=np.float64):
        self.data = np.array(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        t.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        t._id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operators
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self) if isinstance(other, Tensor) else add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(shape):
    raise ContractError(f"item() needs a single-element tensor, got shape {shape}")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _result(arr: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Leaves must have no stale gradient (call ``zero_grad`` first); the graph
    is consumed, so a second call on the same loss raises ContractError.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._backward is _consumed:
        raise ContractError("backward() already called on this loss")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")

    nodes: dict[int, Tensor] = {}
    leaves: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes or t._id in leaves:
            continue
        if t._backward is None:
            leaves[t._id] = t
            continue
        if t._backward is _consumed:
            raise ContractError("graph already consumed by a previous backward(); rebuild the forward pass")
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    for leaf in leaves.values():
        if leaf.grad is not None:
            raise ContractError(f"leaf {leaf.name or leaf._id} already holds a gradient; call zero_grad() first")

    adj: dict[int, np.ndarray] = {loss._id: np.ones((), dtype=np.float64)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = adj.pop(node_id, None)
        if g is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            prev = adj.get(p._id)
            adj[p._id] = pg if prev is None else prev + pg
        node._backward = _consumed
        node._parents = ()

    for leaf_id, leaf in leaves.items():
        g = adj.get(leaf_id)
        if g is None:
            g = np.zeros(leaf.shape)
        leaf.grad = Tensor._wrap(np.asarray(g, dtype=np.float64).reshape(leaf.shape).copy())


# ---------------------------------------------------------------- broadcasting

def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")

    def bw(g):
        return g, _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")

    def bw(g):
        return g, -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def transpose(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select a single position along ``axis`` (the axis is dropped)."""
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(np.ascontiguousarray(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    arrs = [t.data for t in tensors]
    out = np.concatenate(arrs, axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(arrs)))

    return _result(out, tuple(tensors), bw)


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _result(out, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across a's leading axes) or carries exactly
    a's leading axes (batched product).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), bw)


def col_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each column of a 2-D tensor.

    All-zero columns report 1 (with zero gradient) so dividing by the result
    maps them to zero instead of NaN.
    """
    raw = np.sqrt(np.sum(a.data * a.data, axis=0))
    nz = raw > 0
    safe = np.where(nz, raw, 1.0)

    def bw(g):
        return (np.where(nz, a.data / safe, 0.0) * g,)

    return _result(safe, (a,), bw)


# ---------------------------------------------------------------- nonlinearities

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    t = np.tanh(GELU_C * (v + GELU_K * v * v * v))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result(out, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: {b} rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _result(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    checked: int
    failures: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-6, max_elements: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backward() against central differences for every input element.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``max_elements`` caps the number of probed entries per input (chosen by a
    seeded RNG) to keep big models affordable.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit inputs")
        t.zero_grad()
        t.requires_grad = True
    out = f(*inputs)
    backward(out)
    analytic = [t.grad.data.copy() if t.grad is not None else np.zeros(t.shape) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    failures = []
    with no_grad():
        for i, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                fp = f(*inputs).item()
                flat[j] = orig - h
                fm = f(*inputs).item()
                flat[j] = orig
                num = (fp - fm) / (2.0 * h)
                ana = analytic[i].reshape(-1)[j]
                rel = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, rel)
                checked += 1
                if rel > tol:
                    failures.append((i, int(j), float(ana), float(num), float(rel)))
    for t in inputs:
        t.zero_grad()
    return GradCheckReport(worst, tol, checked, failures)


# ---------------------------------------------------------------- serialization

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def write_blob(path: str | Path, arrays: Iterable[tuple[str, np.ndarray, str]]) -> list[dict]:
    """Write named arrays back to back as little-endian floats.

    ``arrays`` yields ``(name, array, dtype)`` with dtype in {float32, float64}.
    Returns the manifest entries ``{name, shape, dtype, offset}``.
    """
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr, dtype in arrays:
            if dtype not in _DTYPES:
                raise FormatError(f"unsupported dtype {dtype!r} for {name}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": dtype, "offset": offset})
            offset += len(raw)
    return entries


def read_blob(path: str | Path, entries: Sequence[dict]) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    out = {}
    for e in entries:
        try:
            name, shape, dtype, offset = e["name"], tuple(e["shape"]), e["dtype"], int(e["offset"])
        except KeyError as exc:
            raise FormatError(f"manifest entry missing key {exc}") from None
        if dtype not in _DTYPES:
            raise FormatError(f"unsupported dtype {dtype!r} for {name}")
        width = np.dtype(_DTYPES[dtype]).itemsize
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * width
        if end > len(buf):
            raise LengthError(f"tensor {name} needs bytes [{offset}, {end}) but blob has {len(buf)}")
        arr = np.frombuffer(buf, dtype=_DTYPES[dtype], count=count, offset=offset)
        out[name] = arr.astype(np.float64).reshape(shape)
    return out


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
