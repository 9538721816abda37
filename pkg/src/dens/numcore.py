"""Dense float64 tensors with an eager reverse-mode tape.

Every primitive computes its value with numpy, validates shapes and
finiteness, and - when a :class:`Tape` is active and one of its inputs is
grad-tracked - records a node holding a vector-Jacobian closure.  Calling
:func:`backward` on a scalar replays the nodes in reverse order.

Outside an active tape nothing is recorded, which makes tape-less code the
"no-grad" evaluation path.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse as _sparse
from scipy import special as _special

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "backward", "grad_check", "primitive_op_set", "tensor", "as_tensor",
]

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, primitive: str, msg: str | None = None):
        self.primitive = primitive
        super().__init__(msg or f"non-finite value produced by primitive '{primitive}'")


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array, optionally tracked for differentiation."""

    __slots__ = ("value", "requires_grad", "node", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.value, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.value)

    # identity semantics: tensors are used as dict keys in gradient maps
    __hash__ = object.__hash__

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("name", "inputs", "output", "vjp", "tape")

    def __init__(self, name, inputs, output, vjp, tape):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.tape = tape


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside the block with a
    grad-tracked input are appended in evaluation order, which is already a
    topological order of the computation graph.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, retain: bool = False) -> dict[Tensor, np.ndarray]:
        return backward(loss, retain=retain, tape=self)


def _current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


CHECK_FINITE = True


def _emit(name: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(value).all():
        raise NonFiniteError(name)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.node = None
    out.requires_grad = False
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                out.node = _Node(name, tuple(inputs), out, vjp, tape)
                tape.nodes.append(out.node)
                break
    return out


def backward(loss: Tensor, retain: bool = False, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Return d(loss)/d(leaf) for every grad-tracked leaf reachable from ``loss``.

    The tape is marked consumed afterwards unless ``retain`` is set, in which
    case it can be replayed (e.g. to check bit-identical gradients).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("loss must be a Tensor")
    if loss.value.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            return {loss: np.ones_like(loss.value)}
        if tape is not None and tape.consumed:
            raise TapeError("tape already consumed by backward()")
        return {}
    owner = loss.node.tape
    if tape is not None and owner is not tape:
        raise TapeError("loss was not recorded on this tape")
    if owner.consumed:
        raise TapeError("loss was recorded on a tape that has been consumed")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Tensor] = {}
    nodes = owner.nodes
    stop = nodes.index(loss.node)
    for node in reversed(nodes[: stop + 1]):
        g = adjoints.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.node is None:
                leaves[key] = inp
            prev = adjoints.get(key)
            adjoints[key] = gi if prev is None else prev + gi
    if not retain:
        owner.consumed = True
        owner.nodes = []
    return {t: adjoints[k] for k, t in leaves.items()}


# --------------------------------------------------------------------------
# primitive registry

PRIMITIVES: dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn
    return deco


def primitive_op_set() -> dict[str, Callable]:
    """Catalogue of differentiable primitives, keyed by name."""
    return dict(PRIMITIVES)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


@_register("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@_register("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


@_register("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


@_register("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def vjp(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb
    return _emit("div", out, (a, b), vjp)


@_register("scale")
def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.value * c, (a,), lambda g: (g * c,))


@_register("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim < 1 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = av @ bv

    def vjp(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if a.requires_grad else None
            gb = _unbroadcast(np.einsum("...i,...ij->...j", g, av), bv.shape) if b.requires_grad else None
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb
    return _emit("matmul", out, (a, b), vjp)


def _parse_einsum(spec: str, n: int) -> tuple[list[str], str]:
    if "->" not in spec:
        raise ValueError("einsum spec must be explicit ('ij,jk->ik')")
    lhs, rhs = spec.replace(" ", "").split("->")
    subs = lhs.split(",")
    if len(subs) != n:
        raise ValueError(f"einsum spec {spec!r} expects {len(subs)} operands, got {n}")
    return subs, rhs


_PATHS: dict = {}


def _einsum(spec: str, arrays: list[np.ndarray]) -> np.ndarray:
    if len(arrays) < 3:
        return np.einsum(spec, *arrays)
    key = (spec,) + tuple(a.shape for a in arrays)
    path = _PATHS.get(key)
    if path is None:
        path = _PATHS[key] = np.einsum_path(spec, *arrays, optimize="greedy")[0]
    return np.einsum(spec, *arrays, optimize=path)


@_register("einsum")
def einsum(spec: str, *operands) -> Tensor:
    """Contraction over shared indices; the adjoint is itself an einsum."""
    ts = [as_tensor(o) for o in operands]
    subs, rhs = _parse_einsum(spec, len(ts))
    dims: dict[str, int] = {}
    for s, t in zip(subs, ts):
        if len(s) != t.ndim:
            raise ShapeError(f"einsum: operand {s!r} has shape {t.shape}")
        for ch, n in zip(s, t.shape):
            if dims.setdefault(ch, n) != n:
                raise ShapeError(f"einsum: index {ch!r} has sizes {dims[ch]} and {n} "
                                 f"(shapes {[x.shape for x in ts]})")
    vals = [t.value for t in ts]
    out = _einsum(spec, vals)

    def vjp(g):
        grads = []
        for i, (s, t) in enumerate(zip(subs, ts)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(subs[j], vals[j]) for j in range(len(ts)) if j != i]
            avail = set(rhs).union(*[set(o[0]) for o in others])
            target = "".join(ch for ch in s if ch in avail)
            spec_i = ",".join([rhs] + [o[0] for o in others]) + "->" + target
            gi = _einsum(spec_i, [g] + [o[1] for o in others])
            if target != s:
                shape = [dims[ch] if ch in target else 1 for ch in s]
                order = [target.index(ch) for ch in s if ch in target]
                gi = np.broadcast_to(gi.transpose(order).reshape(shape), t.shape).copy()
            grads.append(gi)
        return tuple(grads)
    return _emit("einsum", out, ts, vjp)


def contract(a, b, spec: str) -> Tensor:
    """Batched contraction over one shared index, e.g. ``'bij,bjk->bik'``."""
    return einsum(spec, a, b)


@_register("sum")
def sum(a, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(shape, g, dtype=DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _emit("sum", np.asarray(out, dtype=DTYPE), (a,), vjp)


@_register("mean")
def mean(a, axis: int | tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis), 1.0 / n)


def _check_index(name: str, idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"{name}: index list must be a 1-D integer array, got {idx.dtype} {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{name}: index out of range [0, {n})")
    return idx


def _index_add(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[idx[r]] += values[r] for every row r (duplicates accumulate)."""
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n).astype(DTYPE)
    flat = values.reshape(values.shape[0], -1)
    return np.asarray(_scatter_matrix(idx, n) @ flat).reshape((n,) + values.shape[1:])


_SCATTER_CACHE: list = []


def _scatter_matrix(idx: np.ndarray, n: int):
    # the same index array is scattered over several times per step
    for key, size, mat in _SCATTER_CACHE:
        if key is idx and size == n:
            return mat
    mat = _sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
    _SCATTER_CACHE.insert(0, (idx, n, mat))
    del _SCATTER_CACHE[8:]
    return mat


@_register("gather")
def gather(a, idx) -> Tensor:
    """Rows of ``a`` selected by ``idx`` along axis 0."""
    a = as_tensor(a)
    idx = _check_index("gather", idx, a.shape[0])
    shape = a.shape

    return _emit("gather", a.value[idx], (a,), lambda g: (_index_add(idx, g, shape[0]),))


@_register("scatter_add")
def scatter_add(a, idx, n: int) -> Tensor:
    """Sum rows of ``a`` into ``n`` buckets given by ``idx``; adjoint is gather."""
    a = as_tensor(a)
    idx = _check_index("scatter_add", idx, n)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_add: index shape {idx.shape} vs values shape {a.shape}")
    out = _index_add(idx, a.value, n)
    return _emit("scatter_add", out, (a,), lambda g: (g[idx],))


@_register("sqrt")
def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)

    def vjp(g):
        # subgradient 0 at sqrt(0) keeps all-zero blocks finite
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g * 0.5 / out, 0.0),)
    return _emit("sqrt", out, (a,), vjp)


@_register("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


@_register("cos")
def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _emit("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


@_register("abs")
def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    av = a.value
    return _emit("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


_sigmoid = _special.expit


@_register("sigmoid")
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.value)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


@_register("silu")
def silu(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    s = _sigmoid(av)
    return _emit("silu", av * s, (a,), lambda g: (g * s * (1.0 + av * (1.0 - s)),))


@_register("norm")
def norm(a) -> Tensor:
    """L2 norm over the last axis."""
    a = as_tensor(a)
    av = a.value
    out = np.sqrt((av * av).sum(axis=-1))

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(out[..., None] > 0, av / out[..., None], 0.0)
        return (g[..., None] * unit,)
    return _emit("norm", out, (a,), vjp)


@_register("reshape")
def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


@_register("concat")
def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


@_register("getitem")
def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)
    return _emit("getitem", np.array(a.value[index], dtype=DTYPE), (a,), vjp)


def register_primitive(name: str, fn: Callable) -> None:
    """Add a fused primitive defined elsewhere (its body must call ``emit``)."""
    PRIMITIVES[name] = fn


emit = _emit


# --------------------------------------------------------------------------
# finite-difference checking

def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max over elements of |analytic - central difference| / max(1, |central difference|)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=DTYPE)
    leaf = Tensor(x.copy(), requires_grad=True)
    with Tape():
        y = f(leaf)
    grads = backward(y)
    analytic = grads.get(leaf, np.zeros_like(x))
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
