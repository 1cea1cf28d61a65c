"""Dense float64 tensors with a reverse-mode gradient tape.

Usage::

    with Tape() as tape:
        x = tape.watch(Tensor([3.0, 4.0]))
        y = l2norm(x)
    (gx,) = tape.gradient(y, [x])   # -> [0.6, 0.8]

Operations record a node on the innermost active tape whenever at least one
input is tracked. Tensors are immutable; broadcasting is limited to
scalar-times-tensor and the explicit row-wise ``add_bias``.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "Node",
    "no_tape",
    "custom_op",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "scale",
    "add_bias",
    "tsum",
    "mean",
    "relu",
    "tanh",
    "l1",
    "l2norm",
    "sumsq",
    "clamp",
    "concat",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Tensor:
    """Immutable n-dimensional float64 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Records operations in execution order (hence topologically sorted)."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, t) -> Tensor:
        t = _as_tensor(t)
        if id(t) not in self._tracked:
            self._tracked.add(id(t))
            self._leaves.append(t)
        return t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, op, inputs, output, vjp) -> None:
        if any(id(t) in self._tracked for t in inputs):
            self._tracked.add(id(output))
            self.nodes.append(Node(op, tuple(inputs), output, vjp))

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def graph_ops(self, root: Tensor) -> set[str]:
        """Op kinds of every recorded node that ``root`` depends on."""
        needed = {id(root)}
        kinds: set[str] = set()
        for node in reversed(self.nodes):
            if id(node.output) in needed:
                kinds.add(node.op)
                needed.update(id(t) for t in node.inputs)
        return kinds

    def gradient(self, root: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(root)/d(source) for each source; root must be scalar."""
        if root.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        return [
            np.array(grads[id(s)], dtype=np.float64).reshape(s.shape)
            if id(s) in grads
            else np.zeros(s.shape)
            for s in sources
        ]


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording on all active tapes."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def custom_op(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    """Wrap a precomputed value as a tape node with a user-supplied VJP."""
    out = Tensor(value)
    for tape in _ACTIVE:
        tape._record(op, inputs, out, vjp)
    return out


def _same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same("add", a, b)
    return custom_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same("sub", a, b)
    return custom_op("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return custom_op("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same("mul", a, b)
    ad, bd = a.data, b.data
    return custom_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return custom_op("scale", (a,), s * a.data, lambda g: (s * g,))


def matmul(a, b, op: str = "matmul") -> Tensor:
    """Matrix product for 1-D/2-D operands; ``op`` renames the tape node."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(op, a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return custom_op(op, (a, b), ad @ bd, vjp)


def add_bias(x, b) -> Tensor:
    """Add vector ``b`` to every row of ``x`` (last axis must match)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    nd = x.data.ndim
    return custom_op(
        "add_bias",
        (x, b),
        x.data + b.data,
        lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0) if nd > 1 else g),
    )


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return custom_op("sum", (a,), np.sum(a.data), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    return custom_op("mean", (a,), np.mean(a.data), lambda g: (np.full(shape, float(g) / n),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return custom_op("relu", (a,), a.data * mask, lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return custom_op("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def l1(a) -> Tensor:
    """Sum of absolute values; subgradient 0 at 0."""
    a = _as_tensor(a)
    s = np.sign(a.data)
    return custom_op("l1", (a,), np.sum(np.abs(a.data)), lambda g: (float(g) * s,))


def l2norm(a, axis: int | None = None) -> Tensor:
    """Euclidean norm of the whole tensor, or along ``axis``.

    The gradient at a zero vector is defined as 0.
    """
    a = _as_tensor(a)
    ad = a.data
    n = np.sqrt(np.sum(ad * ad, axis=axis, keepdims=axis is not None))
    safe = np.where(n > 0, n, 1.0)
    unit = np.where(n > 0, ad / safe, 0.0)
    out = n if axis is None else np.squeeze(n, axis=axis)

    def vjp(g):
        g = g if axis is None else np.expand_dims(g, axis)
        return (g * unit,)

    return custom_op("l2norm", (a,), out, vjp)


def sumsq(a) -> Tensor:
    """Squared Euclidean norm."""
    a = _as_tensor(a)
    ad = a.data
    return custom_op("sumsq", (a,), np.sum(ad * ad), lambda g: (2.0 * float(g) * ad,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Componentwise clamp; gradient 1 strictly inside (lo, hi), else 0."""
    a = _as_tensor(a)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return custom_op("clamp", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or any(
            p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError("concat", parts[0].shape, p.shape)
    cuts = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return custom_op(
        "concat",
        parts,
        np.concatenate([p.data for p in parts], axis=ax),
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )
