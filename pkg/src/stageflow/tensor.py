"""Small dense n-d float array (rank <= 3) with broadcasting, slicing, reductions.

This is the value domain of the reward expression language. Tensors are
immutable: every operation copies. Booleans are stored as 0.0/1.0 with a
``kind`` tag so masks multiply directly with numeric tensors.
"""

from __future__ import annotations

import numpy as np

from .errors import TensorError

MAX_RANK = 3

NUMERIC = "numeric"
BOOLEAN = "boolean"

_ARITH_OPS = {"+", "-", "*", "/"}
_CMP_OPS = {"<", ">", "<=", ">=", "==", "!="}
_BOOL_OPS = {"&", "|"}


class Tensor:
    __slots__ = ("_data", "kind")

    def __init__(self, data, kind: str = NUMERIC):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise TensorError("SHAPE_MISMATCH", f"rank {arr.ndim} exceeds max rank {MAX_RANK}")
        if kind not in (NUMERIC, BOOLEAN):
            raise ValueError(f"bad kind {kind!r}")
        if kind == BOOLEAN:
            bad = (arr != 0.0) & (arr != 1.0)
            if bad.any():
                raise TensorError("SHAPE_MISMATCH", "boolean tensor may only contain 0.0/1.0")
        arr.setflags(write=False)
        self._data = arr
        self.kind = kind

    # -- construction helpers -------------------------------------------------
    @classmethod
    def scalar(cls, x: float) -> "Tensor":
        return cls(float(x))

    @classmethod
    def boolean(cls, data) -> "Tensor":
        return cls(np.asarray(data, dtype=bool).astype(np.float64), kind=BOOLEAN)

    # -- views ----------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def rank(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def to_numpy(self) -> np.ndarray:
        return self._data.copy()

    def tolist(self):
        return self._data.tolist()

    def item(self) -> float:
        if self.rank != 0:
            raise TensorError("SHAPE_MISMATCH", f"item() on rank-{self.rank} tensor")
        return float(self._data)

    def is_true(self) -> bool:
        return self.rank == 0 and float(self._data) != 0.0

    def __repr__(self):
        return f"Tensor({self._data.tolist()!r}, kind={self.kind!r})"

    def __eq__(self, other):
        return (
            isinstance(other, Tensor)
            and self.kind == other.kind
            and self.shape == other.shape
            and bool(np.array_equal(self._data, other._data))
        )

    def __hash__(self):
        return hash((self.kind, self.shape, self._data.tobytes()))


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Broadcast two shapes; a size-1 axis stretches, missing leading axes are
    prepended as size 1. Raises SHAPE_MISMATCH when axes differ and neither is 1."""
    out = []
    for x, y in zip(a[::-1], b[::-1]):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise TensorError("SHAPE_MISMATCH", f"cannot broadcast {a} with {b}")
    longer = a if len(a) >= len(b) else b
    out.extend(longer[: len(longer) - len(out)][::-1])
    return tuple(out[::-1])


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise op. Comparison/boolean ops yield boolean kind.
    Division by zero is an error, never infinity."""
    shape = broadcast_shape(a.shape, b.shape)
    if len(shape) > MAX_RANK:
        raise TensorError("SHAPE_MISMATCH", f"broadcast rank {len(shape)} exceeds {MAX_RANK}")
    x, y = a._data, b._data
    if op == "+":
        return Tensor(x + y)
    if op == "-":
        return Tensor(x - y)
    if op == "*":
        return Tensor(x * y)
    if op == "/":
        yb = np.broadcast_to(y, shape)
        if (yb == 0.0).any():
            raise TensorError("DIVISION_BY_ZERO", "division by zero in elementwise /")
        return Tensor(x / y)
    if op in _CMP_OPS:
        fn = {
            "<": np.less, ">": np.greater, "<=": np.less_equal,
            ">=": np.greater_equal, "==": np.equal, "!=": np.not_equal,
        }[op]
        return Tensor.boolean(fn(x, y))
    if op in _BOOL_OPS:
        xa = x != 0.0
        ya = y != 0.0
        return Tensor.boolean(xa & ya if op == "&" else xa | ya)
    raise TensorError("SHAPE_MISMATCH", f"unknown elementwise op {op!r}")


def negate(a: Tensor) -> Tensor:
    return Tensor(-a._data)


def index(t: Tensor, spec) -> Tensor:
    """Multi-axis indexing with integers, slices, full slices and one ellipsis.

    Integer axes are removed; slice axes are retained with Python-clipped
    length. All indexing copies.
    """
    items = list(spec) if isinstance(spec, (tuple, list)) else [spec]
    n_ell = sum(1 for it in items if it is Ellipsis)
    if n_ell > 1:
        raise TensorError("BAD_ELLIPSIS", "more than one ellipsis in index")
    explicit = len(items) - n_ell
    if explicit > t.rank:
        raise TensorError(
            "INDEX_OUT_OF_BOUNDS",
            f"index arity {explicit} exceeds rank {t.rank}",
        )
    # expand ellipsis into full slices
    if n_ell:
        pos = items.index(Ellipsis)
        fill = [slice(None)] * (t.rank - explicit)
        items = items[:pos] + fill + items[pos + 1:]
    key = []
    for axis, it in enumerate(items):
        if isinstance(it, slice):
            key.append(it)
        else:
            i = int(it)
            n = t.shape[axis]
            if not (-n <= i < n):
                raise TensorError(
                    "INDEX_OUT_OF_BOUNDS",
                    f"index {i} out of bounds for axis {axis} of length {n}",
                )
            key.append(i)
    out = t._data[tuple(key)]
    return Tensor(np.array(out, dtype=np.float64), kind=t.kind)


def reduce(t: Tensor, kind: str) -> Tensor:
    """sum / sum_of_squares reduce to a scalar; l2/l1 reduce the last axis only
    (abs of a scalar for rank 0); abs is elementwise."""
    x = t._data
    if kind == "sum":
        return Tensor(float(x.sum()))
    if kind == "sum_of_squares":
        return Tensor(float((x * x).sum()))
    if kind == "l2_last_axis":
        if t.rank == 0:
            return Tensor(abs(float(x)))
        return Tensor(np.sqrt((x * x).sum(axis=-1)))
    if kind == "l1_last_axis":
        if t.rank == 0:
            return Tensor(abs(float(x)))
        return Tensor(np.abs(x).sum(axis=-1))
    if kind == "abs":
        return Tensor(np.abs(x), kind=t.kind)
    raise TensorError("SHAPE_MISMATCH", f"unknown reduce kind {kind!r}")


def total_sum(t: Tensor) -> float:
    """Collapse any remaining tensor to a scalar by summation."""
    return float(t._data.sum())


def select(condition: Tensor, if_true: Tensor, if_false: Tensor) -> Tensor:
    """Elementwise select with broadcasting (the `binary` primitive's core)."""
    shape = broadcast_shape(
        broadcast_shape(condition.shape, if_true.shape), if_false.shape
    )
    if len(shape) > MAX_RANK:
        raise TensorError("SHAPE_MISMATCH", f"broadcast rank {len(shape)} exceeds {MAX_RANK}")
    return Tensor(np.where(condition._data != 0.0, if_true._data, if_false._data))
