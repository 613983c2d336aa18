"""Tensor container, operation tape and the reverse-mode sweep."""
from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Sequence

import numpy as np

from ..exceptions import NonFiniteValue, NonScalarRoot, TapeReused

_DTYPE = np.float32 if os.environ.get("TAFM_FLOAT32") == "1" else np.float64
_CHECK_FINITE = True

_local = threading.local()


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


def set_default_dtype(dtype) -> None:
    """Switch between the 64-bit verification build and the 32-bit fast build."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextlib.contextmanager
def use_dtype(dtype):
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    old = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


class Tape:
    """Ordered record of the operations executed since the last backward sweep.

    Every recorded node stores its output tensor, its input tensors and a
    function mapping the output adjoint to one adjoint per input. Nodes are
    appended in execution order, so inputs always precede their consumers.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward: Callable) -> None:
        if self.consumed:
            raise TapeReused("cannot record on a consumed tape")
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append((out, parents, backward))


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    """Drop the current thread's tape without running backward."""
    tape = getattr(_local, "tape", None)
    if tape is not None:
        tape.consumed = True
        tape.nodes.clear()
    _local.tape = None


def _check_finite(arr: np.ndarray) -> None:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteValue("non-finite value produced")


class Tensor:
    """Dense channels-last array with an optional gradient.

    Leaves are created directly (``Tensor(data, requires_grad=True)``); every
    other tensor is the output of an op and is linked to the tape that
    recorded it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        _check_finite(arr)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        out._index = -1
        out.name = None
        return out

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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_DTYPE), False)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result and record it when any input needs a gradient."""
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs)
    if needs:
        tape = current_tape()
        for p in parents:
            if p._tape is not None and p._tape is not tape:
                raise TapeReused("input belongs to a consumed or foreign tape")
        tape.record(out, tuple(parents), backward_fn)
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf.

    Consumes the tape that produced ``root``; a second call raises TapeReused.
    """
    if root.data.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    seed = np.ones_like(root.data)
    tape = root._tape
    if tape is None:
        if root.requires_grad:
            root.grad = seed if root.grad is None else root.grad + seed
        return
    if tape.consumed:
        raise TapeReused("tape already consumed by a previous backward pass")

    adjoints: dict[int, np.ndarray] = {root._index: seed}
    nodes = tape.nodes
    for idx in range(root._index, -1, -1):
        g = adjoints.pop(idx, None)
        if g is None:
            continue
        out, parents, fn = nodes[idx]
        grads = fn(g)
        for p, pg in zip(parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                if pg.shape != p.data.shape:
                    pg = np.broadcast_to(pg, p.data.shape)
                p.grad = np.array(pg, copy=True) if p.grad is None else p.grad + pg
            else:
                prev = adjoints.get(p._index)
                adjoints[p._index] = pg if prev is None else prev + pg
    tape.consumed = True
    tape.nodes.clear()
    if getattr(_local, "tape", None) is tape:
        _local.tape = None
