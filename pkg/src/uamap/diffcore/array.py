"""Dense differentiable arrays and the reverse-mode tape.

A ``Tape`` records primitive operations in creation order while it is the
active context.  ``Tape.backward`` replays the records once, in reverse,
accumulating adjoints into ``DiffArray.grad`` for every array flagged
``requires_grad``.  A tape is single-use: re-running backward without
re-recording raises.

Tapes are confined to one thread of execution per training step; the active
tape is a plain module-level stack.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..validation import ContractViolation, NumericalError

_TAPE_STACK: List["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class DiffArray:
    """A dense float64 array, optionally linked into the active tape.

    ``values`` is the payload, ``grad`` the accumulated adjoint (zeros until
    a backward pass touches it).  ``node_id`` is set only for arrays produced
    by a recorded operation; leaves keep ``None``.
    """

    __slots__ = ("values", "_grad", "requires_grad", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractViolation(
                f"item(): array has {self.values.size} elements, expected 1"
            )
        return float(self.values.reshape(()))

    def detach(self) -> "DiffArray":
        """A tape-free constant copy of the current values."""
        return DiffArray(self.values.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{flag})"

    # -- operator sugar (delegates to ops) ------------------------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.subtract(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.subtract(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.divide(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    @property
    def T(self) -> "DiffArray":
        from . import ops

        return ops.transpose(self)

    def reshape(self, *shape) -> "DiffArray":
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: DiffArray, backward: Callable):
        self.out = out
        self.backward = backward


class Tape:
    """Append-only record of primitive operations for one reverse pass."""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: DiffArray, backward: Callable) -> None:
        out.node_id = len(self._nodes)
        self._nodes.append(_Node(out, backward))

    def backward(self, root: DiffArray) -> None:
        """Propagate d(root)/d(leaf) into every requires_grad leaf.

        ``root`` must be scalar-sized and produced on this tape.
        """
        if self._consumed:
            raise ContractViolation(
                "tape already consumed; record a fresh tape before backward"
            )
        self._consumed = True
        if root.size != 1:
            raise ContractViolation(
                f"backward root must be scalar-sized, got shape {root.shape}"
            )
        if not np.all(np.isfinite(root.values)):
            raise NumericalError("backward root is non-finite")

        grads: dict = {id(root): np.ones_like(root.values)}
        owners: dict = {id(root): root}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            owners.pop(id(node.out), None)
            if g is None:
                continue
            for arr, contrib in node.backward(g):
                if not arr.requires_grad:
                    continue
                key = id(arr)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
                    owners[key] = arr
        # whatever is left never appeared as a node output: these are leaves
        for key, g in grads.items():
            leaf = owners[key]
            if leaf.requires_grad:
                leaf._grad = leaf.grad + g


def as_diff(x) -> DiffArray:
    """Wrap scalars / ndarrays as constant DiffArrays; pass DiffArrays through."""
    if isinstance(x, DiffArray):
        return x
    return DiffArray(np.asarray(x, dtype=np.float64))


def record_op(
    out_values: np.ndarray,
    inputs: Sequence[DiffArray],
    backward: Callable,
) -> DiffArray:
    """Create the output array of a primitive and register it on the tape.

    ``backward(out_grad) -> [(input, grad_contribution), ...]``.  The node is
    recorded only when a tape is active and some input requires gradient.
    """
    needs = any(a.requires_grad for a in inputs)
    out = DiffArray(out_values, requires_grad=needs)
    tape = active_tape()
    if tape is not None and needs:
        tape.record(out, backward)
    return out
