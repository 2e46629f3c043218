"""Primitive differentiable operations.

Implicit broadcasting is restricted to leading-axis expansion: two operands
conform when their shapes are equal or one shape is a trailing suffix of the
other.  Anything else needs an explicit ``reshape``/``broadcast_to``, which
keeps every adjoint rule auditable.
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from ..validation import ContractViolation, DomainError
from .array import DiffArray, as_diff, record_op


def _conform(name: str, a: DiffArray, b: DiffArray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    shorter, longer = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(shorter) == len(longer) or longer[len(longer) - len(shorter):] != shorter:
        raise ContractViolation(
            f"{name}: shapes {sa} and {sb} do not conform "
            "(equal or leading-axis broadcast required)"
        )


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing expanded leading axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- arithmetic ----------------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _conform("add", a, b)
    return record_op(
        a.values + b.values,
        (a, b),
        lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))],
    )


def subtract(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _conform("subtract", a, b)
    return record_op(
        a.values - b.values,
        (a, b),
        lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))],
    )


def multiply(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _conform("multiply", a, b)
    return record_op(
        a.values * b.values,
        (a, b),
        lambda g: [
            (a, _unbroadcast(g * b.values, a.shape)),
            (b, _unbroadcast(g * a.values, b.shape)),
        ],
    )


def divide(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    _conform("divide", a, b)
    if np.any(b.values <= 0.0):
        raise DomainError("divide: non-positive denominator")
    inv = 1.0 / b.values
    return record_op(
        a.values * inv,
        (a, b),
        lambda g: [
            (a, _unbroadcast(g * inv, a.shape)),
            (b, _unbroadcast(-g * a.values * inv * inv, b.shape)),
        ],
    )


def scale(a, factor: float) -> DiffArray:
    a = as_diff(a)
    factor = float(factor)
    return record_op(a.values * factor, (a,), lambda g: [(a, g * factor)])


def matmul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul: incompatible 2-D shapes {a.shape} and {b.shape}"
        )
    return record_op(
        a.values @ b.values,
        (a, b),
        lambda g: [(a, g @ b.values.T), (b, a.values.T @ g)],
    )


# -- shape manipulation ----------------------------------------------------------


def transpose(a) -> DiffArray:
    a = as_diff(a)
    if len(a.shape) != 2:
        raise ContractViolation(f"transpose: expected 2-D, got shape {a.shape}")
    return record_op(a.values.T.copy(), (a,), lambda g: [(a, g.T)])


def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    shape = tuple(shape)
    old = a.shape
    return record_op(
        a.values.reshape(shape), (a,), lambda g: [(a, g.reshape(old))]
    )


def broadcast_to(a, shape) -> DiffArray:
    a = as_diff(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.values, shape)
    except ValueError:
        raise ContractViolation(
            f"broadcast_to: cannot broadcast {a.shape} to {shape}"
        ) from None
    return record_op(
        np.ascontiguousarray(out), (a,), lambda g: [(a, _unbroadcast(g, a.shape))]
    )


def concatenate(arrays: Sequence, axis: int = 0) -> DiffArray:
    arrays = [as_diff(a) for a in arrays]
    if not arrays:
        raise ContractViolation("concatenate: empty input list")
    values = np.concatenate([a.values for a in arrays], axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for a, lo, hi in zip(arrays, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            pieces.append((a, g[tuple(index)]))
        return pieces

    return record_op(values, arrays, backward)


def gather_rows(a, indices) -> DiffArray:
    """Select rows of a 2-D array; adjoint scatter-adds back."""
    a = as_diff(a)
    if len(a.shape) != 2:
        raise ContractViolation(f"gather_rows: expected 2-D, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.values)
        np.add.at(out, idx, g)
        return [(a, out)]

    return record_op(a.values[idx], (a,), backward)


# -- elementwise nonlinearities ---------------------------------------------------


def exp(a) -> DiffArray:
    a = as_diff(a)
    out = np.exp(a.values)
    return record_op(out, (a,), lambda g: [(a, g * out)])


def log(a) -> DiffArray:
    a = as_diff(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log: non-positive operand")
    return record_op(np.log(a.values), (a,), lambda g: [(a, g / a.values)])


def absolute(a) -> DiffArray:
    a = as_diff(a)
    sign = np.sign(a.values)
    return record_op(np.abs(a.values), (a,), lambda g: [(a, g * sign)])


def relu(a) -> DiffArray:
    a = as_diff(a)
    mask = a.values > 0.0
    return record_op(a.values * mask, (a,), lambda g: [(a, g * mask)])


def sigmoid(a) -> DiffArray:
    a = as_diff(a)
    out = 1.0 / (1.0 + np.exp(-a.values))
    return record_op(out, (a,), lambda g: [(a, g * out * (1.0 - out))])


def clip(a, lo: float, hi: float) -> DiffArray:
    """Clamp values; gradient passes through only where the clamp is inactive."""
    a = as_diff(a)
    out = np.clip(a.values, lo, hi)
    inside = (a.values > lo) & (a.values < hi)
    return record_op(out, (a,), lambda g: [(a, g * inside)])


def softmax(a, axis: int = -1) -> DiffArray:
    a = as_diff(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(a, out * (g - dot))]

    return record_op(out, (a,), backward)


# -- reductions -------------------------------------------------------------------


def sum(a, axis=None) -> DiffArray:
    a = as_diff(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return [(a, np.broadcast_to(g, shape).copy())]
        return [(a, np.broadcast_to(np.expand_dims(g, axis), shape).copy())]

    return record_op(a.values.sum(axis=axis), (a,), backward)


def mean(a, axis=None) -> DiffArray:
    a = as_diff(a)
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return [(a, np.broadcast_to(g / count, shape).copy())]
        return [(a, np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy())]

    return record_op(a.values.mean(axis=axis), (a,), backward)


# -- bilinear grid sampling -------------------------------------------------------


def grid_sample(grid, coords) -> DiffArray:
    """Bilinear gather from a 2-D feature grid at fractional coordinates.

    ``grid`` is (H, W, C); ``coords`` is (P, 2) in (x, y) order, where x
    indexes columns and y rows, with integer coordinates on the samples
    themselves.  Out-of-grid corners contribute zero and receive no gradient
    (zero padding), and coordinate gradients use in-bounds corners only.
    Differentiable in both the grid and the coordinates.
    """
    grid, coords = as_diff(grid), as_diff(coords)
    if len(grid.shape) != 3:
        raise ContractViolation(f"grid_sample: grid must be 3-D, got {grid.shape}")
    if len(coords.shape) != 2 or coords.shape[1] != 2:
        raise ContractViolation(
            f"grid_sample: coords must be (P, 2), got {coords.shape}"
        )
    h, w, c = grid.shape
    x = coords.values[:, 0]
    y = coords.values[:, 1]
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0

    corners = []  # (xi, yi, weight, dw/dx, dw/dy)
    corners.append((x0, y0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)))
    corners.append((x0 + 1, y0, fx * (1 - fy), (1 - fy), -fx))
    corners.append((x0, y0 + 1, (1 - fx) * fy, -fy, (1 - fx)))
    corners.append((x0 + 1, y0 + 1, fx * fy, fy, fx))

    prepared = []
    out = np.zeros((coords.shape[0], c))
    for xi, yi, weight, dwx, dwy in corners:
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.where(inside, xi, 0)
        yc = np.where(inside, yi, 0)
        vals = grid.values[yc, xc, :] * inside[:, None]
        out += weight[:, None] * vals
        prepared.append((xc, yc, inside, weight, dwx, dwy, vals))

    def backward(g):
        grid_grad = np.zeros_like(grid.values)
        coord_grad = np.zeros_like(coords.values)
        for xc, yc, inside, weight, dwx, dwy, vals in prepared:
            contrib = g * (weight * inside)[:, None]
            np.add.at(grid_grad, (yc[inside], xc[inside]), contrib[inside])
            gv = (g * vals).sum(axis=1)
            coord_grad[:, 0] += gv * dwx * inside
            coord_grad[:, 1] += gv * dwy * inside
        return [(grid, grid_grad), (coords, coord_grad)]

    return record_op(out, (grid, coords), backward)
