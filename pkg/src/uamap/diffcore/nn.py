"""Small trainable building blocks on top of the tape.

Modules hold their parameters as ``DiffArray`` attributes with
``requires_grad=True``.  ``named_parameters`` walks attributes in insertion
order, so parameter names are stable dotted paths suitable for checkpoints.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from ..validation import ContractViolation
from .array import DiffArray
from . import ops


def parameter(values) -> DiffArray:
    return DiffArray(np.asarray(values, dtype=np.float64), requires_grad=True)


class Module:
    """Base class providing recursive parameter discovery."""

    def named_parameters(self) -> List[Tuple[str, DiffArray]]:
        out: List[Tuple[str, DiffArray]] = []
        self._collect("", out)
        return out

    def _collect(self, prefix: str, out: List[Tuple[str, DiffArray]]) -> None:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, DiffArray):
                if value.requires_grad:
                    out.append((path, value))
            elif isinstance(value, Module):
                value._collect(path + ".", out)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{path}.{i}.", out)
                    elif isinstance(item, DiffArray) and item.requires_grad:
                        out.append((f"{path}.{i}", item))

    def parameters(self) -> List[DiffArray]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ContractViolation(
                f"state mismatch: missing={missing}, unexpected={unexpected}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractViolation(
                    f"state[{name}]: shape {arr.shape}, expected {p.shape}"
                )
            p.values = arr.copy()
            p.zero_grad()


class Linear(Module):
    """Affine map x @ W + b with uniform Kaiming-style init."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, (in_dim, out_dim)))
        self.bias = parameter(rng.uniform(-bound, bound, out_dim)) if bias else None

    def __call__(self, x: DiffArray) -> DiffArray:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims, rng: np.random.Generator):
        if len(dims) < 2:
            raise ContractViolation(f"MLP needs >= 2 dims, got {list(dims)}")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: DiffArray) -> DiffArray:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x
