"""Flat JSON parameter checkpoints.

A checkpoint is a single JSON object mapping stable dotted parameter paths to
``{"shape": [...], "values": [flat list]}``.  Values are plain numbers;
Python's float repr round-trips IEEE doubles, so save → load is bit-exact.
Non-parameter metadata lives under the reserved ``"__meta__"`` key.
"""

from __future__ import annotations

import json
import os
from typing import Dict, Optional, Tuple

import numpy as np

from ..validation import ContractViolation

META_KEY = "__meta__"


def save_checkpoint(path: str, state: Dict[str, np.ndarray],
                    meta: Optional[dict] = None) -> None:
    if META_KEY in state:
        raise ContractViolation(f"parameter name {META_KEY!r} is reserved")
    payload = {
        name: {
            "shape": list(np.asarray(arr).shape),
            "values": np.asarray(arr, dtype=np.float64).ravel().tolist(),
        }
        for name, arr in state.items()
    }
    if meta is not None:
        payload[META_KEY] = meta
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path) as f:
        payload = json.load(f)
    if not isinstance(payload, dict):
        raise ContractViolation(f"{path}: checkpoint root must be an object")
    meta = payload.pop(META_KEY, {})
    state: Dict[str, np.ndarray] = {}
    for name, entry in payload.items():
        try:
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
        except (TypeError, KeyError) as exc:
            raise ContractViolation(f"{path}: malformed entry {name!r}") from exc
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ContractViolation(
                f"{path}: entry {name!r} has {values.size} values, "
                f"shape {shape} wants {int(np.prod(shape, dtype=np.int64))}"
            )
        state[name] = values.reshape(shape)
    return state, meta
