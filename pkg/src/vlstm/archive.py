"""Flat named-tensor archives.

An archive is an uncompressed NumPy ``.npz`` file: one float64 array per
tensor name (shape preserved), plus a ``__meta__`` entry holding a JSON string
with structural configuration.  Loading never unpickles.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

META_KEY = "__meta__"


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    if META_KEY in tensors:
        raise ValueError(f"{META_KEY} is reserved")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    arrays[META_KEY] = np.array(json.dumps(dict(meta), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z[META_KEY]))
        tensors = {k: z[k].copy() for k in z.files if k != META_KEY}
    return tensors, meta
