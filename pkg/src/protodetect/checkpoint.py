"""Versioned checkpoint container: one .npz per artifact.

Layout: a ``__meta__`` entry holds a JSON document (kind, format version,
architecture hyperparameters); every tensor is stored under ``param:<name>``
as float64, so save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    doc = {"format_version": FORMAT_VERSION, "kind": kind, **meta}
    payload = {"__meta__": np.array(json.dumps(doc, sort_keys=True))}
    for name, arr in arrays.items():
        payload[f"param:{name}"] = np.asarray(arr, dtype=np.float64)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz:
            raise CheckpointError(f"{path}: not a checkpoint container (missing __meta__)")
        meta = json.loads(str(npz["__meta__"].item()))
        arrays = {k[len("param:") :]: npz[k].copy() for k in npz.files if k.startswith("param:")}
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {version!r}")
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise CheckpointError(f"{path}: expected kind '{expect_kind}', found '{meta.get('kind')}'")
    return meta, arrays
