"""Single-file model checkpoints (format tag ``limeguard-ckpt-v1``).

A checkpoint is an npz archive holding a JSON metadata entry (architecture,
class count, input shape, the refinement configuration that produced the
model, optional lineage) plus one array per parameter/buffer.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import IngestionError
from .models import TorchClassifier, create_model

FORMAT_TAG = "limeguard-ckpt-v1"
_META_KEY = "__meta__"
_PARAM_PREFIX = "param."


def save_checkpoint(path, model: TorchClassifier, refinement_config=None, lineage=None):
    """Write ``model`` to ``path`` atomically. Returns the file's sha256."""
    meta = {
        "format": FORMAT_TAG,
        "architecture": model.architecture,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "refinement_config": refinement_config,
        "lineage": lineage,
    }
    arrays = {_PARAM_PREFIX + k: v for k, v in model.state_arrays().items()}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **{_META_KEY: np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}, **arrays)
    os.replace(tmp, path)
    return file_sha256(path)


def load_checkpoint(path):
    """Load a checkpoint; returns (model, metadata dict)."""
    if not os.path.exists(path):
        raise IngestionError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        if _META_KEY not in archive:
            raise IngestionError(f"{path}: not a model checkpoint (missing metadata)")
        meta = json.loads(bytes(archive[_META_KEY]).decode())
        if meta.get("format") != FORMAT_TAG:
            raise IngestionError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        arrays = {
            k[len(_PARAM_PREFIX) :]: archive[k] for k in archive.files if k.startswith(_PARAM_PREFIX)
        }
    model = create_model(meta["architecture"], meta["num_classes"], meta["input_shape"])
    try:
        model.load_state_arrays(arrays)
    except Exception as exc:
        raise IngestionError(f"{path}: parameter arrays do not fit the architecture: {exc}") from exc
    return model, meta


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
