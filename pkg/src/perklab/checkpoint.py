"""Checkpoints: a JSON manifest next to one raw little-endian tensor blob.

Layout of a checkpoint directory::

    manifest.json   {"version", "model_config", "tensors": [{name, shape, dtype,
                     offset, nbytes}], "blob_bytes", "step", "rng", "extra"}
    tensors.bin     tensors back to back, little-endian, in manifest order
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = "v1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointVersionError(ValueError):
    pass


class CheckpointIntegrityError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model_config: dict = field(default_factory=dict)
    step: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: str = CHECKPOINT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.``, with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    blobs = []
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "version": ckpt.version,
        "model_config": ckpt.model_config,
        "tensors": index,
        "blob_bytes": offset,
        "step": ckpt.step,
        "rng": ckpt.rng,
        "extra": ckpt.extra,
    }
    # blob first, so a manifest never points at a blob that is not there yet
    tmp = path / (BLOB + ".tmp")
    tmp.write_bytes(b"".join(blobs))
    tmp.replace(path / BLOB)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version!r} cannot be read by code expecting {CHECKPOINT_VERSION!r}"
        )
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointIntegrityError(
            f"tensor blob holds {len(blob)} bytes, manifest records {manifest['blob_bytes']}"
        )
    tensors = {}
    for t in manifest["tensors"]:
        if t["name"] in tensors:
            raise CheckpointIntegrityError(f"tensor {t['name']} appears twice")
        end = t["offset"] + t["nbytes"]
        if end > len(blob):
            raise CheckpointIntegrityError(f"tensor {t['name']} runs past the end of the blob")
        dt = np.dtype(t["dtype"])
        arr = np.frombuffer(blob[t["offset"]:end], dtype=dt).reshape(t["shape"])
        tensors[t["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return Checkpoint(tensors, manifest["model_config"], manifest["step"], manifest["rng"],
                      manifest["extra"], version)


def config_dict(config) -> dict:
    d = asdict(config)
    d["adapted_modules"] = list(d["adapted_modules"])
    return d
