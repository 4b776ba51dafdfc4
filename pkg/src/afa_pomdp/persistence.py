"""Dataset and checkpoint formats.

Dataset directory::

    manifest.json   counts, shapes, dtypes, versions, per-trajectory offsets
    data.bin        one contiguous little-endian blob

Each trajectory of length ``T`` occupies, in order: observations ``<f4``
``[T, *obs_shape]``, masks ``u1`` ``[T, *obs_shape]``, controls ``<i4``
``[T]``, acquisitions ``u1`` ``[T, n_features]``, rewards ``<f4`` ``[T]``,
costs ``<f4`` ``[T]``.

Checkpoints are safetensors files (named little-endian float32 tensors plus
string metadata), so loading never executes code.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import torch
from safetensors import SafetensorError, safe_open
from safetensors.numpy import load_file as np_load_file
from safetensors.numpy import save_file as np_save_file

from .core import TrajectoryRecord

DATASET_FORMAT = "afa-dataset-v1"
CHECKPOINT_FORMAT = "afa-checkpoint-v1"
MANIFEST = "manifest.json"
BLOB = "data.bin"

FIELDS = (
    ("observations", "<f4", "obs"),
    ("masks", "u1", "obs"),
    ("controls", "<i4", "scalar"),
    ("acquisitions", "u1", "features"),
    ("rewards", "<f4", "scalar"),
    ("costs", "<f4", "scalar"),
)


class IntegrityError(ValueError):
    """A dataset or checkpoint on disk is inconsistent with its metadata."""


class VersionMismatch(ValueError):
    pass


def _field_count(kind: str, T: int, obs_size: int, n_features: int) -> int:
    return T * {"obs": obs_size, "scalar": 1, "features": n_features}[kind]


def record_nbytes(T: int, obs_size: int, n_features: int) -> int:
    return sum(np.dtype(dt).itemsize * _field_count(kind, T, obs_size, n_features) for _, dt, kind in FIELDS)


@dataclass
class Dataset:
    records: list[TrajectoryRecord]
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def version(self) -> str:
        return str(self.meta.get("blob_sha256", ""))


def write_dataset(path: str | Path, records: Sequence[TrajectoryRecord], obs_shape: Sequence[int],
                  n_features: int, meta: Optional[Mapping[str, Any]] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    obs_size = int(np.prod(obs_shape))
    chunks: list[bytes] = []
    entries = []
    offset = 0
    for rec in records:
        T = len(rec)
        start = offset
        for name, dt, _ in FIELDS:
            arr = getattr(rec, name)
            b = np.ascontiguousarray(arr.astype(dt)).tobytes()
            chunks.append(b)
            offset += len(b)
        entries.append({"length": T, "offset": start, "terminal": rec.terminal_flag, "policy_id": rec.policy_id})
    blob = b"".join(chunks)
    manifest = {
        "format": DATASET_FORMAT,
        **dict(meta or {}),
        "obs_shape": list(obs_shape),
        "n_features": n_features,
        "n_records": len(records),
        "dtypes": {name: dt for name, dt, _ in FIELDS},
        "field_order": [name for name, _, _ in FIELDS],
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "records": entries,
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_dataset(path: str | Path, verify_hash: bool = True) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable dataset manifest in {path}: {exc}") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise IntegrityError(f"unknown dataset format {manifest.get('format')!r}")
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise IntegrityError(
            f"blob is {len(blob)} bytes but the manifest declares {manifest['blob_bytes']} (truncated or padded)"
        )
    obs_shape = tuple(manifest["obs_shape"])
    obs_size = int(np.prod(obs_shape))
    nf = int(manifest["n_features"])
    entries = manifest["records"]
    if len(entries) != manifest["n_records"]:
        raise IntegrityError("manifest record count disagrees with its record table")
    expected = 0
    for i, e in enumerate(entries):
        if e["length"] < 1:
            raise IntegrityError(f"trajectory {i}: non-positive length {e['length']}")
        if e["offset"] != expected:
            bad = max(i - 1, 0)
            raise IntegrityError(
                f"trajectory {bad}: declared length/shape implies the next record starts at byte {expected}, "
                f"manifest says {e['offset']}"
            )
        expected += record_nbytes(e["length"], obs_size, nf)
    if expected != len(blob):
        raise IntegrityError(
            f"trajectory {len(entries) - 1}: declared shapes need {expected} bytes, blob has {len(blob)}"
        )
    if verify_hash and hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise IntegrityError("blob checksum mismatch")

    records = []
    for e in entries:
        T = e["length"]
        pos = e["offset"]
        arrays = {}
        for name, dt, kind in FIELDS:
            n = _field_count(kind, T, obs_size, nf)
            arr = np.frombuffer(blob, dtype=dt, count=n, offset=pos)
            pos += n * np.dtype(dt).itemsize
            shape = {"obs": (T, *obs_shape), "scalar": (T,), "features": (T, nf)}[kind]
            arrays[name] = arr.reshape(shape).copy()
        records.append(
            TrajectoryRecord(
                observations=arrays["observations"],
                masks=arrays["masks"].astype(bool),
                controls=arrays["controls"],
                acquisitions=arrays["acquisitions"].astype(bool),
                rewards=arrays["rewards"],
                costs=arrays["costs"],
                terminal_flag=e["terminal"],
                policy_id=e["policy_id"],
            )
        )
    meta = {k: v for k, v in manifest.items() if k != "records"}
    return Dataset(records, meta)


# -- checkpoints --------------------------------------------------------------


def _tensor_digest(tensors: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype("<f4").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict[str, Any]

    @property
    def digest(self) -> str:
        return self.meta["tensor_sha256"]

    def state_dict(self, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()).to(dtype) for k, v in self.tensors.items()}


def save_checkpoint(path: str | Path, module: torch.nn.Module, meta: Mapping[str, Any]) -> Checkpoint:
    tensors = {k: v.detach().cpu().to(torch.float32).numpy() for k, v in module.state_dict().items()}
    full_meta = {"format": CHECKPOINT_FORMAT, **dict(meta), "tensor_sha256": _tensor_digest(tensors)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    np_save_file(tensors, str(tmp), metadata={k: json.dumps(v, sort_keys=True) for k, v in full_meta.items()})
    os.replace(tmp, path)
    return Checkpoint(tensors, full_meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        tensors = np_load_file(str(path))
        with safe_open(str(path), framework="numpy") as f:
            raw_meta = f.metadata() or {}
    except (SafetensorError, OSError, ValueError) as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from None
    meta = {k: json.loads(v) for k, v in raw_meta.items()}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path} is not a checkpoint of format {CHECKPOINT_FORMAT}")
    if _tensor_digest(tensors) != meta.get("tensor_sha256"):
        raise IntegrityError(f"checkpoint {path}: tensor hash mismatch")
    return Checkpoint(dict(tensors), meta)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_versions(expected: Mapping[str, Any], found: Mapping[str, Any], what: str = "checkpoint") -> None:
    """Refuse artifacts built against different dynamics/dataset versions."""
    diffs = [f"{k}: expected {expected[k]!r}, {what} has {found.get(k)!r}"
             for k in sorted(expected) if expected[k] is not None and found.get(k) != expected[k]]
    if diffs:
        raise VersionMismatch(f"{what} version mismatch; " + "; ".join(diffs))
