import json

import numpy as np
import pytest
import torch

from afa_pomdp.core import TrajectoryRecord
from afa_pomdp.persistence import (
    IntegrityError,
    VersionMismatch,
    check_versions,
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    write_dataset,
)
from conftest import sepsis_records


def random_records(n, rng, obs_shape=(8,), nf=4):
    out = []
    for _ in range(n):
        T = int(rng.integers(1, 12))
        out.append(TrajectoryRecord(
            observations=rng.normal(size=(T, *obs_shape)).astype(np.float32),
            masks=rng.random((T, *obs_shape)) < 0.5,
            controls=rng.integers(0, 8, size=T),
            acquisitions=rng.random((T, nf)) < 0.5,
            rewards=rng.normal(size=T).astype(np.float32),
            costs=rng.random(T).astype(np.float32),
            terminal_flag=bool(rng.random() < 0.5),
            policy_id=f"p{int(rng.integers(3))}",
        ))
    return out


def test_round_trip_100_records_exact(tmp_path):
    recs = random_records(100, np.random.default_rng(0))
    write_dataset(tmp_path / "d", recs, (8,), 4, {"versions": {"env": "sepsis"}})
    ds = read_dataset(tmp_path / "d")
    assert len(ds) == 100
    for a, b in zip(recs, ds.records):
        assert a == b
        assert a.observations.tobytes() == b.observations.tobytes()
    assert ds.meta["versions"] == {"env": "sepsis"}
    assert ds.meta["dtypes"]["observations"] == "<f4"


def test_round_trip_frames(tmp_path):
    recs = random_records(5, np.random.default_rng(1), obs_shape=(32, 32))
    write_dataset(tmp_path / "d", recs, (32, 32), 4)
    assert all(a == b for a, b in zip(recs, read_dataset(tmp_path / "d").records))


def test_environment_records_validate_after_round_trip(tmp_path, sepsis_desc):
    recs = sepsis_records(10)
    write_dataset(tmp_path / "d", recs, (8,), 4)
    for r in read_dataset(tmp_path / "d").records:
        r.validate(sepsis_desc)


def test_truncated_blob_raises(tmp_path):
    write_dataset(tmp_path / "d", random_records(10, np.random.default_rng(2)), (8,), 4)
    blob = tmp_path / "d" / "data.bin"
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(IntegrityError, match="truncated"):
        read_dataset(tmp_path / "d")


def test_inconsistent_manifest_names_trajectory(tmp_path):
    write_dataset(tmp_path / "d", random_records(10, np.random.default_rng(3)), (8,), 4)
    man = tmp_path / "d" / "manifest.json"
    doc = json.loads(man.read_text())
    doc["records"][4]["length"] += 1
    man.write_text(json.dumps(doc))
    with pytest.raises(IntegrityError, match="trajectory 4"):
        read_dataset(tmp_path / "d")


def test_corrupted_blob_fails_checksum(tmp_path):
    write_dataset(tmp_path / "d", random_records(3, np.random.default_rng(4)), (8,), 4)
    blob = tmp_path / "d" / "data.bin"
    data = bytearray(blob.read_bytes())
    data[10] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(IntegrityError, match="checksum"):
        read_dataset(tmp_path / "d")


def test_missing_manifest(tmp_path):
    with pytest.raises(IntegrityError):
        read_dataset(tmp_path)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    torch.manual_seed(0)
    module = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.LSTMCell(4, 2))
    ckpt = save_checkpoint(tmp_path / "m.safetensors", module, {"kind": "test", "nested": {"a": [1, 2]}})
    back = load_checkpoint(tmp_path / "m.safetensors")
    assert back.meta["nested"] == {"a": [1, 2]}
    assert back.digest == ckpt.digest
    for k, v in module.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)


def test_truncated_checkpoint_raises(tmp_path):
    module = torch.nn.Linear(3, 4)
    path = tmp_path / "m.safetensors"
    save_checkpoint(path, module, {})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_tampered_checkpoint_meta_detected(tmp_path):
    from safetensors.numpy import load_file, save_file
    from safetensors import safe_open

    path = tmp_path / "m.safetensors"
    save_checkpoint(path, torch.nn.Linear(2, 2), {})
    tensors = load_file(str(path))
    with safe_open(str(path), framework="numpy") as f:
        meta = f.metadata()
    tensors["weight"] = tensors["weight"] + 1
    save_file(tensors, str(path), metadata=meta)
    with pytest.raises(IntegrityError, match="hash"):
        load_checkpoint(path)


def test_check_versions_reports_both_sides():
    check_versions({"env_version": "a", "dynamics_sha256": None}, {"env_version": "a"})
    with pytest.raises(VersionMismatch, match="expected 'a'.*has 'b'"):
        check_versions({"env_version": "a"}, {"env_version": "b"}, what="VAE")
