import json

import numpy as np
import pytest

from app.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

from conftest import tiny_ensemble


def test_round_trip_is_bit_exact(tmp_path):
    ens = tiny_ensemble(M=3, seed=7)
    path = tmp_path / "checkpoint_base.json"
    digest = save_checkpoint(ens, path, method="base", training={"seed": 7})

    loaded, container = load_checkpoint(path)
    assert container.method == "base"
    assert container.seed == 7
    assert container.training == {"seed": 7}
    assert loaded.arch == ens.arch
    for original, restored in zip(ens.parameters(), loaded.parameters()):
        assert original.value.tobytes() == restored.value.tobytes()
    assert len(digest) == 64


def test_same_ensemble_same_digest(tmp_path):
    a = save_checkpoint(tiny_ensemble(seed=1), tmp_path / "a.json", method="edlcm", training={})
    b = save_checkpoint(tiny_ensemble(seed=1), tmp_path / "b.json", method="edlcm", training={})
    assert a == b


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.json")


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{\"format_version\": 1}")
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(path)


def test_shape_mismatch_is_reported(tmp_path):
    ens = tiny_ensemble(d=4, hidden=(8,), M=2, seed=0)
    path = tmp_path / "ckpt.json"
    save_checkpoint(ens, path, method="base", training={})
    payload = json.loads(path.read_text())
    payload["arch"]["hidden"] = [6]
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError, match="do not match"):
        load_checkpoint(path)


def test_member_count_mismatch(tmp_path):
    path = tmp_path / "ckpt.json"
    save_checkpoint(tiny_ensemble(M=2), path, method="base", training={})
    payload = json.loads(path.read_text())
    payload["ensemble_size"] = 3
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError, match="Mismatch"):
        load_checkpoint(path)


def test_truncated_tensor(tmp_path):
    path = tmp_path / "ckpt.json"
    save_checkpoint(tiny_ensemble(M=1), path, method="base", training={})
    payload = json.loads(path.read_text())
    payload["members"][0]["layers"][0]["bias"]["data"] = "AAAA"
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(path)
