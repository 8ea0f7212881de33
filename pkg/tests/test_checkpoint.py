import numpy as np
import pytest

from hypelora import checkpoint
from hypelora.checkpoint import CheckpointError


def test_round_trip_is_bitwise(tmp_path, rng):
    groups = {
        "encoder": {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)},
        "adapter": {"0.Q.A": rng.normal(size=(4, 2))},
    }
    checkpoint.save_checkpoint(tmp_path / "ck", {"seed": 3, "adapter": "baseline-lora"}, groups)
    meta, back = checkpoint.load_checkpoint(tmp_path / "ck")
    assert meta == {"seed": "3", "adapter": "baseline-lora"}
    for g, tensors in groups.items():
        assert list(back[g]) == list(tensors)
        for k, v in tensors.items():
            assert back[g][k].shape == np.shape(v)
            assert back[g][k].tobytes() == np.asarray(v).tobytes()


def test_manifest_layout(tmp_path):
    checkpoint.save_checkpoint(tmp_path, {"k": "v"}, {"g": {"a": np.zeros((2, 3)), "b": np.ones(5)}})
    entries = checkpoint.read_manifest(tmp_path)
    assert entries["format"] == "1"
    assert entries["tensor.g.a"] == "g.bin:0:2x3"
    assert entries["tensor.g.b"] == "g.bin:48:5"
    assert (tmp_path / "g.bin").stat().st_size == 88
    # little-endian float64 on disk
    assert (tmp_path / "g.bin").read_bytes()[48:56] == bytes.fromhex("000000000000f03f")


def test_truncated_file_rejected(tmp_path):
    checkpoint.save_checkpoint(tmp_path, {}, {"g": {"a": np.zeros(4)}})
    (tmp_path / "g.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError, match="too short"):
        checkpoint.load_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError, match="no manifest"):
        checkpoint.load_checkpoint(tmp_path)
