"""
Unit tests for checkpoint persistence
"""

import hashlib
import json
import struct

import pytest
import numpy as np
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.data import checkpoint
from src.errors import (
    BadMagicError,
    CheckpointIOError,
    CheckpointShapeError,
    ChecksumError,
    VersionMismatchError,
)
from src.models.config import preset_config
from src.models.trimodel import VlmModel
from src.numcore.rng import Rng
from src.numcore.tensor import parameter
from src.training.l0prune import GateSet, controller_step, manual_sparsity_schedule


@pytest.fixture
def model():
    student = VlmModel.initialize(preset_config("tiny", "student"), Rng(9))
    d = student.config.model_dim
    student.projection = parameter(np.eye(d) * 0.5, "projection.weight")
    return student


@pytest.fixture
def gates(model):
    logits = np.random.default_rng(0).normal(size=len(GateSet.for_model(model)))
    return GateSet.for_model(model, threshold=0.4).with_logits(logits)


@pytest.fixture
def controllers():
    schedule = manual_sparsity_schedule([0.2, 0.0, 0.5])
    schedule["vision"] = controller_step(schedule["vision"], 0.9, 0.5)
    return schedule


def _rehashed(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


class TestRoundTrip:
    """Saving and loading."""

    def test_full_state(self, model, gates, controllers, tmp_path):
        """Parameters, gates, controllers and projection come back unchanged."""
        path = checkpoint.save(tmp_path / "pruned.ckpt", model, gates, controllers, seed=7, step=40)
        loaded = checkpoint.load(path)

        assert loaded.model.config == model.config
        for name, p in model.params.items():
            np.testing.assert_array_equal(loaded.model[name].data, p.data)
        np.testing.assert_array_equal(loaded.model.projection.data, model.projection.data)
        np.testing.assert_array_equal(loaded.gates.gate_logit.data, gates.gate_logit.data)
        assert loaded.gates.threshold == 0.4
        assert loaded.model.gates is loaded.gates
        assert sorted(loaded.lagrangian) == ["fusion", "text", "vision"]
        assert loaded.lagrangian["vision"].values() == controllers["vision"].values()
        assert not loaded.lagrangian["text"].active
        assert (loaded.seed, loaded.step) == (7, 40)

    def test_plain_model(self, tmp_path):
        """A model without optional records loads with None in their place."""
        plain = VlmModel.initialize(preset_config("tiny", "teacher"), Rng(1))
        loaded = checkpoint.load(checkpoint.save(tmp_path / "teacher.ckpt", plain))
        assert loaded.gates is None and loaded.lagrangian is None
        assert loaded.model.projection is None
        assert loaded.model.config.layer_counts == (4, 2, 2)

    def test_encoding_is_byte_stable(self, model, gates, controllers):
        """The same state always encodes to the same bytes."""
        first = checkpoint.encode(model, gates, controllers, seed=1, step=2)
        assert first == checkpoint.encode(model.copy(), gates.copy(), controllers, seed=1, step=2)
        assert first[:8] == checkpoint.MAGIC

    def test_no_temporary_files_left(self, model, tmp_path):
        checkpoint.save(tmp_path / "model.ckpt", model)
        assert [p.name for p in tmp_path.iterdir()] == ["model.ckpt"]

    def test_many_seeds(self, tmp_path):
        """Random models, gates and controllers survive a save and load for every seed."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            role = "teacher" if seed % 2 else "student"
            original = VlmModel.initialize(preset_config("tiny", role), Rng(seed))
            gates = GateSet.for_model(original).with_logits(rng.normal(scale=3.0, size=len(GateSet.for_model(original))))
            schedule = manual_sparsity_schedule(rng.uniform(0.0, 0.6, size=3).tolist())
            schedule["fusion"] = controller_step(schedule["fusion"], rng.uniform(), rng.uniform(0.1, 1.0))

            path = checkpoint.save(tmp_path / f"seed{seed}.ckpt", original, gates, schedule, seed=seed, step=seed * 3)
            loaded = checkpoint.load(path)

            assert loaded.model.config == original.config
            assert list(loaded.model.params) == list(original.params)
            for name, p in original.params.items():
                np.testing.assert_array_equal(loaded.model[name].data, p.data)
            np.testing.assert_array_equal(loaded.gates.gate_logit.data, gates.gate_logit.data)
            for group, state in schedule.items():
                assert loaded.lagrangian[group].values() == state.values()
                assert loaded.lagrangian[group].target_size == state.target_size
                assert loaded.lagrangian[group].active == state.active
            assert (loaded.seed, loaded.step) == (seed, seed * 3)


class TestDecodeErrors:
    """Each failure has its own error type."""

    def test_bad_magic(self, model):
        data = checkpoint.encode(model)
        with pytest.raises(BadMagicError):
            checkpoint.decode(b"NOTACKPT" + data[8:])

    def test_version_mismatch(self, model):
        data = checkpoint.encode(model)
        with pytest.raises(VersionMismatchError):
            checkpoint.decode(data[:8] + struct.pack("<H", 2) + data[10:])

    def test_corrupt_payload(self, model):
        data = bytearray(checkpoint.encode(model))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(ChecksumError):
            checkpoint.decode(bytes(data))

    def test_truncated(self, model):
        data = checkpoint.encode(model)
        with pytest.raises(ChecksumError):
            checkpoint.decode(data[:-5])

    def test_shape_disagrees_with_config(self, model):
        """A header whose config implies other shapes is caught per tensor."""
        body = checkpoint.encode(model)[:-checkpoint.CHECKSUM_BYTES]
        (length,) = struct.unpack("<I", body[10:14])
        header = json.loads(body[14:14 + length])
        header["config"]["embed_dim"] = 6
        encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        forged = body[:10] + struct.pack("<I", len(encoded)) + encoded + body[14 + length:]
        with pytest.raises(CheckpointShapeError, match="head.itc"):
            checkpoint.decode(_rehashed(forged))

    def test_duplicate_tensor(self):
        """A tensor stored twice is rejected rather than silently overwritten."""
        plain = VlmModel.initialize(preset_config("tiny", "teacher"), Rng(1))
        body = checkpoint.encode(plain)[:-checkpoint.CHECKSUM_BYTES]
        (length,) = struct.unpack("<I", body[10:14])
        names = list(plain.params)
        records = [checkpoint._tensor_record(names[0], plain[names[0]].data)]
        records += [checkpoint._tensor_record(name, plain[name].data) for name in names[:-1]]
        forged = body[:14 + length] + struct.pack("<I", len(names)) + b"".join(records)
        with pytest.raises(CheckpointShapeError, match="stored twice"):
            checkpoint.decode(_rehashed(forged))

    def test_trailing_bytes(self, model):
        """Bytes after the last record are rejected even with a valid checksum."""
        body = checkpoint.encode(model)[:-checkpoint.CHECKSUM_BYTES]
        with pytest.raises(CheckpointShapeError, match="unexpected bytes"):
            checkpoint.decode(_rehashed(body + b"\x00\x00\x00\x00"))


class TestFilesystem:
    """IO failures surface as CheckpointIOError."""

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointIOError):
            checkpoint.load(tmp_path / "missing.ckpt")

    def test_unwritable_location(self, model, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        with pytest.raises(CheckpointIOError):
            checkpoint.save(blocker / "model.ckpt", model)
