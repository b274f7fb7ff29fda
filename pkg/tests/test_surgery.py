"""
Unit tests for student construction, structural removal and cost accounting
"""

import pytest
import numpy as np
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.data.synth import SynthSpec, generate
from src.errors import DegenerateLayerError
from src.models.config import preset_config
from src.models.surgery import (
    cost_report,
    count_gated,
    removed_fraction,
    shrink_from_teacher,
    structurally_remove,
)
from src.models.trimodel import VlmModel, forward
from src.numcore.rng import Rng
from src.training.l0prune import GateSet, deterministic_gates

PATTERNS = 50


@pytest.fixture(scope="module")
def model():
    return VlmModel.initialize(preset_config("tiny", "student"), Rng(0))


@pytest.fixture(scope="module")
def batch(model):
    spec = SynthSpec.for_model(model.config, "balanced", seed=3)
    return generate(spec, 4).full_batch()


def _slot_starts(gates):
    return sorted({gates.slot(u.encoder, u.layer, u.sublayer)[0] for u in gates.units})


def random_pattern(gates, seed):
    """Random gate logits with the first unit of every sublayer forced open."""
    logits = np.random.default_rng(seed).uniform(-3.0, 3.0, size=len(gates))
    logits[_slot_starts(gates)] = 5.0
    return gates.with_logits(logits)


class TestShrink:
    """Half-depth students."""

    def test_copies_even_layers(self):
        """Student layer j is a copy of teacher layer 2j."""
        teacher = VlmModel.initialize(preset_config("tiny", "teacher"), Rng(1))
        student = shrink_from_teacher(teacher)
        assert student.config == preset_config("tiny", "student")
        np.testing.assert_array_equal(student["vision.1.attn.wq"].data, teacher["vision.2.attn.wq"].data)
        np.testing.assert_array_equal(student["vision.2.ffn.w1"].data, teacher["vision.4.ffn.w1"].data)
        np.testing.assert_array_equal(student["fusion.1.xattn.wo"].data, teacher["fusion.2.xattn.wo"].data)
        np.testing.assert_array_equal(student["head.cls.out.weight"].data, teacher["head.cls.out.weight"].data)

    def test_copies_are_independent(self):
        """Changing the student leaves the teacher untouched."""
        teacher = VlmModel.initialize(preset_config("tiny", "teacher"), Rng(1))
        student = shrink_from_teacher(teacher)
        student["vision.1.attn.wq"].data[...] = 0.0
        assert np.any(teacher["vision.2.attn.wq"].data != 0.0)


class TestStructuralRemoval:
    """Slicing gated-off units out of the weights."""

    def test_masked_and_sliced_agree(self, model, batch):
        """For random gate patterns the sliced model computes the masked model's logits."""
        base = GateSet.for_model(model)
        for seed in range(PATTERNS):
            gates = random_pattern(base, seed)
            masked = forward(model.with_gates(gates), batch, mode="plain",
                             gate_values=deterministic_gates(gates))
            sliced = forward(structurally_remove(model, gates), batch, mode="plain")
            for key in ("itc", "itm", "cls"):
                np.testing.assert_allclose(sliced.logits[key].data, masked.logits[key].data, atol=1e-9, rtol=0)

    def test_open_gates_leave_model_unchanged(self, model):
        """With every gate at 1 slicing is the identity."""
        sliced = structurally_remove(model, GateSet.for_model(model))
        assert sliced.config == model.config
        for name, p in model.params.items():
            np.testing.assert_array_equal(sliced[name].data, p.data)
        assert sliced.gates is None

    def test_removed_fraction_matches_gate_weights(self, model):
        """Counted parameters agree with the weights of closed gates."""
        gates = random_pattern(GateSet.for_model(model), 7)
        closed = deterministic_gates(gates).data == 0.0
        sliced = structurally_remove(model, gates)
        expected = gates.weights[closed].sum() / gates.weights.sum()
        assert removed_fraction(sliced.config) == pytest.approx(expected)
        assert count_gated(sliced.config) == gates.weights[~closed].sum()

    def test_degenerate_layer(self, model):
        """Closing every head of a layer is refused and names the layer."""
        gates = GateSet.for_model(model)
        logits = np.full(len(gates), 5.0)
        start, stop = gates.slot("vision", 1, "attn")
        logits[start:stop] = -5.0
        with pytest.raises(DegenerateLayerError, match="vision.1.attn") as info:
            structurally_remove(model, gates.with_logits(logits))
        assert info.value.exit_status == 4

    def test_threshold_override(self, model):
        """A threshold above 1 closes every gate."""
        with pytest.raises(DegenerateLayerError):
            structurally_remove(model, GateSet.for_model(model), threshold=1.5)


class TestCostReport:
    """Parameter and compute accounting."""

    def test_unpruned_model(self, model):
        """Nothing removed; the overall row sums the encoders."""
        report = cost_report(model)
        assert set(report) == {"vision", "text", "fusion", "overall"}
        assert report["overall"]["removed"] == 0
        assert report["overall"]["removed_fraction"] == 0.0
        assert report["overall"]["parameters"] == model.parameter_count()
        assert report["overall"]["gated"] == count_gated(model.config)

    def test_pruning_reduces_cost(self, model):
        """Removed units lower both gated parameters and compute."""
        sliced = structurally_remove(model, random_pattern(GateSet.for_model(model), 11))
        before, after = cost_report(model), cost_report(sliced)
        assert after["overall"]["removed"] > 0
        assert after["overall"]["macs"] < before["overall"]["macs"]
        assert after["overall"]["gated_full"] == before["overall"]["gated"]
