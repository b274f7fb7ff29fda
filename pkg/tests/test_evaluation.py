"""
Unit tests for evaluation metrics and the head sensitivity sweep
"""

import pytest
import numpy as np
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.data.synth import SynthSpec, generate
from src.errors import ConfigError
from src.models.config import preset_config
from src.models.trimodel import VlmModel
from src.numcore.rng import Rng
from src.training.evaluation import evaluate, recall_at_k, retrieval_ranks, sweep_heads
from src.training.l0prune import GateSet


@pytest.fixture(scope="module")
def model():
    return VlmModel.initialize(preset_config("tiny", "student"), Rng(4))


@pytest.fixture(scope="module")
def retrieval_data(model):
    return generate(SynthSpec.for_model(model.config, "retrieval", seed=5), 16)


@pytest.fixture(scope="module")
def balanced_data(model):
    return generate(SynthSpec.for_model(model.config, "balanced", seed=5), 16)


class TestRanks:
    """Retrieval ranks and recall."""

    def test_perfect_diagonal(self):
        ranks = retrieval_ranks(np.eye(3))
        assert ranks["tr"].tolist() == [0, 0, 0]
        assert ranks["ir"].tolist() == [0, 0, 0]

    def test_ties_count_against_query(self):
        """A tie with a wrong partner costs a rank."""
        ranks = retrieval_ranks(np.ones((3, 3)))
        assert ranks["tr"].tolist() == [2, 2, 2]

    def test_directions(self):
        """Rows rank captions for an image; columns rank images for a caption."""
        sims = np.array([[0.9, 0.1], [0.95, 0.2]])
        ranks = retrieval_ranks(sims)
        assert ranks["tr"].tolist() == [0, 1]
        assert ranks["ir"].tolist() == [1, 0]

    def test_recall(self):
        assert recall_at_k(np.array([0, 1, 5, 9]), 1) == 0.25
        assert recall_at_k(np.array([0, 1, 5, 9]), 10) == 1.0
        assert recall_at_k(np.array([]), 1) == 0.0


class TestEvaluate:
    """Metric dictionaries per task."""

    def test_retrieval_metrics(self, model, retrieval_data):
        metrics = evaluate(model, retrieval_data, batch_size=8)
        for key in ("tr_r1", "ir_r1", "tr_r5", "ir_r10", "r_mean", "match_accuracy", "mlm_accuracy"):
            assert key in metrics
        # every caption ranks inside a batch of 8
        assert metrics["tr_r10"] == 1.0
        assert metrics["metric"] == pytest.approx((metrics["tr_r1"] + metrics["ir_r1"]) / 2)

    def test_classification_metric(self, model, balanced_data):
        metrics = evaluate(model, balanced_data, batch_size=8)
        assert 0.0 <= metrics["class_accuracy"] <= 1.0
        assert metrics["metric"] == metrics["class_accuracy"]
        assert "tr_r1" not in metrics

    def test_task_override(self, model, retrieval_data):
        """A retrieval dataset can be scored as a match task."""
        metrics = evaluate(model, retrieval_data, batch_size=8, task="match")
        assert metrics["metric"] == metrics["match_accuracy"]


class TestSweepHeads:
    """Head-pruning sensitivity."""

    def test_columns_and_counts(self, model, balanced_data):
        frame = sweep_heads(model, balanced_data, [0.0, 0.5, 1.0], "fusion", batch_size=8)
        assert list(frame.columns) == ["encoder", "fraction", "heads_pruned", "heads_total", "metric"]
        # two self-attention and two cross-attention heads
        assert frame["heads_total"].tolist() == [4, 4, 4]
        assert frame["heads_pruned"].tolist() == [0, 2, 4]

    def test_zero_fraction_is_baseline(self, model, balanced_data):
        """Pruning nothing reproduces the unpruned metric."""
        frame = sweep_heads(model, balanced_data, [0.0], "vision", batch_size=8)
        assert frame["metric"][0] == evaluate(model, balanced_data, batch_size=8)["metric"]

    def test_trained_gates_define_order(self, model, balanced_data):
        """With gates, the sweep runs under their deterministic values."""
        gates = GateSet.for_model(model)
        frame = sweep_heads(model, balanced_data, [0.0, 0.5], "text", gates=gates, batch_size=8)
        assert frame["heads_total"].tolist() == [2, 2]
        assert frame["heads_pruned"].tolist() == [0, 1]

    def test_model_not_modified(self, model, balanced_data):
        before = {name: data.copy() for name, data in model.state().items()}
        sweep_heads(model, balanced_data, [1.0], "text", batch_size=8)
        assert model.gates is None
        for name, data in model.state().items():
            np.testing.assert_array_equal(data, before[name])

    def test_invalid_arguments(self, model, balanced_data):
        with pytest.raises(ConfigError):
            sweep_heads(model, balanced_data, [1.5], "vision")
        with pytest.raises(ConfigError):
            sweep_heads(model, balanced_data, [0.5], "audio")
