"""
End-to-end acceptance runs on the desk preset.

These train real models for minutes each and are deselected by default;
run them with `pytest -m slow`.
"""

from dataclasses import replace

import pytest
import numpy as np
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli.config import RunConfig
from src.data.synth import SynthSpec, generate
from src.models.config import preset_config
from src.models.surgery import shrink_from_teacher
from src.training.evaluation import evaluate, sweep_heads
from src.training.harness import (
    calibrate_weights,
    finetune_prune,
    finetune_teacher,
    pretrain_distill,
    train_teacher,
)
from src.training.l0prune import global_schedule

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def config():
    return RunConfig.resolve({"preset": "desk"})


def _data(config, task, seed=0):
    spec = SynthSpec.for_model(preset_config("desk"), task, seed)
    return generate(spec, config.train_size), generate(spec, config.eval_size, start=config.train_size)


@pytest.fixture(scope="module")
def teacher(config):
    """Vision-language pre-trained desk teacher."""
    train, heldout = _data(config, "retrieval")
    return train_teacher(preset_config("desk"), train, heldout, config.settings("teacher")).model


@pytest.fixture(scope="module")
def student(config, teacher):
    """Half-depth student distilled from the teacher."""
    train, heldout = _data(config, "retrieval")
    return pretrain_distill(shrink_from_teacher(teacher), teacher, train, heldout,
                            config.settings("distill")).model


def _prune(config, student, teacher, task, target=0.25):
    train, heldout = _data(config, task)
    tuned = finetune_teacher(teacher, train, heldout, config.settings("teacher_finetune")).model
    result = finetune_prune(student, tuned, train, heldout, config.settings("finetune"),
                            controllers=global_schedule(target))
    return result, heldout


class TestPruning:
    """Sparsity attainment and modal adaptivity."""

    def test_sparsity_attainment(self, config, student, teacher):
        """A 25% target is met within 2 points at a task cost below 5 points."""
        result, heldout = _prune(config, student, teacher, "balanced")
        assert abs(result.metrics.summary["achieved_removed"] - 0.25) <= 0.02
        unpruned = evaluate(student, heldout, config.batch_size, task="balanced")["metric"]
        assert result.metrics.summary["after_slicing"]["metric"] >= unpruned - 0.05

    @pytest.mark.parametrize("task, kept, dropped", [
        ("vision_only", "vision", "text"),
        ("text_only", "text", "vision"),
    ])
    def test_modal_adaptivity(self, config, student, teacher, task, kept, dropped):
        """The encoder the task needs keeps at least 10 points more density."""
        result, _ = _prune(config, student, teacher, task)
        assert result.density[kept] - result.density[dropped] >= 0.10


class TestSensitivity:
    """Head-pruning sensitivity of a fine-tuned teacher."""

    def test_vision_heads_matter_more(self, config, teacher):
        """On a vision task, losing 40% of vision heads hurts at least twice as much as text heads."""
        train, heldout = _data(config, "vision_only")
        tuned = finetune_teacher(teacher, train, heldout, config.settings("teacher_finetune")).model
        drops = {}
        for encoder in ("vision", "text"):
            frame = sweep_heads(tuned, heldout, [0.0, 0.4], encoder, batch_size=config.batch_size)
            drops[encoder] = frame["metric"][0] - frame["metric"][1]
        assert drops["vision"] >= 2.0 * max(drops["text"], 0.0)
        assert drops["vision"] > 0.0


class TestDistillation:
    """Distilled students against plain vision-language training."""

    def test_distillation_helps(self, config, teacher):
        """Mean held-out match accuracy over three seeds, with each KD term added in turn."""
        accuracy = {"none": [], "logits": [], "logits+hid": [], "all": []}
        for seed in SEEDS:
            train, heldout = _data(config, "retrieval", seed)
            settings = replace(config.settings("distill"), seed=seed)
            start = shrink_from_teacher(teacher)
            full = calibrate_weights(start, teacher, next(train.batches(settings.batch_size)), settings, 0.5)
            variants = {
                "none": replace(full, mix=1.0),
                "logits": replace(full, w_attn=0.0, w_hid=0.0),
                "logits+hid": replace(full, w_attn=0.0),
                "all": full,
            }
            for label, weights in variants.items():
                result = pretrain_distill(start, teacher, train, heldout, settings, weights=weights)
                accuracy[label].append(result.metrics.summary["final"]["match_accuracy"])

        mean = {label: float(np.mean(values)) for label, values in accuracy.items()}
        assert mean["all"] >= mean["none"]
        assert mean["logits+hid"] >= mean["logits"] - 0.01
        assert mean["all"] >= mean["logits+hid"] - 0.01
