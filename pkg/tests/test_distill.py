"""
Unit tests for the distillation losses and training objectives
"""

import pytest
import numpy as np
import sys
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.data.synth import SynthSpec, generate
from src.errors import ConfigError, ShapeError
from src.models.config import preset_config
from src.models.trimodel import ForwardTrace, VlmModel, encode_teacher, forward
from src.numcore.rng import Rng
from src.numcore.tensor import Tensor
from src.training.distill import (
    DistillWeights,
    LayerMap,
    attn_loss,
    contrastive_loss,
    finetune_loss,
    hidden_loss,
    kd_parts,
    logits_loss,
    pretrain_loss,
    task_loss,
    vlp_losses,
)
from tests.gradcheck import check_gradients


@pytest.fixture
def student_config():
    return preset_config("tiny", "student")


@pytest.fixture
def batch(student_config):
    spec = SynthSpec.for_model(student_config, "retrieval", seed=1)
    return generate(spec, 4).full_batch()


def _trace(rng, vision=(), fusion=(), cross=(), text_hidden=()):
    return ForwardTrace(
        attentions={"vision": [Tensor(rng.random(s)) for s in vision],
                    "fusion": [Tensor(rng.random(s)) for s in fusion]},
        cross_attentions=[Tensor(rng.random(s)) for s in cross],
        hidden={"text": [Tensor(rng.normal(size=s)) for s in text_hidden]},
    )


class TestLayerMap:
    """Student -> teacher layer pairing."""

    def test_tiny_presets(self, student_config):
        """Student layer j reads teacher layer 2j."""
        layer_map = LayerMap.between(student_config, preset_config("tiny", "teacher"))
        assert layer_map.pairs["vision"] == ((1, 2), (2, 4))
        assert layer_map.pairs["text"] == ((1, 2),)
        assert layer_map.pairs["fusion"] == ((1, 2),)
        assert len(layer_map) == 4

    def test_identity(self, student_config):
        """Self-distillation pairs each layer with itself."""
        assert LayerMap.identity(student_config).pairs["vision"] == ((1, 1), (2, 2))

    def test_depth_mismatch(self, student_config):
        """A teacher shallower than the student cannot be mapped."""
        with pytest.raises(ConfigError):
            LayerMap.between(preset_config("tiny", "teacher"), student_config)


class TestDistillationTerms:
    """Attention, hidden-state and logits terms."""

    def test_self_distillation_is_zero(self, student_config, batch):
        """A model distilled against itself has exactly zero loss in every term."""
        model = VlmModel.initialize(student_config, Rng(2))
        parts = kd_parts(forward(model, batch), encode_teacher(model, batch), LayerMap.identity(student_config))
        assert parts["attn"].item() == 0.0
        assert parts["hid"].item() == 0.0
        assert parts["logits"].item() == 0.0

    def test_logits_known_value(self):
        """KL between [0.75, 0.25] and a uniform student."""
        teacher = Tensor(np.array([[np.log(3.0), 0.0]]))
        student = Tensor(np.zeros((1, 2)))
        expected = 0.75 * np.log(1.5) + 0.25 * np.log(0.5)
        assert logits_loss(student, teacher).item() == pytest.approx(expected)

    def test_temperature_without_rescaling(self):
        """Temperature T is the same as dividing both logits by T; no T^2 factor."""
        rng = np.random.default_rng(0)
        s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        scaled = logits_loss(Tensor(s), Tensor(t), temperature=2.0).item()
        assert scaled == pytest.approx(logits_loss(Tensor(s / 2.0), Tensor(t / 2.0)).item())

    def test_logits_shift_invariance(self):
        """Adding a constant to every logit of a row on either side leaves the KL unchanged."""
        rng = np.random.default_rng(3)
        s, t = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        base = logits_loss(Tensor(s), Tensor(t)).item()
        shift = rng.normal(size=(4, 1)) * 10.0
        assert logits_loss(Tensor(s + shift), Tensor(t)).item() == pytest.approx(base, abs=1e-12)
        assert logits_loss(Tensor(s), Tensor(t - shift)).item() == pytest.approx(base, abs=1e-12)

    def test_logits_loss_is_non_negative(self):
        """KL >= 0 on random pairs."""
        for seed in range(50):
            rng = np.random.default_rng(seed)
            s, t = rng.normal(scale=3.0, size=(2, 6)), rng.normal(scale=3.0, size=(2, 6))
            assert logits_loss(Tensor(s), Tensor(t), temperature=rng.uniform(0.5, 4.0)).item() >= 0.0

    def test_temperature_must_be_positive(self):
        with pytest.raises(ConfigError):
            logits_loss(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), temperature=0.0)

    def test_logits_shape_mismatch(self):
        with pytest.raises(ShapeError):
            logits_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_logits_gradient(self):
        """The student side of the KL passes finite-difference checks."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            t = Tensor(rng.normal(size=(3, 4)))
            check_gradients(lambda s: logits_loss(s, t, temperature=1.5), {"s": rng.normal(size=(3, 4))})

    def test_attention_oracle(self):
        """Mean squared error per mapped pair, summed over layers."""
        rng = np.random.default_rng(3)
        student = _trace(rng, vision=[(2, 2, 5, 5)] * 2)
        teacher = _trace(rng, vision=[(2, 2, 5, 5)] * 4)
        layer_map = LayerMap({"vision": ((1, 2), (2, 4))})
        s, t = student.attentions["vision"], teacher.attentions["vision"]
        expected = np.mean((s[0].data - t[1].data) ** 2) + np.mean((s[1].data - t[3].data) ** 2)
        assert attn_loss(student, teacher, layer_map).item() == pytest.approx(expected)

    def test_cross_attention_flag(self):
        """Fusion cross-attention maps count unless excluded."""
        rng = np.random.default_rng(4)
        student = _trace(rng, fusion=[(2, 2, 6, 6)], cross=[(2, 2, 6, 5)])
        teacher = _trace(rng, fusion=[(2, 2, 6, 6)], cross=[(2, 2, 6, 5)])
        layer_map = LayerMap({"fusion": ((1, 1),)})
        cross = np.mean((student.cross_attentions[0].data - teacher.cross_attentions[0].data) ** 2)
        with_cross = attn_loss(student, teacher, layer_map).item()
        without = attn_loss(student, teacher, layer_map, include_cross=False).item()
        assert with_cross - without == pytest.approx(cross)

    def test_attention_shape_mismatch(self):
        """Maps of different heads or lengths are rejected."""
        rng = np.random.default_rng(5)
        student = _trace(rng, vision=[(2, 2, 5, 5)])
        teacher = _trace(rng, vision=[(2, 4, 5, 5)])
        with pytest.raises(ShapeError):
            attn_loss(student, teacher, LayerMap({"vision": ((1, 1),)}))

    def test_hidden_projection(self):
        """Student states are projected before the comparison."""
        rng = np.random.default_rng(6)
        student = _trace(rng, text_hidden=[(2, 3, 4)])
        teacher = _trace(rng, text_hidden=[(2, 3, 6)])
        w = rng.normal(size=(4, 6))
        expected = np.mean((student.hidden["text"][0].data @ w - teacher.hidden["text"][0].data) ** 2)
        loss = hidden_loss(student, teacher, LayerMap({"text": ((1, 1),)}), projection=Tensor(w))
        assert loss.item() == pytest.approx(expected)


class TestObjectives:
    """Mixing of task, distillation and constraint terms."""

    def test_pretrain_formula(self):
        """mix * vlp + (1 - mix) * weighted KD."""
        w = DistillWeights(w_attn=0.5, w_hid=0.25, w_logits=2.0, mix=0.4)
        loss = pretrain_loss(Tensor(2.0), {"attn": Tensor(1.0), "hid": Tensor(2.0), "logits": Tensor(3.0)}, w)
        assert loss.item() == pytest.approx(0.4 * 2.0 + 0.6 * (0.5 + 0.5 + 6.0))

    def test_pretrain_mix_one_ignores_kd(self):
        """With mix = 1 the distillation parts do not matter."""
        w = DistillWeights(mix=1.0)
        loss = pretrain_loss(Tensor(2.0), [Tensor(np.inf), Tensor(1.0), Tensor(1.0)], w)
        assert loss.item() == 2.0

    def test_finetune_formula(self):
        """The constraint term is added unweighted."""
        assert finetune_loss(Tensor(1.0), Tensor(2.0), Tensor(0.5), 0.25).item() == pytest.approx(2.25)
        assert finetune_loss(Tensor(1.0), Tensor(2.0), Tensor(0.5), 1.0).item() == pytest.approx(1.5)
        with pytest.raises(ConfigError):
            finetune_loss(Tensor(1.0), Tensor(2.0), Tensor(0.5), 1.5)

    def test_calibrated_weights(self):
        """Each part is rescaled to 1; a zero part keeps weight 1."""
        w = DistillWeights.calibrated({"attn": 0.5, "hid": 4.0, "logits": 0.0}, mix=0.3)
        assert (w.w_attn, w.w_hid, w.w_logits, w.mix) == (2.0, 0.25, 1.0, 0.3)

    def test_weights_validated(self):
        with pytest.raises(ConfigError):
            DistillWeights(w_attn=-1.0)
        with pytest.raises(ConfigError):
            DistillWeights(mix=1.5)

    def test_contrastive_needs_two_pairs(self):
        """A single pair has no negatives."""
        trace = ForwardTrace(logits={"itc": Tensor(np.zeros((1, 1)))})
        with pytest.raises(ConfigError):
            contrastive_loss(trace)

    def test_vlp_losses_are_finite(self, student_config, batch):
        """Contrastive, matching and masked-token losses on a real batch."""
        trace = forward(VlmModel.initialize(student_config, Rng(0)), batch)
        for loss in vlp_losses(trace, batch):
            assert np.isfinite(loss.item()) and loss.item() >= 0.0

    def test_unknown_task(self, student_config, batch):
        trace = forward(VlmModel.initialize(student_config, Rng(0)), batch, mode="plain")
        with pytest.raises(ConfigError):
            task_loss(trace, batch, "captioning")
