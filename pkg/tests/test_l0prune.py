"""
Unit tests for Hard-Concrete gates and the Lagrangian sparsity controller
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
from src.models.surgery import count_gated
from src.models.trimodel import VlmModel, forward
from src.numcore.rng import Rng, uniform
from src.numcore.tensor import Graph, Tensor, parameter
from src.training.distill import finetune_loss, task_loss
from src.training.l0prune import (
    GateSet,
    GateUnit,
    LagrangianState,
    active_controllers,
    controller_step,
    deterministic_gates,
    expected_l0,
    global_schedule,
    hard_concrete,
    lagrangian_loss,
    manual_sparsity_schedule,
    modal_density_report,
    model_size,
    open_probability,
    sample_gates,
    total_lagrangian,
)
from tests.gradcheck import check_gradients


@pytest.fixture
def model():
    return VlmModel.initialize(preset_config("tiny", "student"), Rng(0))


@pytest.fixture
def gates(model):
    return GateSet.for_model(model)


def _units(n):
    return [GateUnit("vision", 1, "ffn", "ffn_neuron", i, 10 + i) for i in range(n)]


class TestGateSet:
    """Layout of the gate vector."""

    def test_unit_count(self, gates):
        """One unit per head (self and cross) and per FFN neuron."""
        # vision 2 x (2 + 16), text 1 x (2 + 16), fusion 1 x (2 + 2 + 16)
        assert len(gates) == 36 + 18 + 20

    def test_weights_cover_gated_parameters(self, model, gates):
        """Unit weights add up to the exact gated parameter count."""
        assert gates.weights.sum() == count_gated(model.config)
        for encoder in ("vision", "text", "fusion"):
            assert gates.weights[gates.mask(encoder)].sum() == count_gated(model.config, encoder)

    def test_slots_are_contiguous(self, gates):
        """Each sublayer owns a contiguous slice of the gate vector."""
        start, stop = gates.slot("fusion", 1, "xattn")
        assert stop - start == 2
        assert all(u.sublayer == "xattn" for u in gates.units[start:stop])
        with pytest.raises(ConfigError):
            gates.slot("text", 1, "xattn")

    def test_invalid_stretch(self):
        """The stretch interval must straddle [0, 1]."""
        with pytest.raises(ConfigError):
            GateSet(_units(2), parameter(np.zeros(2), "gates.logit"), stretch_lo=0.1, stretch_hi=1.1)

    def test_logit_shape_checked(self):
        """One logit per unit."""
        with pytest.raises(ConfigError):
            GateSet(_units(3), parameter(np.zeros(2), "gates.logit"))

    def test_initial_gates_are_open(self, gates):
        """At the initial logit every deterministic gate is exactly 1."""
        np.testing.assert_array_equal(deterministic_gates(gates).data, 1.0)


class TestHardConcrete:
    """Sampling and closed-form probabilities."""

    def test_open_probability_at_zero_logit(self):
        """P(z > 0) = 11/12 at logit 0 with the default stretch."""
        g = GateSet(_units(1), parameter(np.zeros(1), "gates.logit"))
        assert open_probability(g).item() == pytest.approx(11.0 / 12.0)

    def test_monte_carlo_matches_closed_form(self):
        """Empirical P(z > 0) over 10^5 draws is within 3 standard errors of 11/12."""
        n = 100_000
        z = hard_concrete(uniform(Rng(11), (n,)), Tensor(np.zeros(n))).data
        p = 11.0 / 12.0
        assert abs(np.mean(z > 0.0) - p) < 3.0 * np.sqrt(p * (1 - p) / n)

    def test_expected_l0_matches_sampling(self):
        """expected_l0 agrees with summed empirical open rates for random logits."""
        draws = 20_000
        for seed in range(20):
            logits = np.random.default_rng(seed).normal(0.0, 2.0, size=5)
            g = GateSet(_units(5), parameter(logits, "gates.logit"))
            u = uniform(Rng(seed), (draws, 5))
            z = hard_concrete(u, Tensor(np.broadcast_to(logits, (draws, 5)))).data
            p = open_probability(g).data
            se = np.sqrt(np.sum(p * (1 - p)) / draws)
            assert abs(np.sum(np.mean(z > 0.0, axis=0)) - expected_l0(g).item()) < 4.0 * se

    def test_samples_in_unit_interval(self, gates):
        """Sampled gates lie in [0, 1] and repeat for the same stream."""
        z = sample_gates(gates, Rng(3)).data
        assert np.all((z >= 0.0) & (z <= 1.0))
        np.testing.assert_array_equal(z, sample_gates(gates, Rng(3)).data)

    def test_monotone_in_logit_and_noise(self):
        """z never decreases as either the gate logit or the noise grows."""
        logits = np.linspace(-6.0, 6.0, 61)
        noise = np.linspace(0.01, 0.99, 61)
        for u in (0.1, 0.5, 0.9):
            z = hard_concrete(np.full(61, u), Tensor(logits)).data
            assert np.all(np.diff(z) >= 0.0)
        for a in (-2.0, 0.0, 2.0):
            z = hard_concrete(noise, Tensor(np.full(61, a))).data
            assert np.all(np.diff(z) >= 0.0)

    def test_threshold_tie_is_kept(self, gates):
        """A gate exactly at the threshold stays open; anything below closes."""
        g = gates.with_logits(np.linspace(-3.0, 3.0, len(gates)))
        z = deterministic_gates(g, threshold=0.0).data
        level = z[len(gates) // 2 + 3]
        kept = deterministic_gates(g, threshold=level).data
        assert kept[len(gates) // 2 + 3] == level
        np.testing.assert_array_equal(kept > 0.0, z >= level)

    def test_gradients(self):
        """Sampling path, expected L0 and model size pass finite-difference checks."""
        units = _units(4)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            u = rng.uniform(0.3, 0.7, size=4)
            logits = rng.uniform(-1.0, 1.0, size=4)
            w = rng.normal(size=4)
            check_gradients(lambda a: (hard_concrete(u, a) * Tensor(w)).sum(), {"a": logits})
            check_gradients(lambda a: expected_l0(GateSet(units, a)), {"a": rng.normal(size=4)})
            check_gradients(lambda a: model_size(GateSet(units, a)), {"a": rng.normal(size=4)})


class TestModelSize:
    """Expected retained fraction."""

    def test_fully_open_and_closed(self, gates):
        """Very large logits give size 1; very small give 0."""
        assert model_size(gates.with_logits(np.full(len(gates), 40.0))).item() == pytest.approx(1.0)
        assert model_size(gates.with_logits(np.full(len(gates), -40.0))).item() == pytest.approx(0.0, abs=1e-12)

    def test_encoder_restriction(self, gates):
        """Closing one encoder only moves that encoder's size."""
        logits = np.full(len(gates), 40.0)
        logits[gates.mask("text")] = -40.0
        g = gates.with_logits(logits)
        assert model_size(g, "text").item() == pytest.approx(0.0, abs=1e-12)
        assert model_size(g, "vision").item() == pytest.approx(1.0)
        share = gates.weights[gates.mask("text")].sum() / gates.weights.sum()
        assert model_size(g).item() == pytest.approx(1.0 - share)

    def test_polarised_gates_match_retained_fraction(self, gates):
        """Once logits sit far from zero, the expected size tracks the kept weight share."""
        rng = np.random.default_rng(5)
        for _ in range(10):
            g = gates.with_logits(rng.choice([-8.0, 8.0], size=len(gates)))
            kept = deterministic_gates(g).data > 0.0
            retained = gates.weights[kept].sum() / gates.weights.sum()
            assert abs(model_size(g).item() - retained) <= 0.05

    def test_density_report(self, gates):
        """Deterministic densities per encoder and for the fusion head kinds."""
        logits = np.full(len(gates), 5.0)
        logits[gates.mask("fusion", "xattn")] = -5.0
        report = modal_density_report(gates.with_logits(logits))
        assert report["vision"] == 1.0 and report["text"] == 1.0
        assert report["fusion_cross_heads"] == 0.0 and report["fusion_self_heads"] == 1.0
        fusion = gates.mask("fusion")
        closed = gates.weights[gates.mask("fusion", "xattn")].sum()
        assert report["fusion"] == pytest.approx(1.0 - closed / gates.weights[fusion].sum())


class TestLagrangian:
    """Constraint loss, ascent and schedules."""

    def test_zero_at_target(self):
        """The constraint vanishes when the size equals the target."""
        state = LagrangianState.create(0.75, lam1=3.0, lam2=2.0)
        assert lagrangian_loss(state, Tensor(0.75)).item() == 0.0

    def test_value(self):
        """lam1 * gap + lam2 * gap^2."""
        state = LagrangianState.create(0.5, lam1=2.0, lam2=4.0)
        assert lagrangian_loss(state, Tensor(0.75)).item() == pytest.approx(2.0 * 0.25 + 4.0 * 0.0625)

    def test_inactive_contributes_nothing(self):
        """Inactive controllers neither add loss nor move."""
        state = LagrangianState.create(0.5, lam1=2.0, active=False)
        assert lagrangian_loss(state, Tensor(0.9)).item() == 0.0
        assert controller_step(state, 0.9, 0.1) is state

    def test_ascent_step(self):
        """Multipliers rise with the gap; lam2 never goes negative."""
        state = controller_step(LagrangianState.create(0.5), 0.7, 0.1)
        lam1, lam2 = state.values()
        assert lam1 == pytest.approx(0.02)
        assert lam2 == pytest.approx(0.004)
        below = controller_step(LagrangianState.create(0.5, lam2=-1.0), 0.5, 0.1)
        assert below.values()[1] == 0.0

    def test_ascent_rate_must_be_positive(self):
        with pytest.raises(ConfigError):
            controller_step(LagrangianState.create(0.5), 0.7, 0.0)

    def test_target_range(self):
        """Target sizes lie in (0, 1]."""
        with pytest.raises(ConfigError):
            LagrangianState.create(0.0)
        with pytest.raises(ConfigError):
            global_schedule(1.0)

    def test_global_schedule(self):
        """25% removed means a 75% size target; 0% leaves the controller inert."""
        assert global_schedule(0.25)["all"].target_size == pytest.approx(0.75)
        assert global_schedule(0.25)["all"].active
        assert not global_schedule(0.0)["all"].active

    def test_manual_schedule(self):
        """Three per-encoder controllers."""
        schedule = manual_sparsity_schedule([0.1, 0.1, 0.6])
        assert sorted(schedule) == ["fusion", "text", "vision"]
        assert schedule["fusion"].target_size == pytest.approx(0.4)
        assert all(s.active for s in schedule.values())
        assert schedule["vision"].encoder == "vision"
        with pytest.raises(ConfigError):
            manual_sparsity_schedule([0.1, 0.1])

    def test_active_controllers(self):
        """Only controllers with something to remove are active."""
        assert active_controllers(manual_sparsity_schedule([0.3, 0.0, 0.3])) == ["vision", "fusion"]
        assert active_controllers(global_schedule(0.0)) == []

    def test_gradient_reaches_only_gates(self, model):
        """The constraint moves gate logits and multipliers, never model weights."""
        gates = GateSet.for_model(model)
        gated = model.with_gates(gates)
        controllers = {"all": LagrangianState.create(0.5, lam1=1.0, lam2=1.0)}
        batch = generate(SynthSpec.for_model(model.config, "balanced", seed=0), 4).full_batch()
        with Graph() as graph:
            trace = forward(gated, batch, mode="plain", gate_values=sample_gates(gates, Rng(1)))
            lagrangian, _ = total_lagrangian(gates, controllers)
            loss = finetune_loss(task_loss(trace, batch, "balanced"), Tensor(0.0), lagrangian, 1.0)
        wrt = {**model.params, "gates.logit": gates.gate_logit, **controllers["all"].parameters()}

        constraint = graph.backward(lagrangian, wrt)
        for name in model.params:
            assert not np.any(constraint[name].data), name
        assert np.any(constraint["gates.logit"].data)
        assert constraint["lagrangian.all.lam1"].item() != 0.0

        total = graph.backward(loss, wrt)
        assert any(np.any(total[name].data) for name in model.params)

    def test_total_lagrangian_reports_sizes(self, gates):
        """Every active controller reports the size it constrains."""
        loss, sizes = total_lagrangian(gates, manual_sparsity_schedule([0.5, 0.0, 0.5]))
        assert sorted(sizes) == ["fusion", "vision"]
        assert sizes["vision"] == pytest.approx(model_size(gates, "vision").item())
        assert loss.item() == 0.0

    def test_gradients(self):
        """lagrangian_loss is differentiable in the multipliers and the gate logits."""
        units = _units(3)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            check_gradients(
                lambda a, l1, l2: lagrangian_loss(
                    LagrangianState(l1, l2, 0.6), model_size(GateSet(units, a))
                ),
                {"a": rng.normal(size=3), "l1": np.array(rng.normal()), "l2": np.array(abs(rng.normal()))},
            )
