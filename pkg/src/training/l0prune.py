"""
Hard-Concrete Gates and the Lagrangian Sparsity Controller

One gate per attention head (self- and cross-attention gated separately) and
one per FFN intermediate neuron. During training each gate is sampled from a
stretched, clamped logistic (Hard-Concrete) distribution:

    u ~ U(0, 1)
    s = sigmoid(log u - log(1 - u) + gate_logit)
    s_bar = s * (hi - lo) + lo
    z = min(1, max(0, s_bar))

The expected number of open gates has the closed form
    E[L0] = sum_j sigmoid(gate_logit_j - log(-lo / hi))

and the expected retained fraction of gated parameters is constrained toward a
target t with two multipliers:
    L_lgr = lam1 * (s - t) + lam2 * (s - t)^2
Model weights and gate logits descend on the loss; the multipliers ascend.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError
from ..models.config import ENCODERS
from ..numcore import tensor as tc
from ..numcore.rng import Rng, uniform
from ..numcore.tensor import Tensor

if TYPE_CHECKING:
    from ..models.trimodel import VlmModel

logger = logging.getLogger(__name__)

STRETCH_LO = -0.1
STRETCH_HI = 1.1
THRESHOLD = 0.5
GATE_INIT = 2.5

SUBLAYERS = ("attn", "xattn", "ffn")


@dataclass(frozen=True)
class GateUnit:
    """
    A prunable unit.

    Attributes:
        encoder: 'vision', 'text' or 'fusion'
        layer: 1-based layer number
        sublayer: 'attn', 'xattn' or 'ffn'
        kind: 'head' or 'ffn_neuron'
        index: Position of the head / neuron within its sublayer
        weight: Number of parameters the unit governs (w_j)
    """

    encoder: str
    layer: int
    sublayer: str
    kind: str
    index: int
    weight: int


class GateSet:
    """
    Hard-Concrete gate parameters for every prunable unit of a model.

    Attributes:
        units: Unit descriptors in canonical order (encoder, layer, sublayer, index)
        gate_logit: Tensor (n_units,) of location parameters, named 'gates.logit'
        stretch_lo / stretch_hi: Stretch interval, lo < 0 < 1 < hi
        threshold: Deterministic gates below this value are closed at inference
    """

    def __init__(
        self,
        units: Sequence[GateUnit],
        gate_logit: Tensor,
        stretch_lo: float = STRETCH_LO,
        stretch_hi: float = STRETCH_HI,
        threshold: float = THRESHOLD,
    ):
        if not (stretch_lo < 0.0 < 1.0 < stretch_hi):
            raise ConfigError(
                f"stretch interval must satisfy lo < 0 < 1 < hi, got ({stretch_lo}, {stretch_hi})"
            )
        if gate_logit.shape != (len(units),):
            raise ConfigError(f"{gate_logit.shape} gate logits for {len(units)} units")
        self.units = list(units)
        self.gate_logit = gate_logit
        self.stretch_lo = float(stretch_lo)
        self.stretch_hi = float(stretch_hi)
        self.threshold = float(threshold)
        self.weights = np.array([u.weight for u in self.units], dtype=np.float64)
        self._slots: Dict[Tuple[str, int, str], Tuple[int, int]] = {}
        for position, unit in enumerate(self.units):
            key = (unit.encoder, unit.layer, unit.sublayer)
            start, _ = self._slots.get(key, (position, position))
            self._slots[key] = (start, position + 1)

    @classmethod
    def for_model(
        cls,
        model: "VlmModel",
        init: float = GATE_INIT,
        stretch_lo: float = STRETCH_LO,
        stretch_hi: float = STRETCH_HI,
        threshold: float = THRESHOLD,
    ) -> "GateSet":
        """One gate per head and FFN neuron of the model, all at the same logit."""
        units = list(iter_units(model.config))
        logits = tc.parameter(np.full(len(units), float(init)), "gates.logit")
        return cls(units, logits, stretch_lo, stretch_hi, threshold)

    def __len__(self) -> int:
        return len(self.units)

    def __repr__(self) -> str:
        return f"GateSet(units={len(self)}, stretch=({self.stretch_lo}, {self.stretch_hi}))"

    def slot(self, encoder: str, layer: int, sublayer: str) -> Tuple[int, int]:
        """[start, stop) of a sublayer's gates in the gate vector."""
        key = (encoder, layer, sublayer)
        if key not in self._slots:
            raise ConfigError(f"no gates for {encoder}.{layer}.{sublayer}")
        return self._slots[key]

    def mask(self, encoder: Optional[str] = None, sublayer: Optional[str] = None,
             kind: Optional[str] = None) -> np.ndarray:
        """Boolean selector over units."""
        return np.array([
            (encoder is None or u.encoder == encoder)
            and (sublayer is None or u.sublayer == sublayer)
            and (kind is None or u.kind == kind)
            for u in self.units
        ], dtype=bool)

    def parameters(self) -> Dict[str, Tensor]:
        return {"gates.logit": self.gate_logit}

    def copy(self) -> "GateSet":
        logits = tc.parameter(self.gate_logit.data.copy(), "gates.logit")
        return GateSet(self.units, logits, self.stretch_lo, self.stretch_hi, self.threshold)

    def with_logits(self, values: np.ndarray) -> "GateSet":
        logits = tc.parameter(np.asarray(values, dtype=np.float64), "gates.logit")
        return GateSet(self.units, logits, self.stretch_lo, self.stretch_hi, self.threshold)

    @property
    def log_ratio(self) -> float:
        """log(-lo / hi), the shift between gate_logit and P(z > 0)."""
        return float(np.log(-self.stretch_lo / self.stretch_hi))


def _head_weight(d: int, dk: int) -> int:
    # q, k, v columns with their biases, plus the head's rows of the output projection
    return 4 * d * dk + 3 * dk


def _neuron_weight(d: int) -> int:
    return 2 * d + 1


def iter_units(config) -> Iterator[GateUnit]:
    """Prunable units of a configuration, in canonical order."""
    for encoder in ENCODERS:
        enc = config.encoder(encoder)
        d, dk = enc.model_dim, enc.head_dim
        for layer in range(1, enc.num_layers + 1):
            for i in range(enc.heads(layer)):
                yield GateUnit(encoder, layer, "attn", "head", i, _head_weight(d, dk))
            if enc.is_cross_modal:
                for i in range(enc.cross_heads(layer)):
                    yield GateUnit(encoder, layer, "xattn", "head", i, _head_weight(d, dk))
            for i in range(enc.ffn(layer)):
                yield GateUnit(encoder, layer, "ffn", "ffn_neuron", i, _neuron_weight(d))


# ===== GATE VALUES =====


def hard_concrete(u, gate_logit, stretch_lo: float = STRETCH_LO,
                  stretch_hi: float = STRETCH_HI) -> Tensor:
    """
    Hard-Concrete transform of uniform noise u; differentiable in gate_logit.

    The clamp passes gradient only where lo-stretched values fall inside (0, 1).
    """
    u = tc.as_tensor(u)
    noise = tc.log(u) - tc.log(1.0 - u)
    s = tc.sigmoid(noise + gate_logit)
    s_bar = s * (stretch_hi - stretch_lo) + stretch_lo
    return tc.clip(s_bar, 0.0, 1.0)


def sample_gates(gates: GateSet, rng: Rng) -> Tensor:
    """Draw one z per unit (training mode)."""
    u = uniform(rng, (len(gates),))
    return hard_concrete(u, gates.gate_logit, gates.stretch_lo, gates.stretch_hi)


def deterministic_gates(gates: GateSet, threshold: Optional[float] = None) -> Tensor:
    """
    Inference-mode gate values.

    z = clamp(sigmoid(gate_logit) * (hi - lo) + lo, 0, 1), then every value
    strictly below the threshold is set to 0 (a value equal to it is kept).
    """
    threshold = gates.threshold if threshold is None else float(threshold)
    s = tc._sigmoid(gates.gate_logit.data)
    z = np.clip(s * (gates.stretch_hi - gates.stretch_lo) + gates.stretch_lo, 0.0, 1.0)
    z = np.where(z < threshold, 0.0, z)
    return Tensor(z)


def open_probability(gates: GateSet) -> Tensor:
    """P(z_j > 0) for every unit, differentiable in gate_logit."""
    return tc.sigmoid(gates.gate_logit - gates.log_ratio)


def expected_l0(gates: GateSet) -> Tensor:
    """Closed-form expected number of non-zero gates."""
    return tc.tsum(open_probability(gates))


def model_size(gates: GateSet, encoder: Optional[str] = None) -> Tensor:
    """
    Expected retained fraction of gated parameters, sum_j w_j P(z_j > 0) / sum_j w_j.

    Args:
        gates: Gate set
        encoder: Restrict to one encoder's units (None covers all)

    Raises:
        ConfigError: If the selected units govern no parameters
    """
    weights = gates.weights * (gates.mask(encoder) if encoder else 1.0)
    total = float(weights.sum())
    if total <= 0.0:
        raise ConfigError(f"no gated parameters{' in ' + encoder if encoder else ''}")
    return tc.tsum(open_probability(gates) * weights) / total


def modal_density_report(gates: GateSet, threshold: Optional[float] = None) -> Dict[str, float]:
    """
    Retained fraction of gated parameters per encoder under deterministic gates.

    Returns:
        Dictionary with 'vision', 'text', 'fusion', 'overall', plus the fusion
        self-attention and cross-attention head densities reported separately
    """
    kept = deterministic_gates(gates, threshold).data > 0.0
    report = {}

    def density(selector: np.ndarray) -> float:
        total = gates.weights[selector].sum()
        return float(gates.weights[selector & kept].sum() / total) if total > 0 else 1.0

    for encoder in ENCODERS:
        report[encoder] = density(gates.mask(encoder))
    report["overall"] = density(np.ones(len(gates), dtype=bool))
    report["fusion_self_heads"] = density(gates.mask("fusion", "attn"))
    report["fusion_cross_heads"] = density(gates.mask("fusion", "xattn"))
    return report


# ===== LAGRANGIAN CONTROLLER =====


@dataclass(frozen=True)
class LagrangianState:
    """
    Multipliers and target for one sparsity constraint.

    Attributes:
        lam1 / lam2: Scalar multiplier tensors (gradients are used for ascent)
        target_size: Retained fraction of gated parameters, in (0, 1]
        group: 'all' or an encoder name the constraint covers
        active: Inactive controllers contribute no loss and never update
    """

    lam1: Tensor
    lam2: Tensor
    target_size: float
    group: str = "all"
    active: bool = True

    def __post_init__(self):
        if not (0.0 < self.target_size <= 1.0):
            raise ConfigError(f"target size must lie in (0, 1], got {self.target_size}")

    @classmethod
    def create(cls, target_size: float, lam1: float = 0.0, lam2: float = 0.0,
               group: str = "all", active: bool = True) -> "LagrangianState":
        return cls(
            lam1=tc.parameter(np.array(float(lam1)), f"lagrangian.{group}.lam1"),
            lam2=tc.parameter(np.array(float(lam2)), f"lagrangian.{group}.lam2"),
            target_size=float(target_size),
            group=group,
            active=active,
        )

    @property
    def encoder(self) -> Optional[str]:
        return None if self.group == "all" else self.group

    def parameters(self) -> Dict[str, Tensor]:
        return {self.lam1.name: self.lam1, self.lam2.name: self.lam2}

    def values(self) -> Tuple[float, float]:
        return self.lam1.item(), self.lam2.item()


def lagrangian_loss(state: LagrangianState, size: Tensor) -> Tensor:
    """lam1 * (size - t) + lam2 * (size - t)^2; zero for an inactive controller."""
    if not state.active:
        return Tensor(0.0)
    gap = size - state.target_size
    return state.lam1 * gap + state.lam2 * gap * gap


def controller_step(state: LagrangianState, size_value: float, ascent_rate: float) -> LagrangianState:
    """
    One projected ascent step on the multipliers.

    lam1 += rate * (size - t); lam2 += rate * (size - t)^2, floored at 0.

    Raises:
        ConfigError: If ascent_rate is not positive
    """
    if ascent_rate <= 0:
        raise ConfigError(f"ascent rate must be positive, got {ascent_rate}")
    if not state.active:
        return state
    gap = float(size_value) - state.target_size
    lam1, lam2 = state.values()
    lam1 = lam1 + ascent_rate * gap
    lam2 = max(0.0, lam2 + ascent_rate * gap * gap)
    return LagrangianState.create(state.target_size, lam1, lam2, state.group, state.active)


def global_schedule(target_removed: float) -> Dict[str, LagrangianState]:
    """Single controller over all gated parameters; inert when nothing is to be removed."""
    if not (0.0 <= target_removed < 1.0):
        raise ConfigError(f"target removed fraction must lie in [0, 1), got {target_removed}")
    return {"all": LagrangianState.create(1.0 - target_removed, active=target_removed > 0.0)}


def manual_sparsity_schedule(per_encoder_targets: Sequence[float]) -> Dict[str, LagrangianState]:
    """
    Three independent controllers, one per encoder group.

    Args:
        per_encoder_targets: Removed fractions for (vision, text, fusion), each in [0, 1)

    Returns:
        encoder -> LagrangianState with target_size = 1 - removed; a zero target
        leaves that controller inactive
    """
    targets = [float(t) for t in per_encoder_targets]
    if len(targets) != len(ENCODERS):
        raise ConfigError(f"need {len(ENCODERS)} per-encoder targets, got {len(targets)}")
    schedule = {}
    for encoder, removed in zip(ENCODERS, targets):
        if not (0.0 <= removed < 1.0):
            raise ConfigError(f"{encoder} target must lie in [0, 1), got {removed}")
        schedule[encoder] = LagrangianState.create(
            round(1.0 - removed, 12), group=encoder, active=removed > 0.0
        )
    return schedule


def total_lagrangian(gates: GateSet, controllers: Mapping[str, LagrangianState]) -> Tuple[Tensor, Dict[str, float]]:
    """
    Sum of every active controller's loss, plus the expected size each one sees.
    """
    total = Tensor(0.0)
    sizes = {}
    for group, state in controllers.items():
        if not state.active:
            continue
        size = model_size(gates, state.encoder)
        sizes[group] = size.item()
        total = total + lagrangian_loss(state, size)
    return total, sizes


def active_controllers(controllers: Mapping[str, LagrangianState]) -> List[str]:
    return [group for group, state in controllers.items() if state.active]
