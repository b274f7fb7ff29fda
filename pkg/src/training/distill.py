"""
Distillation Losses

Attention-map, hidden-state and logits distillation between a student trace
and a teacher trace, the vision-language pre-training losses, and the two
training objectives built from them:

    pretrain = mix * vlp + (1 - mix) * (w_attn * attn + w_hid * hid + w_logits * logits)
    finetune = mix * task + (1 - mix) * kd + lagrangian

Student layer j is supervised by teacher layer r * j, where r is the depth
ratio of the two encoders (2 for the presets, 1 for self-distillation).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ConfigError, ShapeError
from ..models.config import ENCODERS, VlmConfig
from ..models.trimodel import ForwardTrace
from ..numcore import tensor as tc
from ..numcore.tensor import Tensor

logger = logging.getLogger(__name__)

KD_PARTS = ("attn", "hid", "logits")
DISTILLED_LOGITS = ("itc", "itm", "mlm", "cls")
TASK_KINDS = ("retrieval", "match", "vision_only", "text_only", "balanced")


@dataclass(frozen=True)
class DistillWeights:
    """
    Loss-mixing coefficients.

    Attributes:
        w_attn: Weight of the attention-map term
        w_hid: Weight of the hidden-state term
        w_logits: Weight of the logits term
        mix: Share of the task / VLP loss, in [0, 1]; the KD sum gets 1 - mix
    """

    w_attn: float = 1.0
    w_hid: float = 1.0
    w_logits: float = 1.0
    mix: float = 0.5

    def __post_init__(self):
        for label in ("w_attn", "w_hid", "w_logits", "mix"):
            value = getattr(self, label)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{label} must be a non-negative number, got {value}")
        if self.mix > 1.0:
            raise ConfigError(f"mix must lie in [0, 1], got {self.mix}")

    @classmethod
    def calibrated(cls, parts: Mapping[str, float], mix: float = 0.5) -> "DistillWeights":
        """
        Weights that rescale each KD part to 1 on the batch it was measured on.

        A part that is exactly zero keeps weight 1.
        """
        def inverse(value: float) -> float:
            return 1.0 / value if value > 0 else 1.0

        return cls(
            w_attn=inverse(float(parts["attn"])),
            w_hid=inverse(float(parts["hid"])),
            w_logits=inverse(float(parts["logits"])),
            mix=mix,
        )

    def to_dict(self) -> Dict[str, float]:
        return {"w_attn": self.w_attn, "w_hid": self.w_hid, "w_logits": self.w_logits, "mix": self.mix}


@dataclass(frozen=True)
class LayerMap:
    """
    Student -> teacher layer pairs per encoder (1-based).

    Attributes:
        pairs: encoder -> ((student_layer, teacher_layer), ...)
    """

    pairs: Mapping[str, Tuple[Tuple[int, int], ...]]

    @classmethod
    def between(cls, student: VlmConfig, teacher: VlmConfig) -> "LayerMap":
        """
        Map student layer j to teacher layer r * j in every encoder.

        Raises:
            ConfigError: If a teacher depth is not a whole multiple of the student's
        """
        pairs = {}
        for encoder in ENCODERS:
            s_depth = student.encoder(encoder).num_layers
            t_depth = teacher.encoder(encoder).num_layers
            if s_depth == 0:
                pairs[encoder] = ()
                continue
            if t_depth % s_depth != 0 or t_depth < s_depth:
                raise ConfigError(
                    f"cannot map {s_depth} student layers onto {t_depth} teacher layers ({encoder})"
                )
            ratio = t_depth // s_depth
            pairs[encoder] = tuple((j, ratio * j) for j in range(1, s_depth + 1))
        return cls(pairs)

    @classmethod
    def identity(cls, config: VlmConfig) -> "LayerMap":
        return cls.between(config, config)

    def __len__(self) -> int:
        return sum(len(p) for p in self.pairs.values())


# ===== DISTILLATION TERMS =====


def _mse(student: Tensor, teacher: Tensor, what: str) -> Tensor:
    if student.shape != teacher.shape:
        raise ShapeError(f"{what}: student {student.shape} vs teacher {teacher.shape}")
    diff = student - teacher.detach()
    return tc.mean(diff * diff)


def attn_loss(
    student_trace: ForwardTrace,
    teacher_trace: ForwardTrace,
    layer_map: LayerMap,
    include_cross: bool = True,
) -> Tensor:
    """
    Attention-map distillation.

    For each mapped layer pair the squared error is averaged over every matrix
    element and over heads (the 1/h factor); layers and encoders are summed.
    Fusion cross-attention maps are added under the same rule unless
    include_cross is False.
    """
    total = Tensor(0.0)
    for encoder, pairs in layer_map.pairs.items():
        s_maps = student_trace.attentions.get(encoder, [])
        t_maps = teacher_trace.attentions.get(encoder, [])
        for j, t in pairs:
            total = total + _mse(s_maps[j - 1], t_maps[t - 1], f"{encoder} attention, layer {j}")
            if include_cross and encoder == "fusion":
                total = total + _mse(
                    student_trace.cross_attentions[j - 1],
                    teacher_trace.cross_attentions[t - 1],
                    f"fusion cross-attention, layer {j}",
                )
    return total


def hidden_loss(
    student_trace: ForwardTrace,
    teacher_trace: ForwardTrace,
    layer_map: LayerMap,
    projection: Optional[Tensor] = None,
) -> Tensor:
    """Sum over mapped layers of all three encoders of MSE(H_s @ W, H_t)."""
    total = Tensor(0.0)
    for encoder, pairs in layer_map.pairs.items():
        s_states = student_trace.hidden.get(encoder, [])
        t_states = teacher_trace.hidden.get(encoder, [])
        for j, t in pairs:
            h = s_states[j - 1]
            if projection is not None:
                h = h @ projection
            total = total + _mse(h, t_states[t - 1], f"{encoder} hidden states, layer {j}")
    return total


def logits_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """
    KL(softmax(teacher / T) || softmax(student / T)), averaged over rows.

    No T^2 factor is applied.

    Raises:
        ConfigError: If temperature is not positive
        ShapeError: If the logit shapes differ
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    student_logits = tc.as_tensor(student_logits)
    teacher_logits = tc.as_tensor(teacher_logits).detach()
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"logits: student {student_logits.shape} vs teacher {teacher_logits.shape}")
    if student_logits.ndim == 1:
        student_logits = tc.reshape(student_logits, (1, -1))
        teacher_logits = tc.reshape(teacher_logits, (1, -1))
    if student_logits.shape[0] == 0:
        return Tensor(0.0)

    log_p_t = tc.log_softmax(teacher_logits / temperature)
    log_p_s = tc.log_softmax(student_logits / temperature)
    p_t = Tensor(np.exp(log_p_t.data))
    return tc.mean(tc.tsum(p_t * (log_p_t - log_p_s), axis=-1))


def trace_logits_loss(student_trace: ForwardTrace, teacher_trace: ForwardTrace,
                      temperature: float = 1.0) -> Tensor:
    """logits_loss summed over the task heads both traces produced."""
    total = Tensor(0.0)
    for key in DISTILLED_LOGITS:
        if key in student_trace.logits and key in teacher_trace.logits:
            total = total + logits_loss(student_trace.logits[key], teacher_trace.logits[key], temperature)
    return total


def kd_parts(
    student_trace: ForwardTrace,
    teacher_trace: ForwardTrace,
    layer_map: LayerMap,
    temperature: float = 1.0,
    projection: Optional[Tensor] = None,
    include_cross: bool = True,
) -> Dict[str, Tensor]:
    """The three distillation terms keyed 'attn', 'hid', 'logits'."""
    return {
        "attn": attn_loss(student_trace, teacher_trace, layer_map, include_cross),
        "hid": hidden_loss(student_trace, teacher_trace, layer_map, projection),
        "logits": trace_logits_loss(student_trace, teacher_trace, temperature),
    }


# ===== OBJECTIVES =====


PartsLike = Union[Mapping[str, Tensor], Sequence[Tensor]]


def _as_parts(parts: PartsLike) -> Tuple[Tensor, Tensor, Tensor]:
    if isinstance(parts, Mapping):
        values = [parts[key] for key in KD_PARTS]
    else:
        values = list(parts)
    if len(values) != 3:
        raise ConfigError(f"expected three distillation parts, got {len(values)}")
    return tuple(tc.as_tensor(v) for v in values)


def kd_loss(parts: PartsLike, w: DistillWeights) -> Tensor:
    attn, hid, logits = _as_parts(parts)
    return attn * w.w_attn + hid * w.w_hid + logits * w.w_logits


def pretrain_loss(vlp: Tensor, parts: PartsLike, w: DistillWeights) -> Tensor:
    """mix * vlp + (1 - mix) * (w_attn * attn + w_hid * hid + w_logits * logits)."""
    vlp = tc.as_tensor(vlp)
    if w.mix == 1.0:
        return vlp
    return vlp * w.mix + kd_loss(parts, w) * (1.0 - w.mix)


def finetune_loss(task: Tensor, kd: Tensor, lagrangian: Tensor, mix: float) -> Tensor:
    """mix * task + (1 - mix) * kd + lagrangian; the Lagrangian term is unweighted."""
    if not (0.0 <= mix <= 1.0):
        raise ConfigError(f"mix must lie in [0, 1], got {mix}")
    task, kd, lagrangian = tc.as_tensor(task), tc.as_tensor(kd), tc.as_tensor(lagrangian)
    if mix == 1.0:
        return task + lagrangian
    return task * mix + kd * (1.0 - mix) + lagrangian


# ===== VISION-LANGUAGE LOSSES =====


def contrastive_loss(trace: ForwardTrace) -> Tensor:
    """Symmetric cross-entropy over the image-text similarity matrix."""
    sims = trace.logits["itc"]
    n = sims.shape[0]
    if n < 2:
        raise ConfigError(f"contrastive loss needs at least 2 pairs per batch, got {n}")
    targets = np.arange(n)
    image_to_text = tc.cross_entropy(sims, targets)
    text_to_image = tc.cross_entropy(tc.transpose(sims), targets)
    return (image_to_text + text_to_image) * 0.5


def matching_loss(trace: ForwardTrace, batch) -> Tensor:
    """
    Two-class cross-entropy of the match head.

    Rows are the batch's own pairs (labelled by batch.match_labels) followed by
    the hard in-batch negatives, which are always labelled 0.
    """
    logits = trace.logits["itm"]
    labels = np.asarray(batch.match_labels, dtype=np.int64)
    if trace.itm_negative_logits is not None:
        logits = tc.concat([logits, trace.itm_negative_logits], axis=0)
        labels = np.concatenate([labels, np.zeros(trace.itm_negative_logits.shape[0], dtype=np.int64)])
    return tc.cross_entropy(logits, labels)


def mlm_loss(trace: ForwardTrace, batch) -> Tensor:
    """Cross-entropy at masked positions; 0 when nothing is masked."""
    if "mlm" not in trace.logits:
        return Tensor(0.0)
    return tc.cross_entropy(trace.logits["mlm"], batch.mlm_targets)


def vlp_losses(trace: ForwardTrace, batch) -> Tuple[Tensor, Tensor, Tensor]:
    """
    (itc, itm, mlm) pre-training losses.

    Raises:
        ConfigError: If the batch has fewer than 2 pairs
    """
    return contrastive_loss(trace), matching_loss(trace, batch), mlm_loss(trace, batch)


def task_loss(trace: ForwardTrace, batch, task: str) -> Tensor:
    """
    Downstream objective of a task kind.

    retrieval: contrastive + matching; match: match-head cross-entropy against
    the batch's match labels; vision_only / text_only / balanced: classification
    head cross-entropy.
    """
    if task == "retrieval":
        return contrastive_loss(trace) + matching_loss(trace, batch)
    if task == "match":
        return tc.cross_entropy(trace.logits["itm"], batch.match_labels)
    if task in TASK_KINDS:
        return tc.cross_entropy(trace.logits["cls"], batch.class_labels)
    raise ConfigError(f"unknown task kind '{task}'")
