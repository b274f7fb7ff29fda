"""
Model Surgery

Building a half-depth student from a teacher, physically deleting gated-off
heads and FFN neurons, and counting what remains.
"""

import logging
from dataclasses import replace
from typing import TYPE_CHECKING, Dict, Optional, Tuple

import numpy as np

from ..errors import DegenerateLayerError
from ..numcore import tensor as tc
from .config import ENCODERS, VlmConfig, halve_depth, is_gated, parameter_shapes, parse_name
from .trimodel import VlmModel

if TYPE_CHECKING:
    from ..training.l0prune import GateSet

logger = logging.getLogger(__name__)

REMEDIATION_HINT = "lower the target sparsity or the threshold"


def shrink_from_teacher(teacher: VlmModel) -> VlmModel:
    """
    Half-depth student initialized from the teacher's even-numbered layers.

    Student layer j takes a copy of teacher layer 2j in every encoder;
    embeddings, final norms and task heads are copied verbatim.

    Raises:
        ConfigError: If any teacher encoder has an odd depth
    """
    config = halve_depth(teacher.config)
    params = {}
    for name in parameter_shapes(config):
        scope, slot, sublayer, matrix = parse_name(name)
        source = name
        if scope in ENCODERS and slot.isdigit():
            source = f"{scope}.{2 * int(slot)}.{sublayer}.{matrix}"
        params[name] = tc.parameter(teacher[source].data.copy(), name)

    student = VlmModel(config, params, projection=teacher.projection)
    logger.info(
        f"Student {config.layer_counts} initialized from teacher {teacher.config.layer_counts} "
        f"({student.parameter_count():,} of {teacher.parameter_count():,} parameters)"
    )
    return student


# ===== STRUCTURAL REMOVAL =====


def _head_columns(kept: np.ndarray, head_dim: int) -> np.ndarray:
    return (kept[:, None] * head_dim + np.arange(head_dim)[None, :]).reshape(-1)


def _slice_attention(params: Dict[str, np.ndarray], prefix: str, z: np.ndarray,
                     head_dim: int) -> int:
    kept = np.nonzero(z > 0.0)[0]
    cols = _head_columns(kept, head_dim)
    for m in ("q", "k", "v"):
        params[f"{prefix}.w{m}"] = params[f"{prefix}.w{m}"][:, cols]
        params[f"{prefix}.b{m}"] = params[f"{prefix}.b{m}"][cols]
    scale = np.repeat(z[kept], head_dim)
    params[f"{prefix}.wo"] = params[f"{prefix}.wo"][cols] * scale[:, None]
    return int(kept.size)


def _slice_ffn(params: Dict[str, np.ndarray], prefix: str, z: np.ndarray) -> int:
    kept = np.nonzero(z > 0.0)[0]
    params[f"{prefix}.w1"] = params[f"{prefix}.w1"][:, kept]
    params[f"{prefix}.b1"] = params[f"{prefix}.b1"][kept]
    params[f"{prefix}.w2"] = params[f"{prefix}.w2"][kept] * z[kept][:, None]
    return int(kept.size)


def _override(counts: Tuple[int, ...], default: int, previous) -> Optional[Tuple[int, ...]]:
    if previous is None and all(c == default for c in counts):
        return None
    return counts


def structurally_remove(model: VlmModel, gates: "GateSet",
                        threshold: Optional[float] = None) -> VlmModel:
    """
    Delete every head and FFN neuron whose deterministic gate is below threshold.

    Retained units keep their deterministic gate value folded into the output
    projection rows (wo for heads, w2 for neurons), so the sliced model computes
    the same function as the gate-masked one.

    Args:
        model: Model the gates were built for
        gates: GateSet bound to the model's layout
        threshold: Override of gates.threshold

    Returns:
        New VlmModel with per-layer head / neuron counts in its config and no gates

    Raises:
        DegenerateLayerError: If a layer would lose all heads, cross heads or neurons
    """
    from ..training.l0prune import deterministic_gates

    z = deterministic_gates(gates, threshold).data
    params = {name: p.data.copy() for name, p in model.params.items()}
    encoders = {}

    for encoder in ENCODERS:
        enc = model.config.encoder(encoder)
        heads, cross, ffn = [], [], []
        for layer in range(1, enc.num_layers + 1):
            prefix = f"{encoder}.{layer}"
            sublayers = [("attn", "attention heads", heads)]
            if enc.is_cross_modal:
                sublayers.append(("xattn", "cross-attention heads", cross))
            for sublayer, unit, counts in sublayers:
                start, stop = gates.slot(encoder, layer, sublayer)
                kept = _slice_attention(params, f"{prefix}.{sublayer}", z[start:stop], enc.head_dim)
                if kept == 0:
                    raise DegenerateLayerError(f"{prefix}.{sublayer}", unit, REMEDIATION_HINT)
                counts.append(kept)
            start, stop = gates.slot(encoder, layer, "ffn")
            kept = _slice_ffn(params, f"{prefix}.ffn", z[start:stop])
            if kept == 0:
                raise DegenerateLayerError(f"{prefix}.ffn", "FFN neurons", REMEDIATION_HINT)
            ffn.append(kept)

        encoders[encoder] = replace(
            enc,
            layer_heads=_override(tuple(heads), enc.num_heads, enc.layer_heads),
            layer_cross_heads=(
                _override(tuple(cross), enc.num_heads, enc.layer_cross_heads)
                if enc.is_cross_modal else None
            ),
            layer_ffn=_override(tuple(ffn), enc.ffn_dim, enc.layer_ffn),
        )

    config = model.config.with_encoders(**encoders)
    sliced = VlmModel(
        config,
        {name: tc.parameter(data, name) for name, data in params.items()},
        projection=model.projection,
    )
    before, after = count_gated(model.config), count_gated(config)
    logger.info(
        f"Structural removal kept {after:,} of {before:,} gated parameters "
        f"({removed_fraction(config):.1%} removed overall)"
    )
    return sliced


# ===== COUNTING =====


def count_gated(config: VlmConfig, encoder: Optional[str] = None) -> int:
    """Exact number of gated parameters in a (possibly sliced) configuration."""
    return int(sum(
        int(np.prod(shape))
        for name, shape in parameter_shapes(config).items()
        if is_gated(name) and (encoder is None or name.startswith(f"{encoder}."))
    ))


def removed_fraction(config: VlmConfig, encoder: Optional[str] = None) -> float:
    """1 - gated parameters / gated parameters of the same layout before any slicing."""
    total = count_gated(config.unpruned(), encoder)
    return 1.0 - count_gated(config, encoder) / total if total else 0.0


def _attention_macs(n_q: int, n_kv: int, d: int, width: int) -> int:
    projections = n_q * d * width + 2 * n_kv * d * width + n_q * width * d
    products = 2 * n_q * n_kv * width
    return projections + products


def encoder_macs(config: VlmConfig, encoder: str) -> int:
    """
    Multiply-accumulates of one encoder for a single sample.

    Counts Q/K/V/O projections, score and context products and both FFN
    matrices; the vision count includes the patch embedding. Text and fusion
    assume a full-length caption.
    """
    enc = config.encoder(encoder)
    d = config.model_dim
    n_vision = config.num_patches + 1
    n = n_vision if encoder == "vision" else config.max_text_len
    total = config.num_patches * config.patch_dim * d if encoder == "vision" else 0
    for layer in range(1, enc.num_layers + 1):
        total += _attention_macs(n, n, d, enc.heads(layer) * enc.head_dim)
        if enc.is_cross_modal:
            total += _attention_macs(n, n_vision, d, enc.cross_heads(layer) * enc.head_dim)
        total += 2 * n * d * enc.ffn(layer)
    return int(total)


def cost_report(model: VlmModel) -> Dict[str, Dict[str, float]]:
    """
    Per-encoder parameter and compute accounting.

    Returns:
        encoder -> {'parameters', 'gated', 'gated_full', 'retained', 'removed',
        'removed_fraction', 'macs'}; an 'overall' row sums the encoders
    """
    config = model.config
    full = config.unpruned()
    report = {}
    for encoder in ENCODERS:
        gated, gated_full = count_gated(config, encoder), count_gated(full, encoder)
        report[encoder] = {
            "parameters": model.parameter_count(encoder),
            "gated": gated,
            "gated_full": gated_full,
            "retained": gated,
            "removed": gated_full - gated,
            "removed_fraction": removed_fraction(config, encoder),
            "macs": encoder_macs(config, encoder),
        }
    overall = {key: sum(row[key] for row in report.values())
               for key in ("parameters", "gated", "gated_full", "retained", "removed", "macs")}
    overall["parameters"] = model.parameter_count()
    overall["removed_fraction"] = removed_fraction(config)
    report["overall"] = overall
    return report
