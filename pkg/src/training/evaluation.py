"""
Evaluation Metrics and Head-Pruning Sensitivity

Retrieval recall@k within evaluation batches (text retrieval: image -> text,
image retrieval: text -> image), match accuracy over positives and hard
in-batch negatives, classification accuracy and masked-token accuracy.

sweep_heads zeroes the least important heads of one encoder at a time and
reports the task metric per pruned fraction.
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..errors import ConfigError
from ..models.config import ENCODERS
from ..models.trimodel import VlmModel, forward
from ..numcore.tensor import Tensor, no_grad
from .l0prune import GateSet, deterministic_gates

logger = logging.getLogger(__name__)

RECALL_KS = (1, 5, 10)
CLASSIFICATION_TASKS = ("vision_only", "text_only", "balanced")


def retrieval_ranks(similarities: np.ndarray) -> Dict[str, np.ndarray]:
    """
    0-based rank of the true partner for every query.

    Args:
        similarities: (B, B) image-to-text scores, true pairs on the diagonal

    Returns:
        {'tr': ranks of captions per image, 'ir': ranks of images per caption}
    """
    sims = np.asarray(similarities)
    diag = np.diag(sims)
    # ties count against the query
    tr = (sims >= diag[:, None]).sum(axis=1) - 1
    ir = (sims >= diag[None, :]).sum(axis=0) - 1
    return {"tr": tr, "ir": ir}


def recall_at_k(ranks: np.ndarray, k: int) -> float:
    return float(np.mean(np.asarray(ranks) < k)) if len(ranks) else 0.0


def _chunks(n: int, batch_size: int) -> List[np.ndarray]:
    return [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def evaluate(
    model: VlmModel,
    dataset,
    batch_size: int = 32,
    gate_values: Optional[Tensor] = None,
    task: Optional[str] = None,
) -> Dict[str, float]:
    """
    Metrics of a model on a dataset, evaluated batch by batch.

    Args:
        model: Model to evaluate (gate_values requires a bound GateSet)
        dataset: Dataset to score
        batch_size: Evaluation batch size (recall is computed within batches)
        gate_values: Optional per-unit gate vector applied during the forward pass
        task: Task kind; defaults to the dataset's

    Returns:
        Dictionary of metrics; 'metric' is the headline number of the task
        (mean recall@1 for retrieval, match accuracy for match, class accuracy otherwise)
    """
    task = task or dataset.spec.task
    ranks: Dict[str, List[np.ndarray]] = {"tr": [], "ir": []}
    match_hits, match_total = 0, 0
    class_hits, class_total = 0, 0
    mlm_hits, mlm_total = 0, 0

    with no_grad():
        for idx in _chunks(len(dataset), batch_size):
            batch = dataset.batch(idx)
            trace = forward(model, batch, mode="plain", gate_values=gate_values)

            if task == "retrieval" and len(batch) >= 2:
                batch_ranks = retrieval_ranks(trace.logits["itc"].data)
                ranks["tr"].append(batch_ranks["tr"])
                ranks["ir"].append(batch_ranks["ir"])

            if task in ("retrieval", "match"):
                predicted = np.argmax(trace.logits["itm"].data, axis=-1)
                match_hits += int(np.sum(predicted == batch.match_labels))
                match_total += len(batch)
                if trace.itm_negative_logits is not None:
                    negatives = np.argmax(trace.itm_negative_logits.data, axis=-1)
                    match_hits += int(np.sum(negatives == 0))
                    match_total += negatives.size

            if task in CLASSIFICATION_TASKS:
                predicted = np.argmax(trace.logits["cls"].data, axis=-1)
                class_hits += int(np.sum(predicted == batch.class_labels))
                class_total += len(batch)

            if "mlm" in trace.logits:
                predicted = np.argmax(trace.logits["mlm"].data, axis=-1)
                mlm_hits += int(np.sum(predicted == batch.mlm_targets))
                mlm_total += predicted.size

    metrics: Dict[str, float] = {}
    if task == "retrieval":
        tr = np.concatenate(ranks["tr"]) if ranks["tr"] else np.array([])
        ir = np.concatenate(ranks["ir"]) if ranks["ir"] else np.array([])
        for k in RECALL_KS:
            metrics[f"tr_r{k}"] = recall_at_k(tr, k)
            metrics[f"ir_r{k}"] = recall_at_k(ir, k)
        metrics["r_mean"] = float(np.mean([metrics[f"{d}_r{k}"] for d in ("tr", "ir") for k in RECALL_KS]))
    if match_total:
        metrics["match_accuracy"] = match_hits / match_total
    if class_total:
        metrics["class_accuracy"] = class_hits / class_total
    if mlm_total:
        metrics["mlm_accuracy"] = mlm_hits / mlm_total

    if task == "retrieval":
        metrics["metric"] = (metrics["tr_r1"] + metrics["ir_r1"]) / 2.0
    elif task == "match":
        metrics["metric"] = metrics.get("match_accuracy", 0.0)
    else:
        metrics["metric"] = metrics.get("class_accuracy", 0.0)
    return metrics


# ===== HEAD SENSITIVITY =====


def head_importance(
    model: VlmModel,
    dataset,
    layout: GateSet,
    gates: Optional[GateSet] = None,
    batch_size: int = 32,
) -> np.ndarray:
    """
    Importance of every head unit in layout order (FFN units get +inf).

    Mean deterministic gate value when gates exist, otherwise the mean L2
    norm of the head's context vectors over the dataset.
    """
    importance = np.full(len(layout), np.inf)
    heads = layout.mask(kind="head")
    if gates is not None:
        importance[heads] = deterministic_gates(gates, threshold=0.0).data[heads]
        return importance

    totals: Dict[str, List[np.ndarray]] = {}
    chunks = _chunks(len(dataset), batch_size)
    with no_grad():
        for idx in chunks:
            trace = forward(model, dataset.batch(idx), mode="trace")
            for key, norms in trace.head_norms.items():
                if key not in totals:
                    totals[key] = [n * len(idx) for n in norms]
                else:
                    totals[key] = [t + n * len(idx) for t, n in zip(totals[key], norms)]

    for encoder in ENCODERS:
        for sublayer, key in (("attn", encoder), ("xattn", f"{encoder}.cross")):
            for layer, norms in enumerate(totals.get(key, []), start=1):
                start, stop = layout.slot(encoder, layer, sublayer)
                importance[start:stop] = norms / len(dataset)
    return importance


def sweep_heads(
    model: VlmModel,
    dataset,
    fractions: Sequence[float],
    encoder: str,
    gates: Optional[GateSet] = None,
    batch_size: int = 32,
    task: Optional[str] = None,
) -> pd.DataFrame:
    """
    Task metric as a growing fraction of one encoder's heads is zeroed.

    Heads (self- and, for fusion, cross-attention) are removed lowest importance
    first; other encoders are untouched and the model itself is never modified.

    Args:
        model: Fine-tuned model
        dataset: Evaluation data
        fractions: Fractions of the encoder's heads to zero, each in [0, 1]
        encoder: 'vision', 'text' or 'fusion'
        gates: Optional trained gates; their values define importance and
            stay applied to every unit outside the sweep

    Returns:
        DataFrame with columns encoder, fraction, heads_pruned, heads_total, metric

    Raises:
        ConfigError: If a fraction lies outside [0, 1] or the encoder is unknown
    """
    if encoder not in ENCODERS:
        raise ConfigError(f"unknown encoder '{encoder}'")
    for fraction in fractions:
        if not (0.0 <= fraction <= 1.0):
            raise ConfigError(f"head fraction must lie in [0, 1], got {fraction}")

    base_model = model.with_gates(None)
    layout = GateSet.for_model(base_model)
    importance = head_importance(base_model, dataset, layout, gates, batch_size)
    candidates = np.nonzero(layout.mask(encoder=encoder, kind="head"))[0]
    order = candidates[np.argsort(importance[candidates], kind="stable")]
    base = deterministic_gates(gates).data if gates is not None else np.ones(len(layout))
    gated = base_model.with_gates(layout)

    rows = []
    for fraction in fractions:
        k = int(round(fraction * len(candidates)))
        z = base.copy()
        z[order[:k]] = 0.0
        metrics = evaluate(gated, dataset, batch_size, gate_values=Tensor(z), task=task)
        rows.append({
            "encoder": encoder,
            "fraction": float(fraction),
            "heads_pruned": k,
            "heads_total": int(len(candidates)),
            "metric": metrics["metric"],
        })
        logger.debug(f"{encoder} heads pruned {k}/{len(candidates)}: metric {metrics['metric']:.4f}")

    logger.info(f"Head sweep on {encoder} encoder over {len(rows)} fractions")
    return pd.DataFrame(rows, columns=["encoder", "fraction", "heads_pruned", "heads_total", "metric"])
