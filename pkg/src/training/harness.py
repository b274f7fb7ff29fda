"""
Training Stages

- train_teacher: vision-language pre-training (itc + itm + mlm) of the teacher
- finetune_teacher: downstream fine-tuning of a pretrained teacher
- pretrain_distill: student pre-training with attention / hidden / logits distillation
- finetune_prune: student fine-tuning with distillation, Hard-Concrete gates and
  Lagrangian sparsity controllers, followed by structural removal
- sweep_sparsity: finetune_prune repeated over a grid of removal targets

Every stage is single-threaded and deterministic: batches, gate noise and
initial weights come from Rng streams derived from the run seed.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..errors import ConfigError, DegenerateLayerError, DivergenceError, NonFiniteError
from ..models.config import ENCODERS, VlmConfig
from ..models.surgery import removed_fraction, structurally_remove
from ..models.trimodel import VlmModel, encode_teacher, forward
from ..numcore.optim import AdamW, ParamGroup
from ..numcore.rng import Rng
from ..numcore.tensor import Graph, Tensor
from .distill import (
    DistillWeights,
    LayerMap,
    finetune_loss,
    kd_loss,
    kd_parts,
    pretrain_loss,
    task_loss,
    vlp_losses,
)
from .evaluation import evaluate
from .l0prune import (
    GateSet,
    LagrangianState,
    active_controllers,
    controller_step,
    deterministic_gates,
    global_schedule,
    modal_density_report,
    model_size,
    sample_gates,
    total_lagrangian,
)

logger = logging.getLogger(__name__)

_SHUFFLE_STREAM = 1 << 44
_GATE_STREAM = 1 << 48

STEP_FIELDS = (
    "stage", "step", "loss",
    "vlp", "itc", "itm", "mlm", "task",
    "kd", "attn", "hid", "logits",
    "lagrangian", "expected_size", "grad_norm", "lr_scale",
)


@dataclass
class TrainSettings:
    """
    Knobs shared by every training stage.

    Attributes:
        steps: Optimizer steps
        batch_size: Pairs per batch
        lr: Learning rate of model weights
        gate_lr: Learning rate of gate logits
        weight_decay: Decoupled decay of weight matrices
        warmup_frac: Share of steps with linearly increasing rate
        max_grad_norm: Global gradient-norm clip
        eval_every: Held-out evaluation period in steps (0 disables)
        target_accuracy: Early stop of train_teacher on held-out match accuracy (None disables)
        temperature: Logits distillation temperature
        include_cross_attention: Distil fusion cross-attention maps too
        ascent_rate: Multiplier ascent rate
        threshold: Inference threshold of deterministic gates
        seed: Run seed
    """

    steps: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    gate_lr: float = 0.1
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    max_grad_norm: float = 1.0
    eval_every: int = 0
    target_accuracy: Optional[float] = 0.9
    temperature: float = 1.0
    include_cross_attention: bool = True
    ascent_rate: float = 0.01
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"invalid step budget / batch size: {self.steps} / {self.batch_size}")
        if not (0.0 <= self.warmup_frac <= 1.0):
            raise ConfigError(f"warmup_frac must lie in [0, 1], got {self.warmup_frac}")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_frac * self.steps))


@dataclass
class RunMetrics:
    """
    Append-only record of one stage.

    Attributes:
        stage: Stage name
        seed: Run seed
        config_hash: Hash of the resolved run configuration
        steps: One dictionary per optimizer step
        evaluations: Held-out evaluations (step plus metrics)
        summary: Final numbers of the stage
    """

    stage: str
    seed: int = 0
    config_hash: str = ""
    steps: List[Dict[str, object]] = field(default_factory=list)
    evaluations: List[Dict[str, object]] = field(default_factory=list)
    summary: Dict[str, object] = field(default_factory=dict)

    def log_step(self, record: Mapping[str, object]):
        self.steps.append({"stage": self.stage, **record})

    def log_evaluation(self, step: int, metrics: Mapping[str, float]):
        self.evaluations.append({"stage": self.stage, "step": step, **metrics})

    def step_frame(self) -> pd.DataFrame:
        """Step records with a stable column order; absent values are 0."""
        extra = sorted({k for r in self.steps for k in r} - set(STEP_FIELDS))
        columns = list(STEP_FIELDS) + extra
        df = pd.DataFrame(self.steps, columns=columns)
        numeric = [c for c in columns if c != "stage"]
        df[numeric] = df[numeric].fillna(0.0)
        df["stage"] = self.stage
        if len(df):
            df["step"] = df["step"].astype(np.int64)
        return df

    def evaluation_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.evaluations)

    def extend(self, other: "RunMetrics"):
        self.steps.extend(other.steps)
        self.evaluations.extend(other.evaluations)


@dataclass
class StageResult:
    model: VlmModel
    metrics: RunMetrics


@dataclass
class PruneResult:
    """
    Outcome of finetune_prune.

    Attributes:
        model: Structurally pruned (sliced) student
        masked_model: Fine-tuned student with its gates still bound (unbound
            when no controller was active)
        gates: Trained gates
        controllers: Final Lagrangian controllers
        metrics: Step log and summary
        density: Per-encoder retained density under deterministic gates
    """

    model: VlmModel
    masked_model: VlmModel
    gates: GateSet
    controllers: Dict[str, LagrangianState]
    metrics: RunMetrics
    density: Dict[str, float]


# ===== SHARED LOOP =====


def _batch_stream(dataset, settings: TrainSettings):
    epoch = 0
    root = Rng(settings.seed)
    while True:
        yield from dataset.batches(settings.batch_size, root.child(_SHUFFLE_STREAM + epoch))
        epoch += 1


def _value(t) -> float:
    return t.item() if isinstance(t, Tensor) else float(t)


def _gradients(graph: Graph, loss: Tensor, wrt: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    if loss.node is None:
        return {name: Tensor(np.zeros_like(t.data)) for name, t in wrt.items()}
    return graph.backward(loss, wrt)


def _check_finite(loss_value: float, grad_norm: float, step: int, model: VlmModel, stage: str):
    if not np.isfinite(loss_value) or not np.isfinite(grad_norm):
        message = f"{stage}: loss diverged at step {step} (loss={loss_value}, grad norm={grad_norm})"
        logger.error(message)
        raise DivergenceError(message, step=step, model=model.copy())


def _global_norm(grads: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.data ** 2)) for g in grads.values())))


Objective = Callable[[VlmModel, object, int], Tuple[Tensor, Dict[str, object]]]


def _run(
    stage: str,
    model: VlmModel,
    train,
    heldout,
    settings: TrainSettings,
    objective: Objective,
    extra_groups: Sequence[ParamGroup] = (),
    after_step: Optional[Callable[[int, Dict[str, object]], None]] = None,
    stop_on_accuracy: bool = False,
) -> RunMetrics:
    """
    Optimizer loop shared by every stage.

    objective(model, batch, step) builds the loss inside the active graph and
    returns it together with the constituents to log.
    """
    metrics = RunMetrics(stage, seed=settings.seed)
    groups = [ParamGroup(model.params, settings.lr, settings.weight_decay, "weights"), *extra_groups]
    optimizer = AdamW(groups, warmup_steps=settings.warmup_steps, max_grad_norm=settings.max_grad_norm)
    wrt = {name: t for group in groups for name, t in group.params.items()}
    batches = _batch_stream(train, settings)

    logger.info(f"{stage}: {settings.steps} steps, batch {settings.batch_size}, {len(train)} samples")
    for step in range(1, settings.steps + 1):
        batch = next(batches)
        try:
            with Graph() as graph:
                loss, parts = objective(model, batch, step)
        except NonFiniteError as e:
            message = f"{stage}: non-finite values at step {step} ({e})"
            logger.error(message)
            raise DivergenceError(message, step=step, model=model.copy()) from e
        grads = _gradients(graph, loss, wrt)
        loss_value = _value(loss)
        _check_finite(loss_value, _global_norm(grads), step, model, stage)

        lr_scale = min(1.0, step / settings.warmup_steps) if settings.warmup_steps > 0 else 1.0
        grad_norm = optimizer.step(grads)
        record = {"step": step, "loss": loss_value, **{k: _value(v) for k, v in parts.items()},
                  "grad_norm": grad_norm, "lr_scale": lr_scale}
        if after_step is not None:
            after_step(step, record)
        metrics.log_step(record)
        logger.debug(f"{stage} step {step}: loss {loss_value:.6f}")

        if heldout is not None and settings.eval_every and step % settings.eval_every == 0:
            scores = evaluate(model, heldout, settings.batch_size, gate_values=_eval_gates(model))
            metrics.log_evaluation(step, scores)
            logger.info(f"{stage} step {step}: held-out metric {scores['metric']:.4f}")
            if (stop_on_accuracy and settings.target_accuracy is not None
                    and scores.get("match_accuracy", 0.0) >= settings.target_accuracy):
                logger.info(f"{stage}: match accuracy target {settings.target_accuracy} reached")
                break
    return metrics


def _eval_gates(model: VlmModel) -> Optional[Tensor]:
    return deterministic_gates(model.gates) if model.gates is not None else None


def _final_evaluation(metrics: RunMetrics, model: VlmModel, heldout, settings: TrainSettings,
                      label: str = "final") -> Dict[str, float]:
    if heldout is None:
        return {}
    scores = evaluate(model, heldout, settings.batch_size, gate_values=_eval_gates(model))
    metrics.summary[label] = scores
    return scores


# ===== STAGES =====


def _vlp_objective(model: VlmModel, batch, step: int):
    trace = forward(model, batch, mode="plain")
    itc, itm, mlm = vlp_losses(trace, batch)
    vlp = itc + itm + mlm
    return vlp, {"vlp": vlp, "itc": itc, "itm": itm, "mlm": mlm}


def train_teacher(
    config: VlmConfig,
    train,
    heldout=None,
    settings: Optional[TrainSettings] = None,
    model: Optional[VlmModel] = None,
) -> StageResult:
    """
    Vision-language pre-training with itc + itm + mlm.

    Stops when held-out match accuracy reaches settings.target_accuracy or the
    step budget is exhausted.

    Args:
        config: Teacher configuration
        train: Retrieval-task training data
        heldout: Held-out data for periodic evaluation
        settings: Training settings
        model: Start from this model instead of a fresh initialization

    Raises:
        DivergenceError: If the loss becomes non-finite (carries the last good model)
    """
    settings = settings or TrainSettings()
    model = VlmModel.initialize(config, Rng(settings.seed)) if model is None else model.copy()
    try:
        metrics = _run("teacher", model, train, heldout, settings, _vlp_objective, stop_on_accuracy=True)
    except DivergenceError:
        logger.error("Teacher training diverged")
        raise
    _final_evaluation(metrics, model, heldout, settings)
    metrics.summary["steps"] = len(metrics.steps)
    return StageResult(model, metrics)


def finetune_teacher(teacher: VlmModel, train, heldout=None,
                     settings: Optional[TrainSettings] = None) -> StageResult:
    """Fine-tune a pretrained model on the task loss of the training data's task kind."""
    settings = settings or TrainSettings()
    model = teacher.copy().with_gates(None)
    task = train.spec.task

    def objective(m, batch, step):
        loss = task_loss(forward(m, batch, mode="plain"), batch, task)
        return loss, {"task": loss}

    metrics = _run("teacher_finetune", model, train, heldout, settings, objective)
    _final_evaluation(metrics, model, heldout, settings)
    metrics.summary["steps"] = len(metrics.steps)
    return StageResult(model, metrics)


def _layer_map(student: VlmModel, teacher: VlmModel) -> LayerMap:
    try:
        return LayerMap.between(student.config, teacher.config)
    except ConfigError:
        logger.error("Layer map between student and teacher could not be built")
        raise


def _first_batch_parts(student, teacher, layer_map, batch, settings: TrainSettings) -> Dict[str, float]:
    s_trace = encode_teacher(student, batch)
    t_trace = encode_teacher(teacher, batch)
    parts = kd_parts(s_trace, t_trace, layer_map, settings.temperature, student.projection,
                     settings.include_cross_attention)
    return {k: v.item() for k, v in parts.items()}


def calibrate_weights(student: VlmModel, teacher: VlmModel, batch, settings: TrainSettings,
                      mix: float) -> DistillWeights:
    """Distillation weights that bring each KD part to 1 on the given batch."""
    parts = _first_batch_parts(student, teacher, _layer_map(student, teacher), batch, settings)
    weights = DistillWeights.calibrated(parts, mix)
    logger.info(f"Calibrated distillation weights from first batch {parts}: {weights.to_dict()}")
    return weights


def pretrain_distill(
    student: VlmModel,
    teacher: Optional[VlmModel],
    train,
    heldout=None,
    settings: Optional[TrainSettings] = None,
    weights: Optional[DistillWeights] = None,
    mix: float = 0.5,
) -> StageResult:
    """
    Pre-train the student on mix * vlp + (1 - mix) * kd.

    With mix = 1 the teacher is never run and the KD graph is never built,
    so the trajectory equals plain vision-language training. When weights is
    None they are calibrated on the first training batch.

    Raises:
        ConfigError: If mix < 1 and there is no teacher, or the layer map fails
    """
    settings = settings or TrainSettings()
    if weights is None:
        weights = DistillWeights(mix=mix) if mix == 1.0 else None
    mix = weights.mix if weights is not None else mix
    use_kd = mix < 1.0
    if use_kd and teacher is None:
        raise ConfigError("distillation with mix < 1 needs a teacher")

    model = student.copy().with_gates(None)
    layer_map = _layer_map(model, teacher) if use_kd else None
    if use_kd and weights is None:
        first = next(_batch_stream(train, settings))
        weights = calibrate_weights(model, teacher, first, settings, mix)

    def objective(m, batch, step):
        if not use_kd:
            loss, parts = _vlp_objective(m, batch, step)
            return loss, parts
        s_trace = forward(m, batch, mode="trace")
        t_trace = encode_teacher(teacher, batch)
        itc, itm, mlm = vlp_losses(s_trace, batch)
        vlp = itc + itm + mlm
        parts = kd_parts(s_trace, t_trace, layer_map, settings.temperature, m.projection,
                         settings.include_cross_attention)
        loss = pretrain_loss(vlp, parts, weights)
        return loss, {"vlp": vlp, "itc": itc, "itm": itm, "mlm": mlm,
                      "kd": kd_loss(parts, weights), **parts}

    metrics = _run("distill", model, train, heldout, settings, objective)
    metrics.summary["weights"] = weights.to_dict()
    _final_evaluation(metrics, model, heldout, settings)
    metrics.summary["steps"] = len(metrics.steps)
    return StageResult(model, metrics)


def finetune_prune(
    student: VlmModel,
    teacher: Optional[VlmModel],
    train,
    heldout=None,
    settings: Optional[TrainSettings] = None,
    gates: Optional[GateSet] = None,
    controllers: Optional[Mapping[str, LagrangianState]] = None,
    weights: Optional[DistillWeights] = None,
    mix: float = 0.5,
) -> PruneResult:
    """
    Fine-tune with distillation while learning which heads and neurons to keep.

    Each step samples Hard-Concrete gates (only when a controller is active),
    descends on weights and gate logits with
        mix * task + (1 - mix) * kd + lagrangian
    and then takes one ascent step on every active controller. Finally the
    student is sliced at the deterministic gate threshold.

    Args:
        student: Pre-trained student
        teacher: Fine-tuned teacher (required when mix < 1)
        train / heldout: Task data
        settings: Training settings
        gates: Initial gates (fresh gates at the default logit when None)
        controllers: group -> LagrangianState (a single global 25%-removal
            controller when None)
        weights: Distillation weights (calibrated on the first batch when None)
        mix: Task-loss share when weights is None

    Raises:
        DegenerateLayerError: If slicing would empty a layer (with a remediation hint)
    """
    settings = settings or TrainSettings()
    model = student.copy().with_gates(None)
    gates = gates.copy() if gates is not None else GateSet.for_model(model, threshold=settings.threshold)
    controllers = dict(controllers) if controllers is not None else global_schedule(0.25)
    active = active_controllers(controllers)
    pruning = bool(active)
    # gates only touch the model while some controller is pushing on them
    model = model.with_gates(gates if pruning else None)
    task = train.spec.task

    if weights is None:
        weights = DistillWeights(mix=mix) if mix == 1.0 else None
    mix = weights.mix if weights is not None else mix
    use_kd = mix < 1.0
    if use_kd and teacher is None:
        raise ConfigError("fine-tuning with mix < 1 needs a fine-tuned teacher")
    layer_map = _layer_map(model, teacher) if use_kd else None
    if use_kd and weights is None:
        weights = calibrate_weights(model.with_gates(None), teacher,
                                    next(_batch_stream(train, settings)), settings, mix)

    gate_root = Rng(settings.seed)
    groups = [ParamGroup(gates.parameters(), settings.gate_lr, 0.0, "gates")] if pruning else []

    def objective(m, batch, step):
        z = sample_gates(gates, gate_root.child(_GATE_STREAM + step)) if pruning else None
        s_trace = forward(m, batch, mode="trace" if use_kd else "plain", gate_values=z)
        task_value = task_loss(s_trace, batch, task)
        record: Dict[str, object] = {"task": task_value}
        kd = Tensor(0.0)
        if use_kd:
            parts = kd_parts(s_trace, encode_teacher(teacher, batch), layer_map, settings.temperature,
                             m.projection, settings.include_cross_attention)
            kd = kd_loss(parts, weights)
            record.update(parts)
        lagrangian, sizes = total_lagrangian(gates, controllers)
        record.update({"kd": kd, "lagrangian": lagrangian})
        for group, size in sizes.items():
            record[f"size.{group}"] = size
        return finetune_loss(task_value, kd, lagrangian, mix), record

    def after_step(step: int, record: Dict[str, object]):
        for group in active:
            controllers[group] = controller_step(controllers[group], record[f"size.{group}"], settings.ascent_rate)
            lam1, lam2 = controllers[group].values()
            record[f"lam1.{group}"] = lam1
            record[f"lam2.{group}"] = lam2
        if pruning:
            record["expected_size"] = model_size(gates).item()
        for encoder, value in modal_density_report(gates).items():
            record[f"density.{encoder}"] = value

    metrics = _run("finetune", model, train, heldout, settings, objective, groups, after_step)
    metrics.summary["weights"] = weights.to_dict()

    before = _final_evaluation(metrics, model, heldout, settings, "before_slicing")
    density = modal_density_report(gates)
    if pruning:
        try:
            sliced = structurally_remove(model, gates, settings.threshold)
        except DegenerateLayerError as e:
            logger.error(f"Structural removal failed: {e}")
            raise
    else:
        sliced = model.copy()
    after = _final_evaluation(metrics, sliced, heldout, settings, "after_slicing")

    metrics.summary.update({
        "steps": len(metrics.steps),
        "achieved_removed": removed_fraction(sliced.config),
        "achieved_removed_by_encoder": {e: removed_fraction(sliced.config, e) for e in ENCODERS},
        "density": density,
        "controllers": {g: {"target_size": s.target_size, "active": s.active,
                            "lam1": s.values()[0], "lam2": s.values()[1]}
                        for g, s in controllers.items()},
    })
    if before and after:
        logger.info(
            f"Pruned {metrics.summary['achieved_removed']:.1%} of gated parameters; "
            f"metric {before['metric']:.4f} -> {after['metric']:.4f}"
        )
    return PruneResult(sliced, model, gates, controllers, metrics, density)


def sweep_sparsity(
    student: VlmModel,
    teacher: Optional[VlmModel],
    train,
    heldout,
    settings: Optional[TrainSettings] = None,
    targets: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8),
    weights: Optional[DistillWeights] = None,
    mix: float = 0.5,
) -> pd.DataFrame:
    """
    finetune_prune once per removal target, always from the same student.

    Returns:
        DataFrame with columns target_removed, achieved_removed, density_vision,
        density_text, density_fusion, metric_before, metric_after
    """
    settings = settings or TrainSettings()
    rows = []
    for target in targets:
        logger.info(f"Sparsity sweep: target {target:.0%} removed")
        result = finetune_prune(student, teacher, train, heldout, settings,
                                controllers=global_schedule(target), weights=weights, mix=mix)
        summary = result.metrics.summary
        rows.append({
            "target_removed": float(target),
            "achieved_removed": summary["achieved_removed"],
            **{f"density_{e}": result.density[e] for e in ENCODERS},
            "metric_before": summary.get("before_slicing", {}).get("metric", float("nan")),
            "metric_after": summary.get("after_slicing", {}).get("metric", float("nan")),
        })
    return pd.DataFrame(rows)
