"""
Subcommands

Each cmd_* function runs one pipeline stage from a resolved RunConfig and
leaves its artifacts in config.out_dir:

- config.json            resolved configuration (written first)
- <stage>_metrics.jsonl  one record per optimizer step
- <stage>_eval.jsonl     periodic held-out evaluations
- <stage>_summary.json   final numbers of the stage
- <stage>_report.xlsx    human-facing workbook
- *.ckpt                 checkpoints
- *.csv / *.html         tables and figures of sweeps
- timing.json            wall-clock seconds per stage

Functions return the process exit status; errors propagate to main.py.
"""

import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Optional, Tuple

import pandas as pd

from ..data import checkpoint
from ..data.cache import CACHE_SUBDIR, clear_cache, get_cache_info, get_cached_or_generate
from ..data.synth import Dataset, SynthSpec
from ..errors import ConfigError, DivergenceError
from ..models.config import ENCODERS, VlmConfig, parameter_shapes, preset_config, preset_of
from ..models.surgery import cost_report, shrink_from_teacher
from ..models.trimodel import VlmModel
from ..training.evaluation import evaluate, sweep_heads
from ..training.harness import (
    RunMetrics,
    finetune_prune,
    finetune_teacher,
    pretrain_distill,
    sweep_sparsity,
    train_teacher,
)
from ..training.l0prune import GateSet, deterministic_gates, modal_density_report
from ..utils.export import (
    create_simple_csv_export,
    create_sweep_figure,
    write_excel_report,
    write_json,
    write_jsonl,
    write_sweep_figure,
)
from ..utils.formatting import format_cost_table, format_metrics, format_percentage
from .config import RunConfig

logger = logging.getLogger(__name__)


class _Timer:
    """Wall-clock seconds per stage, kept out of the metrics files."""

    def __init__(self):
        self.seconds: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = round(time.perf_counter() - start, 3)

    def write(self, out: Path):
        write_json(self.seconds, out / "timing.json")


# ===== SHARED HELPERS =====


def _prepare(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write(out)
    return out


def _data(config: RunConfig, model_config: VlmConfig, task: str, out: Path) -> Tuple[Dataset, Dataset]:
    """Training and held-out data; held-out samples follow the training indices."""
    spec = SynthSpec.for_model(model_config, task, config.seed)
    cache_dir = out / CACHE_SUBDIR if config.cache else None
    if cache_dir is not None and config.refresh_cache:
        clear_cache(cache_dir)
    train = get_cached_or_generate(spec, config.train_size, 0, cache_dir, config.workers)
    heldout = get_cached_or_generate(spec, config.eval_size, config.train_size, cache_dir, config.workers)
    if cache_dir is not None:
        info = get_cache_info(cache_dir)
        logger.info(f"Dataset cache: {info['files']} files, {info['size_mb']:.2f} MB in {info['path']}")
    return train, heldout


def _load_model(path: Optional[str], label: str) -> checkpoint.Checkpoint:
    if not path:
        raise ConfigError(f"a {label} checkpoint is required (--{label.replace('_', '-')})")
    return checkpoint.load(path)


def _write_stage(out: Path, metrics: RunMetrics, config: RunConfig,
                 extra_sheets: Optional[Dict[str, pd.DataFrame]] = None):
    """Metrics, evaluations, summary and workbook of one stage."""
    metrics.config_hash = config.config_hash()
    steps = metrics.step_frame()
    evaluations = metrics.evaluation_frame()
    write_jsonl(steps, out / f"{metrics.stage}_metrics.jsonl")
    write_jsonl(evaluations, out / f"{metrics.stage}_eval.jsonl")
    summary = {"stage": metrics.stage, "seed": metrics.seed, "config_hash": metrics.config_hash,
               **metrics.summary}
    write_json(summary, out / f"{metrics.stage}_summary.json")

    sheets = {"Steps": steps, "Evaluations": evaluations, **(extra_sheets or {})}
    write_excel_report(out / f"{metrics.stage}_report.xlsx", sheets,
                       title=f"{metrics.stage} run (seed {metrics.seed})", summary=summary)


@contextmanager
def _divergence_guard(out: Path, config: RunConfig):
    """Save the last finite model before a divergence propagates."""
    try:
        yield
    except DivergenceError as e:
        if e.model is not None:
            checkpoint.save(out / "diverged.ckpt", e.model, seed=config.seed, step=max(e.step - 1, 0))
        raise


def _checkpoint_preset(config: RunConfig, model_config: VlmConfig) -> str:
    """Preset a checkpoint was built from; --preset only when the layout is custom."""
    match = preset_of(model_config)
    if match is None:
        logger.warning(f"Checkpoint layout matches no preset; sizing against --preset {config.preset}")
        return config.preset
    if match[0] != config.preset:
        logger.warning(f"Checkpoint is a {match[0]} {match[1]}; ignoring --preset {config.preset} for sizes")
    return match[0]


def _preset_parameter_count(preset: str, role: str) -> int:
    total = 0
    for shape in parameter_shapes(preset_config(preset, role)).values():
        count = 1
        for dim in shape:
            count *= dim
        total += count
    return total


# ===== SUBCOMMANDS =====


def cmd_pretrain(config: RunConfig) -> int:
    """
    Teacher pre-training (optional), student initialization and distillation.

    Writes teacher.ckpt (when trained here), student.ckpt and the stage metrics.
    """
    out = _prepare(config)
    timer = _Timer()
    loaded = checkpoint.load(config.teacher_path).model if config.teacher_path else None
    if loaded is None and not config.train_teacher:
        raise ConfigError("pretrain needs a --teacher checkpoint or --train-teacher")
    teacher_config = loaded.config if loaded is not None else preset_config(config.preset, "teacher")
    train, heldout = _data(config, teacher_config, "retrieval", out)

    with _divergence_guard(out, config):
        teacher = loaded
        if config.train_teacher:
            with timer.stage("teacher"):
                result = train_teacher(teacher_config, train, heldout, config.settings("teacher"), model=loaded)
            teacher = result.model
            checkpoint.save(out / "teacher.ckpt", teacher, seed=config.seed, step=len(result.metrics.steps))
            _write_stage(out, result.metrics, config)

        student = shrink_from_teacher(teacher)
        with timer.stage("distill"):
            result = pretrain_distill(student, teacher, train, heldout, config.settings("distill"),
                                      weights=config.distill_weights(), mix=config.mix)

    checkpoint.save(out / "student.ckpt", result.model, seed=config.seed, step=len(result.metrics.steps))
    _write_stage(out, result.metrics, config)
    timer.write(out)

    final = result.metrics.summary.get("final", {})
    if "match_accuracy" in final:
        logger.info(f"Student held-out match accuracy: {format_percentage(final['match_accuracy'])}")
    return 0


def _task_teacher(config: RunConfig, out: Path, timer: _Timer, train: Dataset,
                  heldout: Dataset) -> Optional[VlmModel]:
    """Fine-tuned teacher for the task: loaded as is, or fine-tuned here."""
    if not config.teacher_path:
        if config.finetune_teacher:
            raise ConfigError("--finetune-teacher needs a pretrained --teacher checkpoint")
        return None
    teacher = checkpoint.load(config.teacher_path).model
    if not config.finetune_teacher:
        return teacher
    with timer.stage("teacher_finetune"):
        result = finetune_teacher(teacher, train, heldout, config.settings("teacher_finetune"))
    checkpoint.save(out / "teacher_finetuned.ckpt", result.model, seed=config.seed,
                    step=len(result.metrics.steps))
    _write_stage(out, result.metrics, config)
    return result.model


def cmd_finetune(config: RunConfig) -> int:
    """
    Fine-tune and prune a pre-trained student.

    Writes pruned.ckpt (masked student with gates and controllers),
    sliced.ckpt (structurally pruned student), density.csv and the stage metrics.
    """
    out = _prepare(config)
    timer = _Timer()
    student = _load_model(config.student_path, "student_path").model
    train, heldout = _data(config, student.config, config.task, out)

    with _divergence_guard(out, config):
        teacher = _task_teacher(config, out, timer, train, heldout)
        gates = GateSet.for_model(student, init=config.gate_init, stretch_lo=config.stretch_lo,
                                  stretch_hi=config.stretch_hi, threshold=config.threshold)
        with timer.stage("finetune"):
            result = finetune_prune(student, teacher, train, heldout, config.settings("finetune"),
                                    gates=gates, controllers=config.controllers(),
                                    weights=config.distill_weights(), mix=config.mix)

    steps = len(result.metrics.steps)
    checkpoint.save(out / "pruned.ckpt", result.masked_model, gates=result.masked_model.gates,
                    lagrangian=result.controllers, seed=config.seed, step=steps)
    checkpoint.save(out / "sliced.ckpt", result.model, seed=config.seed, step=steps)

    density = pd.DataFrame(
        [{"group": k, "density": v} for k, v in result.density.items()], columns=["group", "density"]
    )
    create_simple_csv_export(density, out / "density.csv")
    cost = pd.DataFrame.from_dict(cost_report(result.model), orient="index").rename_axis("encoder").reset_index()
    create_simple_csv_export(cost, out / "cost.csv")
    _write_stage(out, result.metrics, config, {"Density": density, "Cost": cost})
    timer.write(out)

    logger.info(f"Achieved removed fraction: {format_percentage(result.metrics.summary['achieved_removed'])}")
    return 0


def cmd_sweep(config: RunConfig) -> int:
    """
    Head-pruning sensitivity of every encoder.

    Writes sweep_<encoder>.csv, sweep.csv (all encoders), sweep.html and sweep_report.xlsx.
    """
    out = _prepare(config)
    timer = _Timer()
    loaded = _load_model(config.checkpoint_path, "checkpoint_path")
    model = loaded.model
    train, heldout = _data(config, model.config, config.task, out)

    if config.finetune_teacher:
        with _divergence_guard(out, config), timer.stage("teacher_finetune"):
            result = finetune_teacher(model, train, heldout, config.settings("teacher_finetune"))
        model = result.model
        checkpoint.save(out / "teacher_finetuned.ckpt", model, seed=config.seed, step=len(result.metrics.steps))
        _write_stage(out, result.metrics, config)

    tables = {}
    with timer.stage("sweep"):
        for encoder in ENCODERS:
            tables[encoder] = sweep_heads(model, heldout, config.sweep_fractions, encoder,
                                          gates=loaded.gates, batch_size=config.batch_size)
            create_simple_csv_export(tables[encoder], out / f"sweep_{encoder}.csv")

    combined = pd.concat(tables.values(), ignore_index=True)
    create_simple_csv_export(combined, out / "sweep.csv")
    fig = create_sweep_figure(combined, title=f"Head pruning sensitivity ({config.task})")
    write_sweep_figure(out / "sweep.html", fig)
    write_excel_report(out / "sweep_report.xlsx", {e.title(): t for e, t in tables.items()},
                       title=f"Head sweep (seed {config.seed})",
                       summary={"task": config.task, "checkpoint": config.checkpoint_path,
                                "config_hash": config.config_hash()})
    timer.write(out)
    return 0


def eval_report(config: RunConfig, loaded: checkpoint.Checkpoint, heldout: Dataset) -> Dict[str, object]:
    """Metrics, per-encoder cost and the size ratio of the preset the checkpoint came from."""
    model = loaded.model
    gate_values = None
    if loaded.gates is not None:
        model = model.with_gates(loaded.gates)
        gate_values = deterministic_gates(loaded.gates, config.threshold)

    preset = _checkpoint_preset(config, loaded.model.config)
    report: Dict[str, object] = {
        "metrics": evaluate(model, heldout, config.batch_size, gate_values=gate_values, task=config.task),
        "cost": cost_report(loaded.model),
        "preset": preset,
        "teacher_preset_parameters": _preset_parameter_count(preset, "teacher"),
        "student_preset_parameters": _preset_parameter_count(preset, "student"),
    }
    report["preset_ratio"] = report["teacher_preset_parameters"] / report["student_preset_parameters"]
    if loaded.gates is not None:
        report["density"] = modal_density_report(loaded.gates, config.threshold)
    return report


def cmd_eval(config: RunConfig) -> int:
    """Print metrics and parameter counts of a checkpoint (JSON with --json)."""
    out = _prepare(config)
    loaded = _load_model(config.checkpoint_path, "checkpoint_path")
    _, heldout = _data(config, loaded.model.config, config.task, out)
    report = eval_report(config, loaded, heldout)
    write_json(report, out / "eval.json")

    if config.json:
        print(json.dumps(report, sort_keys=True, indent=2))
        return 0

    print(f"Checkpoint: {config.checkpoint_path} (seed {loaded.seed}, step {loaded.step})")
    print()
    print(format_metrics(report["metrics"]))
    print()
    print(format_cost_table(report["cost"]).to_string())
    print()
    print(f"Teacher / student preset parameters: {report['teacher_preset_parameters']:,} / "
          f"{report['student_preset_parameters']:,} (ratio {report['preset_ratio']:.2f})")
    if "density" in report:
        print()
        print(format_metrics(report["density"]))
    return 0


def cmd_sparsity_sweep(config: RunConfig) -> int:
    """
    finetune_prune over a grid of removal targets from one student.

    Writes sparsity_sweep.csv, sparsity_sweep.html and sparsity_sweep_report.xlsx.
    """
    out = _prepare(config)
    timer = _Timer()
    student = _load_model(config.student_path, "student_path").model
    train, heldout = _data(config, student.config, config.task, out)

    with _divergence_guard(out, config):
        teacher = _task_teacher(config, out, timer, train, heldout)
        with timer.stage("sparsity_sweep"):
            table = sweep_sparsity(student, teacher, train, heldout, config.settings("finetune"),
                                   targets=config.sparsity_targets, weights=config.distill_weights(),
                                   mix=config.mix)

    create_simple_csv_export(table, out / "sparsity_sweep.csv")
    long = table.melt(id_vars=["target_removed"], value_vars=[f"density_{e}" for e in ENCODERS],
                      var_name="encoder", value_name="density")
    long["encoder"] = long["encoder"].str.replace("density_", "", regex=False)
    fig = create_sweep_figure(long, x="target_removed", y="density",
                              title=f"Retained density by encoder ({config.task})")
    write_sweep_figure(out / "sparsity_sweep.html", fig)
    write_excel_report(out / "sparsity_sweep_report.xlsx", {"Sweep": table, "Density": long},
                       title=f"Sparsity sweep (seed {config.seed})",
                       summary={"task": config.task, "config_hash": config.config_hash()})
    timer.write(out)
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "sparsity-sweep": cmd_sparsity_sweep,
}
