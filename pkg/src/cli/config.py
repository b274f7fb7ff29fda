"""
Run Configuration

RunConfig is the flat key-value document every subcommand runs from.
Values are resolved from four sources, lowest precedence first:

1. dataclass defaults
2. the preset's budget defaults (PRESET_BUDGETS)
3. a JSON file passed with --config
4. command-line flags

The resolved document is written to <out_dir>/config.json before any
computation; feeding that file back through --config reproduces the run.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from ..errors import ConfigError
from ..models.config import PRESET_NAMES
from ..training.distill import TASK_KINDS, DistillWeights
from ..training.harness import TrainSettings
from ..training.l0prune import LagrangianState, global_schedule, manual_sparsity_schedule

logger = logging.getLogger(__name__)

PRESET_BUDGETS: Dict[str, Dict[str, Any]] = {
    "tiny": {
        "batch_size": 8,
        "teacher_steps": 40,
        "distill_steps": 40,
        "finetune_steps": 40,
        "train_size": 64,
        "eval_size": 32,
        "eval_every": 20,
    },
    "desk": {
        "batch_size": 32,
        "teacher_steps": 3000,
        "distill_steps": 3000,
        "finetune_steps": 1500,
        "train_size": 2048,
        "eval_size": 512,
        "eval_every": 250,
    },
}

STAGE_STEPS = {
    "teacher": "teacher_steps",
    "teacher_finetune": "finetune_steps",
    "distill": "distill_steps",
    "finetune": "finetune_steps",
}


@dataclass
class RunConfig:
    """
    Every knob of a pipeline run. None budget fields are filled from the preset.

    Attributes:
        preset: Model preset ('tiny' or 'desk')
        seed: Seed of weights, data, batch order and gate noise
        out_dir: Directory owned by this run
        teacher_path / student_path / checkpoint_path: Input checkpoints
        train_teacher: Pre-train a teacher before distilling (pretrain)
        finetune_teacher: Fine-tune the teacher on the task first (finetune, sweep)
        task: Downstream task kind
        batch_size / *_steps / train_size / eval_size / eval_every: Budgets
        lr / gate_lr / weight_decay / warmup_frac / max_grad_norm: Optimizer
        mix: Task / VLP share of the objective
        w_attn / w_hid / w_logits: Distillation weights (all None calibrates them)
        temperature: Logits distillation temperature
        include_cross_attention: Distil fusion cross-attention maps
        target_removed: Share of gated parameters to remove (single controller)
        manual_sparsity: Per-encoder removal targets (vision, text, fusion); overrides target_removed
        threshold: Deterministic gate threshold
        stretch_lo / stretch_hi: Hard-Concrete stretch interval
        gate_init: Initial gate logit
        ascent_rate: Multiplier ascent rate
        sweep_fractions: Head fractions of the sensitivity sweep
        sparsity_targets: Removal targets of the sparsity sweep
        target_accuracy: Teacher early-stop accuracy (None disables)
        workers: Data generation threads
        cache: Cache generated data under <out_dir>/cache
        refresh_cache: Delete cached datasets before loading
        json: Machine-readable eval output
    """

    preset: str = "tiny"
    seed: int = 0
    out_dir: str = "runs/default"
    teacher_path: Optional[str] = None
    student_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    train_teacher: bool = False
    finetune_teacher: bool = False
    task: str = "balanced"
    batch_size: Optional[int] = None
    teacher_steps: Optional[int] = None
    distill_steps: Optional[int] = None
    finetune_steps: Optional[int] = None
    train_size: Optional[int] = None
    eval_size: Optional[int] = None
    eval_every: Optional[int] = None
    lr: float = 1e-3
    gate_lr: float = 0.1
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    max_grad_norm: float = 1.0
    mix: float = 0.5
    w_attn: Optional[float] = None
    w_hid: Optional[float] = None
    w_logits: Optional[float] = None
    temperature: float = 1.0
    include_cross_attention: bool = True
    target_removed: float = 0.25
    manual_sparsity: Optional[List[float]] = None
    threshold: float = 0.5
    stretch_lo: float = -0.1
    stretch_hi: float = 1.1
    gate_init: float = 2.5
    ascent_rate: float = 0.01
    sweep_fractions: List[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    sparsity_targets: List[float] = field(
        default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
    )
    target_accuracy: Optional[float] = 0.9
    workers: int = 1
    cache: bool = True
    refresh_cache: bool = False
    json: bool = False

    def __post_init__(self):
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown preset '{self.preset}' (choose from {', '.join(PRESET_NAMES)})")
        if self.task not in TASK_KINDS:
            raise ConfigError(f"unknown task '{self.task}' (choose from {', '.join(TASK_KINDS)})")
        if not (0.0 <= self.mix <= 1.0):
            raise ConfigError(f"mix must lie in [0, 1], got {self.mix}")
        if not (0.0 <= self.target_removed < 1.0):
            raise ConfigError(f"target_removed must lie in [0, 1), got {self.target_removed}")
        if self.manual_sparsity is not None and len(self.manual_sparsity) != 3:
            raise ConfigError(f"manual_sparsity needs 3 values (vision, text, fusion), got {self.manual_sparsity}")
        weights = (self.w_attn, self.w_hid, self.w_logits)
        if any(w is None for w in weights) and any(w is not None for w in weights):
            raise ConfigError("set all of w_attn, w_hid, w_logits or none of them")
        for fraction in self.sweep_fractions:
            if not (0.0 <= fraction <= 1.0):
                raise ConfigError(f"sweep fraction must lie in [0, 1], got {fraction}")
        for label in ("batch_size", "teacher_steps", "distill_steps", "finetune_steps",
                      "train_size", "eval_size", "eval_every"):
            value = getattr(self, label)
            if value is not None and value < 0:
                raise ConfigError(f"{label} must be non-negative, got {value}")

    # ----- resolution -----

    @classmethod
    def resolve(cls, flags: Optional[Mapping[str, Any]] = None,
                config_file: Optional[Union[str, Path]] = None) -> "RunConfig":
        """
        Merge defaults, preset budgets, a config file and flags.

        Args:
            flags: Field name -> value; None values are treated as unset
            config_file: Optional JSON document of field values

        Raises:
            ConfigError: Unknown keys, unreadable file or invalid values
        """
        flags = {k: v for k, v in (flags or {}).items() if v is not None}
        document = load_config_file(config_file) if config_file else {}
        _check_keys(flags, "flags")

        values = asdict(cls())
        preset = flags.get("preset", document.get("preset", values["preset"]))
        if preset not in PRESET_BUDGETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESET_NAMES)})")
        values.update(PRESET_BUDGETS[preset])
        values.update(document)
        values.update(flags)
        return cls(**values)

    # ----- views -----

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def write(self, out_dir: Optional[Union[str, Path]] = None) -> Path:
        """Echo the resolved config to <out_dir>/config.json."""
        path = Path(out_dir or self.out_dir) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        logger.info(f"Resolved config written to {path} (hash {self.config_hash()[:12]})")
        return path

    def settings(self, stage: str) -> TrainSettings:
        """TrainSettings of one stage ('teacher', 'teacher_finetune', 'distill', 'finetune')."""
        if stage not in STAGE_STEPS:
            raise ConfigError(f"unknown stage '{stage}'")
        return TrainSettings(
            steps=int(getattr(self, STAGE_STEPS[stage])),
            batch_size=int(self.batch_size),
            lr=self.lr,
            gate_lr=self.gate_lr,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            max_grad_norm=self.max_grad_norm,
            eval_every=int(self.eval_every or 0),
            target_accuracy=self.target_accuracy,
            temperature=self.temperature,
            include_cross_attention=self.include_cross_attention,
            ascent_rate=self.ascent_rate,
            threshold=self.threshold,
            seed=self.seed,
        )

    def distill_weights(self) -> Optional[DistillWeights]:
        """Explicit weights, or None to calibrate them on the first batch."""
        if self.w_attn is None:
            return DistillWeights(mix=self.mix) if self.mix == 1.0 else None
        return DistillWeights(self.w_attn, self.w_hid, self.w_logits, self.mix)

    def controllers(self) -> Dict[str, LagrangianState]:
        if self.manual_sparsity is not None:
            return manual_sparsity_schedule(self.manual_sparsity)
        return global_schedule(self.target_removed)


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def _check_keys(document: Mapping[str, Any], source: str):
    unknown = sorted(set(document) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {', '.join(unknown)}")


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a flat JSON config document.

    Raises:
        ConfigError: If the file is missing, not a JSON object, or has unknown keys
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    _check_keys(document, str(path))
    return document
