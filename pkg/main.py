#!/usr/bin/env python3
"""
trivlm-compress - distill-then-prune compression of tri-encoder VLMs

Main entry point for every pipeline stage.

    python main.py pretrain --preset tiny --train-teacher --out-dir runs/pre
    python main.py finetune --student runs/pre/student.ckpt --teacher runs/pre/teacher.ckpt \\
        --finetune-teacher --task balanced --out-dir runs/ft
    python main.py sweep --checkpoint runs/pre/teacher.ckpt --finetune-teacher --task vision_only
    python main.py eval --checkpoint runs/ft/sliced.ckpt --json
    python main.py sparsity-sweep --student runs/pre/student.ckpt --teacher runs/pre/teacher.ckpt

Exit statuses: 0 success, 2 configuration error, 3 numeric divergence,
4 degenerate pruning, 1 anything else.
"""

import sys
import argparse
import logging
from pathlib import Path

# Add src to Python path
sys.path.insert(0, str(Path(__file__).parent))

from src.cli.commands import COMMANDS
from src.cli.config import RunConfig
from src.errors import ConfigError, DegenerateLayerError, TrivlmError

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

logger = logging.getLogger(__name__)


def _floats(text: str):
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", dest="config_file", help="JSON file of config values")
    parser.add_argument("--preset", choices=["tiny", "desk"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out-dir", dest="out_dir")
    parser.add_argument("--task", choices=["retrieval", "match", "vision_only", "text_only", "balanced"])
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--train-size", dest="train_size", type=int)
    parser.add_argument("--eval-size", dest="eval_size", type=int)
    parser.add_argument("--eval-every", dest="eval_every", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--no-cache", dest="cache", action="store_const", const=False)
    parser.add_argument("--refresh-cache", dest="refresh_cache", action="store_const", const=True,
                        help="regenerate cached datasets")
    parser.add_argument("--verbose", action="store_true", help="DEBUG logging")


def _add_training(parser: argparse.ArgumentParser):
    parser.add_argument("--lr", type=float)
    parser.add_argument("--gate-lr", dest="gate_lr", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--warmup-frac", dest="warmup_frac", type=float)
    parser.add_argument("--max-grad-norm", dest="max_grad_norm", type=float)
    parser.add_argument("--teacher-steps", dest="teacher_steps", type=int)
    parser.add_argument("--distill-steps", dest="distill_steps", type=int)
    parser.add_argument("--finetune-steps", dest="finetune_steps", type=int)
    parser.add_argument("--mix", type=float, help="share of the task / VLP loss (1.0 disables distillation)")
    parser.add_argument("--w-attn", dest="w_attn", type=float)
    parser.add_argument("--w-hid", dest="w_hid", type=float)
    parser.add_argument("--w-logits", dest="w_logits", type=float)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--no-cross-attention-kd", dest="include_cross_attention",
                        action="store_const", const=False)
    parser.add_argument("--target-accuracy", dest="target_accuracy", type=float)


def _add_pruning(parser: argparse.ArgumentParser):
    parser.add_argument("--target-removed", dest="target_removed", type=float)
    parser.add_argument("--manual-sparsity", dest="manual_sparsity", type=_floats,
                        help="removal targets for vision,text,fusion")
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--stretch-lo", dest="stretch_lo", type=float)
    parser.add_argument("--stretch-hi", dest="stretch_hi", type=float)
    parser.add_argument("--gate-init", dest="gate_init", type=float)
    parser.add_argument("--ascent-rate", dest="ascent_rate", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trivlm-compress", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    pretrain = sub.add_parser("pretrain", help="teacher pre-training and student distillation")
    _add_common(pretrain)
    _add_training(pretrain)
    pretrain.add_argument("--teacher", dest="teacher_path")
    pretrain.add_argument("--train-teacher", dest="train_teacher", action="store_const", const=True)

    finetune = sub.add_parser("finetune", help="fine-tune and prune a student")
    _add_common(finetune)
    _add_training(finetune)
    _add_pruning(finetune)
    finetune.add_argument("--student", dest="student_path")
    finetune.add_argument("--teacher", dest="teacher_path")
    finetune.add_argument("--finetune-teacher", dest="finetune_teacher", action="store_const", const=True)

    sweep = sub.add_parser("sweep", help="head-pruning sensitivity per encoder")
    _add_common(sweep)
    _add_training(sweep)
    sweep.add_argument("--checkpoint", dest="checkpoint_path")
    sweep.add_argument("--finetune-teacher", dest="finetune_teacher", action="store_const", const=True)
    sweep.add_argument("--fractions", dest="sweep_fractions", type=_floats)

    evaluate = sub.add_parser("eval", help="metrics and parameter counts of a checkpoint")
    _add_common(evaluate)
    evaluate.add_argument("--checkpoint", dest="checkpoint_path")
    evaluate.add_argument("--threshold", type=float)
    evaluate.add_argument("--json", action="store_const", const=True)

    sparsity = sub.add_parser("sparsity-sweep", help="fine-tune and prune over removal targets")
    _add_common(sparsity)
    _add_training(sparsity)
    _add_pruning(sparsity)
    sparsity.add_argument("--student", dest="student_path")
    sparsity.add_argument("--teacher", dest="teacher_path")
    sparsity.add_argument("--finetune-teacher", dest="finetune_teacher", action="store_const", const=True)
    sparsity.add_argument("--targets", dest="sparsity_targets", type=_floats)
    return parser


def main(argv=None) -> int:
    """
    Parse arguments, resolve the run config and dispatch the subcommand.

    Returns:
        Process exit status
    """
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_file = args.pop("config_file")
    if args.pop("verbose"):
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = RunConfig.resolve(args, config_file)
        logger.info(f"Starting {command} (preset {config.preset}, seed {config.seed}) -> {config.out_dir}")
        status = COMMANDS[command](config)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return e.exit_status
    except DegenerateLayerError as e:
        logger.error(f"Pruning failed: {e}")
        return e.exit_status
    except TrivlmError as e:
        logger.error(f"{command} failed: {e}")
        return e.exit_status

    logger.info(f"{command} finished")
    return status


if __name__ == "__main__":
    sys.exit(main())
