#!/usr/bin/env python3
# refine_pipeline.py

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
import torch
from pydantic import ValidationError

from refine_lab.checkpoint import Checkpoint, load_checkpoint
from refine_lab.config import RunConfig, load_config, with_overrides
from refine_lab.dataset import SPLITS, DatasetBuilder, PuzzleDataset, content_hash
from refine_lab.errors import ConfigError, EvaluationError, InputError
from refine_lab.evaluator import METRICS_COLUMNS, Evaluator
from refine_lab.inference import TRACE_COLUMNS, solve_adaptive
from refine_lab.paths import Schedule
from refine_lab.run_manager import RunManager, setup_logging
from refine_lab.tasks import PuzzleInstance, TaskKind, parse_sudoku_literal, sudoku_solve
from refine_lab.training import Trainer

SEED_ENV = "REFINE_LAB_SEED"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger(__name__)


def seed_overrides(seed: Optional[int] = None) -> List[str]:
    """--seed wins over REFINE_LAB_SEED, which wins over the config file"""
    if seed is not None:
        return [f"seed={seed}"]
    if os.environ.get(SEED_ENV):
        return [f"seed={int(os.environ[SEED_ENV])}"]
    return []


def comma_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


class RefinePipeline:
    def __init__(self, project_root: Path = Path(".")):
        self.project_root = Path(project_root)
        self.stats: Dict[str, Dict[str, float]] = {}

    def _resolve(self, path: str) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.project_root / path

    def _record(self, phase: str, start_time: float, **extra) -> None:
        self.stats[phase] = {"duration": time.time() - start_time, **extra}
        logger.info(f"{phase} finished in {self.stats[phase]['duration']:.2f}s")

    def gen_data(self, config: RunConfig, count: int, split: str, out_path: Path, jobs: int = 1) -> Path:
        """Generate one dataset split and write it to out_path"""
        start_time = time.time()
        if split not in SPLITS:
            raise InputError(f"Unknown split {split!r}; choose from {SPLITS}")
        dataset = DatasetBuilder(config.task, jobs=jobs).build(count, config.seed, split)
        out_path = self._resolve(out_path)
        dataset.save(out_path)
        self._record("gen-data", start_time, instances=len(dataset))
        return out_path

    def train(self, config: RunConfig, run_dir: Path) -> RunManager:
        """Train (or resume) the model selected by train.mode inside run_dir"""
        start_time = time.time()
        train_path = self._resolve(config.paths.train_dataset)
        if not train_path.exists():
            raise FileNotFoundError(f"Training dataset not found: {train_path}")
        val_path = self._resolve(config.paths.val_dataset) if config.paths.val_dataset else None
        if val_path is not None and not val_path.exists():
            raise FileNotFoundError(f"Validation dataset not found: {val_path}")

        dataset = PuzzleDataset.load(train_path)
        val_dataset = PuzzleDataset.load(val_path) if val_path is not None else None

        run = RunManager(self._resolve(run_dir), config.logging.level)
        run.write_config(config)
        run.bind_dataset(content_hash(train_path), config.seed)

        trainer = Trainer(config, dataset, run, val_dataset)
        latest = run.latest_checkpoint()
        if latest is not None:
            checkpoint = load_checkpoint(latest)
            trainer.resume(checkpoint)
            run.truncate_train_log(checkpoint.step)

        trainer.fit()
        self._record("train", start_time, steps=trainer.step)
        return run

    def evaluate(self, adaptive: Sequence[Checkpoint], baseline: Optional[Checkpoint],
                 gidd: Optional[Checkpoint], dataset: PuzzleDataset, out_path: Path,
                 overrides: Sequence[str] = ()) -> pd.DataFrame:
        """Run the configured methods against the dataset and write one metrics CSV"""
        start_time = time.time()
        checkpoints = list(adaptive) + [c for c in (baseline, gidd) if c is not None]
        if not checkpoints:
            raise ConfigError("eval needs at least one checkpoint")
        reference = checkpoints[0].config
        for checkpoint in checkpoints[1:]:
            if checkpoint.config.task != reference.task:
                raise EvaluationError("Checkpoints were trained on different tasks")

        config = with_overrides(reference, overrides)
        # Baseline samplers follow the schedule their model was trained with
        sampler_source = baseline or gidd or checkpoints[0]
        schedule = Schedule.from_config(sampler_source.config.schedule)
        evaluator = Evaluator(config.task, config.kernel, config.inference, schedule)

        models = {
            "adaptive": [c.build_model() for c in adaptive],
            "baseline": [baseline.build_model()] if baseline else [],
            "gidd": [gidd.build_model()] if gidd else [],
        }
        records = evaluator.evaluate(models, dataset, config.inference.methods, config.inference.K,
                                     config.seed)

        frame = pd.DataFrame([asdict(r) for r in records], columns=METRICS_COLUMNS)
        out_path = self._resolve(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_path, index=False, lineterminator="\n")
        self._record("eval", start_time, rows=len(frame))
        return frame

    def trace(self, checkpoint: Checkpoint, instance: PuzzleInstance, out_path: Path,
              seed: int) -> pd.DataFrame:
        """Per-step rows of one adaptive solve, marked against the oracle solution"""
        start_time = time.time()
        if checkpoint.config.train.mode != "adaptive":
            raise ConfigError("trace needs an adaptive checkpoint")
        config = checkpoint.config
        evaluator = Evaluator(config.task, config.kernel, config.inference, Schedule.from_config(config.schedule))
        reference = evaluator.reference_solution(instance)

        model = checkpoint.build_model()
        x0, _, clues = (t.unsqueeze(0) for t in instance.as_tensors())
        result = solve_adaptive(model, x0, clues, config.kernel, torch.Generator().manual_seed(seed),
                                trace=True)[0]

        rows = [
            {**row, "is_clue": bool(instance.clues[row["position"]]),
             "is_correct": row["token"] == int(reference[row["position"]])}
            for row in result.trace
        ]
        frame = pd.DataFrame(rows, columns=TRACE_COLUMNS)
        out_path = self._resolve(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_path, index=False, lineterminator="\n")
        logger.info(f"Trace: {result.steps} steps, stopped by {result.stopped_by.value}")
        self._record("trace", start_time, steps=result.steps)
        return frame


def trace_instance(checkpoint: Checkpoint, dataset_path: Optional[str], index: Optional[int],
                   puzzle: Optional[str]) -> PuzzleInstance:
    """Instance chosen by dataset index or given as a Sudoku literal"""
    task = checkpoint.config.task
    if puzzle is not None:
        if task.kind != TaskKind.SUDOKU:
            raise InputError("--puzzle literals are only supported for Sudoku")
        x0 = parse_sudoku_literal(puzzle, task.n)
        solutions = sudoku_solve(x0, task.n, limit=1)
        if not solutions:
            raise InputError("Puzzle literal has no solution")
        return PuzzleInstance(x0=x0, x1=solutions[0], clues=x0 != task.n)

    if dataset_path is None or index is None:
        raise InputError("trace needs --dataset with --instance, or --puzzle")
    dataset = PuzzleDataset.load(Path(dataset_path))
    if not 0 <= index < len(dataset):
        raise InputError(f"Unknown instance id {index} (dataset has {len(dataset)} instances)")
    return dataset[index]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Self-correcting discrete diffusion experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate a dataset split")
    gen.add_argument("--task", help="Task preset (mini-sudoku, sudoku, countdown3, countdown4)")
    gen.add_argument("--config", help="Path to configuration file")
    gen.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Config override")
    gen.add_argument("--count", type=int, required=True, help="Number of instances")
    gen.add_argument("--seed", type=int, help="Generation seed")
    gen.add_argument("--split", default="train", choices=SPLITS)
    gen.add_argument("--out", required=True, help="Output dataset file")
    gen.add_argument("--jobs", type=int, default=1, help="Worker processes")

    train = sub.add_parser("train", help="Train or resume a run")
    train.add_argument("--config", help="Path to configuration file")
    train.add_argument("--preset", help="Task preset applied before the config file")
    train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Config override")
    train.add_argument("--seed", type=int, help="Run seed")
    train.add_argument("--run-dir", required=True, help="Run directory")

    ev = sub.add_parser("eval", help="Evaluate checkpoints on a dataset")
    ev.add_argument("--checkpoint", action="append", default=[], help="Adaptive checkpoint (repeatable)")
    ev.add_argument("--baseline-checkpoint", help="Masking-path baseline checkpoint")
    ev.add_argument("--gidd-checkpoint", help="Generalized-path baseline checkpoint")
    ev.add_argument("--dataset", required=True, help="Evaluation dataset file")
    ev.add_argument("--methods", help="Comma-separated methods")
    ev.add_argument("--K", help="Comma-separated ensemble sizes")
    ev.add_argument("--n-steps", type=int, help="Step budget of the baseline samplers")
    ev.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Config override")
    ev.add_argument("--seed", type=int, help="Evaluation seed")
    ev.add_argument("--out", required=True, help="Metrics CSV")
    ev.add_argument("--jobs", type=int, help="Torch intra-op threads")

    tr = sub.add_parser("trace", help="Export the per-step trace of one adaptive solve")
    tr.add_argument("--checkpoint", required=True, help="Adaptive checkpoint")
    tr.add_argument("--dataset", help="Dataset file")
    tr.add_argument("--instance", type=int, help="Instance index in the dataset")
    tr.add_argument("--puzzle", help="Sudoku literal, row-major, '.' or '0' for blanks")
    tr.add_argument("--seed", type=int, default=0, help="Sampling seed")
    tr.add_argument("--out", required=True, help="Trace CSV")
    return parser


def run_command(args: argparse.Namespace, pipeline: RefinePipeline) -> None:
    if args.command == "gen-data":
        config = load_config(args.config, list(args.set) + seed_overrides(args.seed), preset=args.task)
        setup_logging(config.logging.level)
        out = pipeline.gen_data(config, args.count, args.split, Path(args.out), args.jobs)
        print(f"Wrote {args.count} {args.split} instances to {out}")

    elif args.command == "train":
        config = load_config(args.config, list(args.set) + seed_overrides(args.seed), preset=args.preset)
        setup_logging(config.logging.level)
        run = pipeline.train(config, Path(args.run_dir))
        print(f"Run directory: {run.run_dir} (step {run.state.step})")

    elif args.command == "eval":
        setup_logging()
        if args.jobs:
            torch.set_num_threads(args.jobs)
        overrides = list(args.set) + seed_overrides(args.seed)
        if args.methods:
            overrides.append(f"inference.methods=[{','.join(comma_list(args.methods))}]")
        if args.K:
            overrides.append(f"inference.K=[{','.join(comma_list(args.K))}]")
        if args.n_steps:
            overrides.append(f"inference.n_steps={args.n_steps}")

        adaptive = [load_checkpoint(Path(p)) for p in args.checkpoint]
        baseline = load_checkpoint(Path(args.baseline_checkpoint)) if args.baseline_checkpoint else None
        gidd = load_checkpoint(Path(args.gidd_checkpoint)) if args.gidd_checkpoint else None
        dataset = PuzzleDataset.load(Path(args.dataset))
        frame = pipeline.evaluate(adaptive, baseline, gidd, dataset, Path(args.out), overrides)
        print(frame.to_string(index=False))

    elif args.command == "trace":
        setup_logging()
        checkpoint = load_checkpoint(Path(args.checkpoint))
        instance = trace_instance(checkpoint, args.dataset, args.instance, args.puzzle)
        frame = pipeline.trace(checkpoint, instance, Path(args.out), args.seed)
        print(f"Wrote {len(frame)} trace rows to {args.out}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    pipeline = RefinePipeline()

    try:
        run_command(args, pipeline)
    except (ConfigError, InputError, FileNotFoundError, ValidationError) as e:
        print(f"\nError: {str(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"\nError: {str(e)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
