#!/usr/bin/env python3
# evaluator.py

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from .config import InferenceConfig, KernelConfig, TaskConfig
from .dataset import PuzzleDataset
from .errors import EvaluationError
from .inference import (StoppedBy, SolveResult, solve_adaptive, solve_dfm_euler, solve_ensemble,
                        solve_remdm, solve_topk)
from .paths import Schedule
from .tasks import PuzzleInstance, TaskKind, countdown_check_sequence, stack_instances, sudoku_solve, sudoku_validate

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["method", "K", "n_steps", "accuracy", "mean_steps", "median_steps", "timeout_rate", "seed"]


@dataclass
class MetricsRecord:
    method: str
    K: int
    n_steps: int
    accuracy: float
    mean_steps: float
    median_steps: float
    timeout_rate: float
    seed: int


def model_family(method: str) -> str:
    """Which trained model a method samples from"""
    if method in ("adaptive", "ensemble"):
        return "adaptive"
    if method == "gidd-euler":
        return "gidd"
    return "baseline"


class Evaluator:
    def __init__(self, task: TaskConfig, kernel: KernelConfig, inference: InferenceConfig,
                 schedule: Schedule, batch_size: int = 256):
        """
        Initialize the evaluator

        Args:
            task: Task block used by the oracles
            kernel: Stopping threshold and step cap for the adaptive solvers
            inference: Step budget, eta and end clamp for the baseline samplers
            schedule: Schedule the baseline samplers follow (the training schedule)
            batch_size: Instances solved together
        """
        self.task = task
        self.kernel = kernel
        self.inference = inference
        self.schedule = schedule
        self.batch_size = batch_size
        self.codec = task.codec()

    def check_instance(self, final: torch.Tensor, instance: PuzzleInstance) -> Tuple[bool, List[str]]:
        """Oracle check of a final state against the instance's clues"""
        issues = []
        tokens = final.detach().cpu().numpy()
        if np.any(tokens[instance.clues] != instance.x0[instance.clues]):
            issues.append("clue positions changed")

        if self.task.kind == TaskKind.SUDOKU:
            if np.any(tokens == self.task.n):
                issues.append("unfilled cells remain")
            elif not sudoku_validate(tokens, self.task.n):
                issues.append("row/column/box constraint violated")
        else:
            verdict = countdown_check_sequence(tokens, self.task.k, self.codec)
            if not verdict.valid:
                issues.append(f"{verdict.reason.value}: {verdict.detail}")

        return len(issues) == 0, issues

    def reference_solution(self, instance: PuzzleInstance) -> np.ndarray:
        """Solution used for per-position correctness (oracle solve for Sudoku)"""
        if self.task.kind == TaskKind.SUDOKU:
            solutions = sudoku_solve(instance.x0, self.task.n, limit=1)
            if not solutions:
                raise EvaluationError("Puzzle has no solution")
            return solutions[0]
        return instance.x1

    def validate_dataset(self, dataset: PuzzleDataset, models: Sequence[nn.Module] = ()) -> None:
        """Dataset must match the task and models, and every stored solution must pass the oracle"""
        vocab = self.task.vocabulary()
        if dataset.header.task != self.task.kind or dataset.header.d != self.task.d \
                or dataset.header.vocab_size != vocab.size:
            raise EvaluationError(
                f"Dataset ({dataset.header.task.value}, d={dataset.header.d}, vocab={dataset.header.vocab_size}) "
                f"does not match task ({self.task.kind.value}, d={self.task.d}, vocab={vocab.size})"
            )
        for model in models:
            if model.seq_len != self.task.d or model.vocab_size != vocab.size:
                raise EvaluationError(
                    f"Model (d={model.seq_len}, vocab={model.vocab_size}) does not match the dataset"
                )
        for idx, inst in enumerate(dataset):
            passed, issues = self.check_instance(torch.as_tensor(inst.x1), inst)
            if not passed:
                raise EvaluationError(f"Instance {idx}: stored solution fails the oracle ({issues})")

    def solve(self, method: str, models: Sequence[nn.Module], x0: torch.Tensor, clues: torch.Tensor,
              K: int, seed: int, generator: Optional[torch.Generator] = None) -> List[SolveResult]:
        generator = generator or torch.Generator().manual_seed(seed)
        model = models[0]
        if method == "adaptive":
            return solve_adaptive(model, x0, clues, self.kernel, generator)
        if method == "ensemble":
            return solve_ensemble(models, x0, clues, K, self.kernel, seed)
        if method in ("euler", "gidd-euler"):
            return solve_dfm_euler(model, x0, clues, self.schedule, self.inference.n_steps, generator,
                                   self.inference.t_end_eps)
        if method in ("topk", "topk_margin"):
            variant = "topk" if method == "topk" else "margin"
            return solve_topk(model, x0, clues, self.schedule, self.inference.n_steps, variant, generator)
        if method == "remdm":
            return solve_remdm(model, x0, clues, self.schedule, self.inference.n_steps, self.inference.eta,
                               generator)
        raise EvaluationError(f"Unknown method {method!r}")

    def run_method(self, method: str, models: Sequence[nn.Module], dataset: PuzzleDataset,
                   K: int, seed: int) -> MetricsRecord:
        generator = torch.Generator().manual_seed(seed)
        results: List[SolveResult] = []
        passed: List[bool] = []
        chunks = range(0, len(dataset), self.batch_size)
        for start in tqdm(chunks, desc=f"{method} K={K}", disable=len(chunks) < 2):
            batch = dataset.instances[start:start + self.batch_size]
            x0, _, clues = stack_instances(batch)
            chunk_results = self.solve(method, models, x0, clues, K, seed, generator)
            for inst, res in zip(batch, chunk_results):
                ok, issues = self.check_instance(res.final, inst)
                passed.append(ok)
                if not ok:
                    logger.debug(f"{method}: unsolved ({'; '.join(issues)})")
            results.extend(chunk_results)

        n_steps = self.kernel.max_steps if model_family(method) == "adaptive" else self.inference.n_steps
        record = self._aggregate_metrics(method, K, n_steps, results, passed, seed)
        logger.info(f"{method} K={K}: accuracy {record.accuracy:.4f}, mean steps {record.mean_steps:.2f}, "
                    f"timeouts {record.timeout_rate:.4f}")
        return record

    def evaluate(self, models: Dict[str, List[nn.Module]], dataset: PuzzleDataset,
                 methods: Sequence[str], Ks: Sequence[int], seed: int) -> List[MetricsRecord]:
        """One metrics row per method, and per K for the ensemble method"""
        if len(dataset) == 0:
            raise EvaluationError("Cannot evaluate on an empty dataset")
        self.validate_dataset(dataset, [m for family in models.values() for m in family])
        records = []
        for method in methods:
            family = model_family(method)
            if not models.get(family):
                raise EvaluationError(f"Method {method} needs a {family} checkpoint")
            for K in (Ks if method == "ensemble" else [1]):
                records.append(self.run_method(method, models[family], dataset, K, seed))
        return records

    def _aggregate_metrics(self, method: str, K: int, n_steps: int, results: List[SolveResult],
                           passed: List[bool], seed: int) -> MetricsRecord:
        """Aggregate per-instance outcomes into one metrics row"""
        steps = np.array([r.steps for r in results], dtype=np.float64)
        timeouts = np.array([r.stopped_by == StoppedBy.MAX_STEPS for r in results])
        return MetricsRecord(
            method=method,
            K=K,
            n_steps=n_steps,
            accuracy=float(np.mean(passed)),
            mean_steps=float(np.mean(steps)),
            median_steps=float(np.median(steps)),
            timeout_rate=float(np.mean(timeouts)),
            seed=seed,
        )
