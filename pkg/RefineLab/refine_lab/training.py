#!/usr/bin/env python3
# training.py

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional

import torch
from tqdm import tqdm

from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import PuzzleDataset
from .errors import ConfigError, NumericalError
from .evaluator import METRICS_COLUMNS, Evaluator
from .kernel import rollout, use_rollout
from .model import RefineTransformer
from .objectives import adaptive_loss, baseline_ce_loss, ce_breakdown, gidd_ce_loss
from .optim import RefineOptimizer
from .paths import GiddSchedule, Schedule, off_path, sample_gidd_path, sample_masking_path
from .run_manager import RunManager
from .tasks import stack_instances

logger = logging.getLogger(__name__)


@dataclass
class TrainRecord:
    step: int
    total: float
    term1: float
    term2: float
    term3: float
    grad_norm: float
    lr: float
    seed: int
    off_path_fraction: float
    rollout_used: bool


TRAIN_LOG_COLUMNS = [f.name for f in fields(TrainRecord)]


def torch_dtype(config: RunConfig) -> torch.dtype:
    return getattr(torch, config.dtype)


class Trainer:
    def __init__(self, config: RunConfig, dataset: PuzzleDataset, run: Optional[RunManager] = None,
                 val_dataset: Optional[PuzzleDataset] = None):
        """
        Initialize a training run

        Args:
            config: Validated run configuration; train.mode picks the objective
            dataset: Training instances (must match the task block)
            run: Run directory manager for logs, checkpoints and metrics (optional)
            val_dataset: Instances for periodic evaluation (optional)
        """
        self.config = config
        self.run = run
        self.val_dataset = val_dataset
        self.mode = config.train.mode
        self.dtype = torch_dtype(config)
        self._check_dataset(dataset)

        torch.manual_seed(config.seed)
        self.model = RefineTransformer(config.model.resolved(config.task)).to(self.dtype)
        self.optimizer = RefineOptimizer(self.model, config.optim)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.schedule = Schedule.from_config(config.schedule)
        self.gidd = GiddSchedule.from_config(config.schedule)
        self.mask_id = config.task.vocabulary().mask_id
        self.step = 0
        self.records: List[TrainRecord] = []

        self.x0, self.x1, self.clues = stack_instances(dataset.instances)
        logger.info(f"{self.mode} model with {self.model.num_parameters()} parameters, "
                    f"{len(dataset)} training instances")

    def _check_dataset(self, dataset: PuzzleDataset) -> None:
        if len(dataset) == 0:
            raise ConfigError("Training dataset is empty")
        vocab = self.config.task.vocabulary()
        header = dataset.header
        if header.task != self.config.task.kind or header.d != self.config.task.d \
                or header.vocab_size != vocab.size:
            raise ConfigError(
                f"Dataset ({header.task.value}, d={header.d}, vocab={header.vocab_size}) does not match "
                f"the task block ({self.config.task.kind.value}, d={self.config.task.d}, vocab={vocab.size})"
            )

    def resume(self, checkpoint: Checkpoint) -> None:
        """Restore weights, optimizer, step counter and random streams"""
        checkpoint.restore_model(self.model)
        checkpoint.restore_optimizer(self.optimizer)
        self.step = checkpoint.step
        if "data" in checkpoint.rng_states:
            self.generator.set_state(torch.from_numpy(checkpoint.rng_states["data"].copy()))
        if "torch" in checkpoint.rng_states:
            torch.set_rng_state(torch.from_numpy(checkpoint.rng_states["torch"].copy()))
        logger.info(f"Resumed from step {self.step}")

    def _states_and_loss(self, x0, x1, clues, t):
        """Build training states for the current mode and evaluate its objective"""
        if self.mode == "baseline":
            z = sample_masking_path(x0, x1, clues, t, self.schedule, self.generator)
            return z, ce_breakdown(baseline_ce_loss(self.model(z, clues, t), x1, clues)), False
        if self.mode == "gidd":
            z = sample_gidd_path(x0, x1, clues, t, self.gidd, self.config.task.vocabulary().size, self.generator)
            return z, ce_breakdown(gidd_ce_loss(self.model(z, clues, t), x1, clues)), False

        kernel = self.config.kernel
        rolled = self.config.loss.on_policy == "rollout" and use_rollout(kernel.rollout_prob, self.generator)
        k = kernel.rollout_len if rolled else 1
        z = rollout(self.model, x0, x1, clues, t, self.schedule, kernel, k, self.generator)
        out = self.model(z, clues, None)
        return z, adaptive_loss(out, x1, clues, z, self.config.loss), rolled

    def train_step(self) -> TrainRecord:
        self.model.train()
        batch = torch.randint(len(self.x0), (self.config.train.batch_size,), generator=self.generator)
        x0, x1, clues = self.x0[batch], self.x1[batch], self.clues[batch]
        t = torch.rand(len(batch), generator=self.generator, dtype=self.dtype)

        try:
            z, breakdown, rolled = self._states_and_loss(x0, x1, clues, t)
            self.optimizer.zero_grad()
            breakdown.total.backward()
            grad_norm, lr = self.optimizer.step()
        except NumericalError as e:
            raise NumericalError(f"Training step {self.step + 1}: {e}") from e

        self.step += 1
        values = breakdown.as_floats()
        record = TrainRecord(
            step=self.step,
            total=values["total"],
            term1=values["term1"],
            term2=values["term2"],
            term3=values["term3"],
            grad_norm=grad_norm,
            lr=lr,
            seed=self.config.seed,
            off_path_fraction=float(off_path(z, x1, clues, self.mask_id).float().mean()),
            rollout_used=rolled,
        )
        self.records.append(record)
        return record

    def rng_states(self) -> Dict[str, torch.Tensor]:
        return {"data": self.generator.get_state(), "torch": torch.get_rng_state()}

    def save(self) -> None:
        if self.run is None:
            return
        path = save_checkpoint(self.run.checkpoint_path(self.step), self.model, self.config, self.step,
                               self.optimizer, self.rng_states())
        self.run.record_checkpoint(path, self.step)

    def evaluate(self) -> None:
        """Append a validation row for the mode's default sampler"""
        if self.val_dataset is None or self.run is None:
            return
        subset = PuzzleDataset(self.val_dataset.header,
                               self.val_dataset.instances[:self.config.train.eval_instances])
        evaluator = Evaluator(self.config.task, self.config.kernel, self.config.inference, self.schedule)
        method = {"adaptive": "adaptive", "baseline": "euler", "gidd": "gidd-euler"}[self.mode]
        record = evaluator.run_method(method, [self.model], subset, 1, self.config.seed)
        row = asdict(record)
        row["method"] = f"{method}@{self.step}"
        self.run.append_metrics([row], METRICS_COLUMNS)
        self.model.train()

    def fit(self, steps: Optional[int] = None) -> List[TrainRecord]:
        """Run until `steps` (default train.steps) with periodic logging, checkpoints and evaluation"""
        target = steps if steps is not None else self.config.train.steps
        train_cfg = self.config.train
        pending: List[TrainRecord] = []

        with tqdm(total=target, initial=self.step, desc=f"Training ({self.mode})",
                  disable=self.run is None) as progress:
            while self.step < target:
                record = self.train_step()
                pending.append(record)
                progress.update(1)

                if train_cfg.log_every and self.step % train_cfg.log_every == 0:
                    logger.info(
                        f"step {record.step}: loss {record.total:.4f} (commit {record.term1:.4f}, "
                        f"mixing {record.term2:.4f}, progress {record.term3:.4f}), grad {record.grad_norm:.3f}, "
                        f"lr {record.lr:.2e}, off-path {record.off_path_fraction:.3f}"
                    )
                if train_cfg.checkpoint_every and self.step % train_cfg.checkpoint_every == 0:
                    self._flush(pending)
                    self.save()
                if train_cfg.eval_every and self.step % train_cfg.eval_every == 0:
                    self.evaluate()

        self._flush(pending)
        if self.run is not None and self.run.state.step != self.step:
            self.save()
        return self.records

    def _flush(self, pending: List[TrainRecord]) -> None:
        if self.run is not None and pending:
            self.run.append_train_log([asdict(r) for r in pending], TRAIN_LOG_COLUMNS)
        pending.clear()
