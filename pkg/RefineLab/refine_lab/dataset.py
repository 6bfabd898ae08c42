#!/usr/bin/env python3
# dataset.py

import hashlib
import logging
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Tuple

import numpy as np
from tqdm import tqdm

from .config import TaskConfig
from .errors import InputError
from .tasks import PuzzleInstance, TaskKind, Vocabulary, countdown_generate, sudoku_generate

logger = logging.getLogger(__name__)

HEADER_TAG = "#refine-lab-dataset"
SPLITS = ("train", "val", "test")


def split_of(instance: PuzzleInstance) -> str:
    """Every clue state belongs to exactly one split"""
    return SPLITS[int(instance.key(), 16) % len(SPLITS)]


def candidate_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_instance(task: TaskConfig, seed: int) -> PuzzleInstance:
    """One instance of the configured task, deterministic in seed"""
    if task.kind == TaskKind.SUDOKU:
        return sudoku_generate(task.n, seed, task.clue_range)
    return countdown_generate(task.k, task.operand_max, task.target_range, seed,
                              result_max=task.result_max, seq_len=task.d)


def _generate_candidate(args: Tuple[TaskConfig, int]) -> PuzzleInstance:
    task, seed = args
    return generate_instance(task, seed)


def content_hash(path: Path) -> str:
    """Git-style blob hash of a file"""
    path = Path(path)
    hasher = hashlib.sha1(f"blob {path.stat().st_size}\0".encode())
    with open(path, "rb") as f:
        while chunk := f.read(8192):
            hasher.update(chunk)
    return hasher.hexdigest()


@dataclass
class DatasetHeader:
    task: TaskKind
    d: int
    vocab_size: int
    mask_id: int
    seed: int
    split: str
    extras: Dict[str, int] = field(default_factory=dict)

    def to_line(self) -> str:
        fields = [f"task={self.task.value}", f"d={self.d}", f"vocab_size={self.vocab_size}",
                  f"mask_id={self.mask_id}", f"seed={self.seed}", f"split={self.split}"]
        fields += [f"{key}={value}" for key, value in self.extras.items()]
        return " ".join([HEADER_TAG] + fields)

    @classmethod
    def from_line(cls, line: str) -> "DatasetHeader":
        parts = line.strip().split()
        if not parts or parts[0] != HEADER_TAG:
            raise InputError(f"Missing dataset header, got {line[:40]!r}")
        try:
            values = dict(part.split("=", 1) for part in parts[1:])
            return cls(
                task=TaskKind(values.pop("task")),
                d=int(values.pop("d")),
                vocab_size=int(values.pop("vocab_size")),
                mask_id=int(values.pop("mask_id")),
                seed=int(values.pop("seed")),
                split=values.pop("split"),
                extras={key: int(value) for key, value in values.items()},
            )
        except (KeyError, ValueError) as e:
            raise InputError(f"Malformed dataset header: {e}") from e


class PuzzleDataset:
    def __init__(self, header: DatasetHeader, instances: List[PuzzleInstance]):
        """
        Initialize a dataset

        Args:
            header: File header (task kind, d, vocabulary, seed, split)
            instances: Puzzle instances, all of length header.d
        """
        self.header = header
        self.instances = instances

    def __len__(self) -> int:
        return len(self.instances)

    def __getitem__(self, idx: int) -> PuzzleInstance:
        return self.instances[idx]

    def __iter__(self) -> Iterator[PuzzleInstance]:
        return iter(self.instances)

    def save(self, path: Path) -> None:
        """Write header plus one `x0|x1|clue-bits` line per instance"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.header.to_line() + "\n")
            for inst in self.instances:
                x0 = " ".join(str(t) for t in inst.x0.tolist())
                x1 = " ".join(str(t) for t in inst.x1.tolist())
                bits = "".join("1" if c else "0" for c in inst.clues.tolist())
                f.write(f"{x0}|{x1}|{bits}\n")
        logger.info(f"Wrote {len(self.instances)} instances to {path}")

    @classmethod
    def load(cls, path: Path) -> "PuzzleDataset":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Dataset file not found: {path}")
        with open(path, encoding="utf-8") as f:
            header = DatasetHeader.from_line(f.readline())
            vocab = Vocabulary(size=header.vocab_size, mask_id=header.mask_id, task_kind=header.task)
            instances = []
            for lineno, line in enumerate(f, start=2):
                if not line.strip():
                    continue
                try:
                    x0, x1, bits = line.rstrip("\n").split("|")
                    inst = PuzzleInstance(
                        x0=[int(t) for t in x0.split()],
                        x1=[int(t) for t in x1.split()],
                        clues=[ch == "1" for ch in bits],
                    )
                except ValueError as e:
                    raise InputError(f"{path}:{lineno}: malformed instance line ({e})") from e
                if inst.d != header.d:
                    raise InputError(f"{path}:{lineno}: length {inst.d} != header d={header.d}")
                inst.check(vocab)
                instances.append(inst)
        return cls(header, instances)


class DatasetBuilder:
    def __init__(self, task: TaskConfig, jobs: int = 1):
        """
        Initialize dataset builder

        Args:
            task: Task block selecting kind and generator parameters
            jobs: Worker processes for generation
        """
        self.task = task
        self.jobs = max(1, jobs)

    def header(self, seed: int, split: str) -> DatasetHeader:
        vocab = self.task.vocabulary()
        if self.task.kind == TaskKind.SUDOKU:
            extras = {"n": self.task.n}
        else:
            extras = {"k": self.task.k, "operand_max": self.task.operand_max,
                      "result_max": self.task.result_max}
        return DatasetHeader(task=self.task.kind, d=self.task.d, vocab_size=vocab.size,
                             mask_id=vocab.mask_id, seed=seed, split=split, extras=extras)

    def build(self, count: int, seed: int, split: str = "train") -> PuzzleDataset:
        """
        Generate `count` instances belonging to `split`.

        Candidate j is drawn with its own seed derived from (seed, j); candidates
        whose clue state hashes to another split are skipped. Output is identical
        for any number of jobs.
        """
        if split not in SPLITS:
            raise InputError(f"Unknown split {split!r}; choose from {SPLITS}")
        if count < 0:
            raise InputError(f"count must be nonnegative, got {count}")

        instances: List[PuzzleInstance] = []
        next_index = 0
        pool = mp.Pool(self.jobs) if self.jobs > 1 else None
        try:
            with tqdm(total=count, desc=f"Generating {split}", disable=count < 100) as progress:
                while len(instances) < count:
                    batch = max(len(SPLITS) * (count - len(instances)), 16)
                    args = [(self.task, candidate_seed(seed, j))
                            for j in range(next_index, next_index + batch)]
                    next_index += batch
                    results = pool.imap(_generate_candidate, args, chunksize=8) if pool else map(_generate_candidate, args)
                    for inst in results:
                        if len(instances) >= count:
                            break
                        if split_of(inst) == split:
                            instances.append(inst)
                            progress.update(1)
        finally:
            if pool is not None:
                pool.terminate()
                pool.join()

        logger.info(f"Generated {len(instances)} {self.task.kind.value} instances for split {split} "
                    f"from {next_index} candidates")
        return PuzzleDataset(self.header(seed, split), instances)
