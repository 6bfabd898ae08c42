#!/usr/bin/env python3
# tasks.py

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import GenerationError, InputError

logger = logging.getLogger(__name__)

TokenArray = Union[np.ndarray, Sequence[int], torch.Tensor]


class TaskKind(str, Enum):
    SUDOKU = "sudoku"
    COUNTDOWN = "countdown"


@dataclass(frozen=True)
class Vocabulary:
    """N solution tokens with ids 0..N-1 followed by the mask token"""
    size: int
    mask_id: int
    task_kind: TaskKind

    def __post_init__(self):
        if self.size < 1:
            raise InputError(f"Vocabulary needs at least one token, got {self.size}")
        if self.mask_id != self.size:
            raise InputError(f"mask id must equal the vocabulary size ({self.size}), got {self.mask_id}")


@dataclass
class PuzzleInstance:
    x0: np.ndarray
    x1: np.ndarray
    clues: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.int64).reshape(-1)
        self.x1 = np.asarray(self.x1, dtype=np.int64).reshape(-1)
        self.clues = np.asarray(self.clues, dtype=bool).reshape(-1)
        if not (len(self.x0) == len(self.x1) == len(self.clues)):
            raise InputError(
                f"x0/x1/clues lengths differ: {len(self.x0)}, {len(self.x1)}, {len(self.clues)}"
            )
        if np.any(self.x0[self.clues] != self.x1[self.clues]):
            raise InputError("Clue positions of x0 and x1 disagree")

    @property
    def d(self) -> int:
        return len(self.x0)

    @property
    def non_clue_count(self) -> int:
        return int((~self.clues).sum())

    def check(self, vocab: Vocabulary) -> None:
        """Validate token ranges and masking against a vocabulary"""
        if np.any((self.x1 < 0) | (self.x1 >= vocab.size)):
            raise InputError("x1 contains a token outside the solution vocabulary")
        if np.any(self.x0[self.clues] == vocab.mask_id):
            raise InputError("A clue position of x0 holds the mask token")
        if np.any(self.x0[~self.clues] != vocab.mask_id):
            raise InputError("A non-clue position of x0 is not masked")

    def key(self) -> str:
        """Identity of the puzzle (its clue state)"""
        return hashlib.sha1(self.x0.astype("<i8").tobytes()).hexdigest()

    def as_tensors(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (torch.as_tensor(self.x0), torch.as_tensor(self.x1), torch.as_tensor(self.clues))


def stack_instances(instances: Sequence[PuzzleInstance]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batch instances into (x0, x1, clues) tensors of shape (B, d)"""
    if not instances:
        raise InputError("Cannot stack an empty list of instances")
    x0 = torch.as_tensor(np.stack([inst.x0 for inst in instances]))
    x1 = torch.as_tensor(np.stack([inst.x1 for inst in instances]))
    clues = torch.as_tensor(np.stack([inst.clues for inst in instances]))
    return x0, x1, clues


# ---------------------------------------------------------------------------
# Sudoku
# ---------------------------------------------------------------------------

def sudoku_vocabulary(n: int) -> Vocabulary:
    _box_size(n)
    return Vocabulary(size=n, mask_id=n, task_kind=TaskKind.SUDOKU)


def _box_size(n: int) -> int:
    b = int(round(n ** 0.5))
    if n < 1 or b * b != n:
        raise InputError(f"Grid side must be a perfect square, got {n}")
    return b


def _flat_tokens(tokens: TokenArray, length: int) -> np.ndarray:
    if isinstance(tokens, torch.Tensor):
        tokens = tokens.detach().cpu().numpy()
    flat = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if flat.size != length:
        raise InputError(f"Expected {length} tokens, got {flat.size}")
    return flat


def sudoku_validate(grid: TokenArray, n: int) -> bool:
    """True iff the grid is complete and satisfies every row/column/box constraint"""
    b = _box_size(n)
    g = _flat_tokens(grid, n * n).reshape(n, n)
    if np.any((g < 0) | (g >= n)):
        return False

    expected = np.arange(n)
    rows_ok = np.all(np.sort(g, axis=1) == expected)
    cols_ok = np.all(np.sort(g, axis=0) == expected[:, None])
    boxes = g.reshape(b, b, b, b).transpose(0, 2, 1, 3).reshape(n, n)
    boxes_ok = np.all(np.sort(boxes, axis=1) == expected)
    return bool(rows_ok and cols_ok and boxes_ok)


def sudoku_solve(clues: TokenArray, n: int, limit: int = 2) -> List[np.ndarray]:
    """
    Enumerate up to `limit` solutions by backtracking.

    Empty cells are filled in index order, candidate digits in ascending
    order, so the output order is deterministic.
    """
    if limit < 1:
        raise InputError(f"limit must be positive, got {limit}")
    b = _box_size(n)
    flat = _flat_tokens(clues, n * n).copy()
    if np.any((flat < 0) | (flat > n)):
        raise InputError("Clue tokens must be digits or the mask token")

    rows = [0] * n
    cols = [0] * n
    boxes = [0] * n
    empties = []
    for idx, v in enumerate(flat.tolist()):
        if v == n:
            empties.append(idx)
            continue
        r, c = divmod(idx, n)
        bx = (r // b) * b + c // b
        bit = 1 << v
        if (rows[r] | cols[c] | boxes[bx]) & bit:
            return []
        rows[r] |= bit
        cols[c] |= bit
        boxes[bx] |= bit

    solutions: List[np.ndarray] = []

    def search(k: int) -> None:
        if k == len(empties):
            solutions.append(flat.copy())
            return
        idx = empties[k]
        r, c = divmod(idx, n)
        bx = (r // b) * b + c // b
        used = rows[r] | cols[c] | boxes[bx]
        for v in range(n):
            bit = 1 << v
            if used & bit:
                continue
            flat[idx] = v
            rows[r] |= bit
            cols[c] |= bit
            boxes[bx] |= bit
            search(k + 1)
            rows[r] ^= bit
            cols[c] ^= bit
            boxes[bx] ^= bit
            if len(solutions) >= limit:
                break
        flat[idx] = n

    search(0)
    return solutions


def _completed_grid(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random solved grid from the base pattern under band/stack/digit shuffles"""
    b = _box_size(n)
    rows = [g * b + r for g in rng.permutation(b) for r in rng.permutation(b)]
    cols = [g * b + c for g in rng.permutation(b) for c in rng.permutation(b)]
    digits = rng.permutation(n)
    grid = np.array(
        [[digits[(b * (r % b) + r // b + c) % n] for c in cols] for r in rows],
        dtype=np.int64,
    )
    return grid.reshape(-1)


def sudoku_generate(n: int, seed: int, clue_range: Tuple[int, int],
                    max_retries: int = 100) -> PuzzleInstance:
    """Generate a uniquely solvable puzzle with a clue count inside clue_range"""
    lo, hi = clue_range
    if not (0 <= lo <= hi <= n * n):
        raise InputError(f"Infeasible clue range {clue_range} for a {n}x{n} grid")

    rng = np.random.default_rng(seed)
    for attempt in range(max_retries):
        solution = _completed_grid(n, rng)
        target = int(rng.integers(lo, hi + 1))
        puzzle = solution.copy()
        clue_count = n * n

        for cell in rng.permutation(n * n):
            if clue_count <= target:
                break
            puzzle[cell] = n
            if len(sudoku_solve(puzzle, n, limit=2)) == 1:
                clue_count -= 1
            else:
                puzzle[cell] = solution[cell]

        if clue_count <= hi:
            return PuzzleInstance(x0=puzzle, x1=solution, clues=puzzle != n)
        logger.debug(f"Attempt {attempt}: stuck at {clue_count} clues (> {hi}), retrying")

    raise GenerationError(f"No {n}x{n} puzzle with clues in {clue_range} after {max_retries} attempts")


def parse_sudoku_literal(text: str, n: int) -> np.ndarray:
    """Row-major digit string ('.' or '0' for blanks) -> token ids"""
    chars = [ch for ch in text if not ch.isspace() and ch not in ",|"]
    if len(chars) != n * n:
        raise InputError(f"Sudoku literal needs {n * n} cells, got {len(chars)}")
    tokens = []
    for ch in chars:
        if ch in ".0":
            tokens.append(n)
        elif ch.isdigit() and 1 <= int(ch) <= n:
            tokens.append(int(ch) - 1)
        else:
            raise InputError(f"Invalid Sudoku cell {ch!r}")
    return np.array(tokens, dtype=np.int64)


def sudoku_from_digits(rows: Sequence[Sequence[int]]) -> np.ndarray:
    """Digits 1..n (0 = blank) -> token ids with mask id n"""
    digits = np.asarray(rows, dtype=np.int64)
    n = digits.shape[0]
    return np.where(digits == 0, n, digits - 1).reshape(-1)


# ---------------------------------------------------------------------------
# Countdown
# ---------------------------------------------------------------------------

OPERATORS = ("+", "-", "*", "/")


@dataclass(frozen=True)
class CountdownCodec:
    """One token per integer 0..result_max, then + - * / = , EOS"""
    result_max: int = 999

    @property
    def equals(self) -> int:
        return self.result_max + 5

    @property
    def comma(self) -> int:
        return self.result_max + 6

    @property
    def eos(self) -> int:
        return self.result_max + 7

    @property
    def size(self) -> int:
        return self.result_max + 8

    @property
    def mask_id(self) -> int:
        return self.size

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(size=self.size, mask_id=self.mask_id, task_kind=TaskKind.COUNTDOWN)

    def op_token(self, symbol: str) -> int:
        return self.result_max + 1 + OPERATORS.index(symbol)

    def op_symbol(self, token: int) -> Optional[str]:
        offset = token - self.result_max - 1
        return OPERATORS[offset] if 0 <= offset < len(OPERATORS) else None

    def is_int(self, token: int) -> bool:
        return 0 <= token <= self.result_max

    def encode_steps(self, steps: Sequence[Tuple[int, str, int, int]]) -> List[int]:
        tokens: List[int] = []
        for i, (a, op, b, c) in enumerate(steps):
            if i:
                tokens.append(self.comma)
            tokens.extend([a, self.op_token(op), b, self.equals, c])
        return tokens

    def render(self, tokens: TokenArray) -> str:
        """Human-readable form of a token sequence"""
        out = []
        for t in np.asarray(tokens).reshape(-1).tolist():
            if self.is_int(t):
                out.append(str(t))
            elif self.op_symbol(t):
                out.append(self.op_symbol(t))
            elif t == self.equals:
                out.append("=")
            elif t == self.comma:
                out.append(",")
            elif t == self.eos:
                out.append("<eos>")
            else:
                out.append("<m>")
        return " ".join(out)


def countdown_seq_len(k: int) -> int:
    """Numbers, target and room for k-1 steps with separators"""
    return k + 1 + 6 * (k - 1)


class CountdownReason(str, Enum):
    PARSE_FAILURE = "parse_failure"
    INEXACT_DIVISION = "inexact_division"
    OPERAND_REUSE = "operand_reuse"
    WRONG_STEP_VALUE = "wrong_step_value"
    WRONG_FINAL_VALUE = "wrong_final_value"


@dataclass(frozen=True)
class CountdownVerdict:
    valid: bool
    reason: Optional[CountdownReason] = None
    detail: str = ""


def _invalid(reason: CountdownReason, detail: str) -> CountdownVerdict:
    return CountdownVerdict(valid=False, reason=reason, detail=detail)


def _apply(op: str, a: int, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    return a // b


def countdown_eval(expr: TokenArray, given: Sequence[int], target: int,
                   codec: CountdownCodec = CountdownCodec()) -> CountdownVerdict:
    """Check a serialized step list 'a op b = c, ...' against numbers and target"""
    tokens = [int(t) for t in np.asarray(expr).reshape(-1).tolist()]
    if codec.eos in tokens:
        cut = tokens.index(codec.eos)
        body, tail = tokens[:cut], tokens[cut:]
        if any(t != codec.eos for t in tail):
            return _invalid(CountdownReason.PARSE_FAILURE, "tokens after EOS")
    else:
        body = tokens
    if not body:
        return _invalid(CountdownReason.PARSE_FAILURE, "empty expression")

    steps = []
    chunk: List[int] = []
    for t in body + [codec.comma]:
        if t != codec.comma:
            chunk.append(t)
            continue
        if len(chunk) != 5:
            return _invalid(CountdownReason.PARSE_FAILURE, f"step of {len(chunk)} tokens")
        a, op_tok, b, eq, c = chunk
        op = codec.op_symbol(op_tok)
        if not (codec.is_int(a) and codec.is_int(b) and codec.is_int(c)) or op is None or eq != codec.equals:
            return _invalid(CountdownReason.PARSE_FAILURE, f"malformed step {codec.render(chunk)}")
        steps.append((a, op, b, c))
        chunk = []

    available = Counter(int(v) for v in given)
    for a, op, b, c in steps:
        if op == "/" and (b == 0 or a % b):
            return _invalid(CountdownReason.INEXACT_DIVISION, f"{a}/{b}")
        for operand in (a, b):
            if available[operand] <= 0:
                return _invalid(CountdownReason.OPERAND_REUSE, f"{operand} not available")
            available[operand] -= 1
        if _apply(op, a, b) != c:
            return _invalid(CountdownReason.WRONG_STEP_VALUE, f"{a}{op}{b}!={c}")
        available[c] += 1

    final = steps[-1][3]
    if final != target:
        return _invalid(CountdownReason.WRONG_FINAL_VALUE, f"{final}!={target}")
    return CountdownVerdict(valid=True)


def countdown_check_sequence(seq: TokenArray, k: int,
                             codec: CountdownCodec = CountdownCodec()) -> CountdownVerdict:
    """Evaluate a full sequence laid out as numbers, target, expression"""
    tokens = np.asarray(seq).reshape(-1).tolist()
    header = tokens[:k + 1]
    if len(header) != k + 1 or not all(codec.is_int(t) for t in header):
        return _invalid(CountdownReason.PARSE_FAILURE, "numbers/target region is not integer tokens")
    return countdown_eval(tokens[k + 1:], header[:k], header[k], codec)


def _random_trace(numbers: List[int], rng: np.random.Generator,
                  result_max: int) -> Optional[List[Tuple[int, str, int, int]]]:
    """Combine all numbers pairwise with random operations; None on a dead end"""
    pool = list(numbers)
    steps = []
    while len(pool) > 1:
        i, j = (int(v) for v in rng.choice(len(pool), size=2, replace=False))
        a, b = pool[i], pool[j]
        op = OPERATORS[int(rng.integers(len(OPERATORS)))]
        if op == "-" and a < b:
            a, b = b, a
        if op == "/" and (b == 0 or a % b):
            if a != 0 and b % a == 0:
                a, b = b, a
            else:
                return None
        value = _apply(op, a, b)
        if value > result_max:
            return None
        for idx in sorted((i, j), reverse=True):
            del pool[idx]
        pool.append(value)
        steps.append((a, op, b, value))
    return steps


def countdown_generate(k: int, operand_max: int, target_range: Tuple[int, int], seed: int,
                       result_max: int = 999, seq_len: Optional[int] = None) -> PuzzleInstance:
    """Rejection-sample numbers and a full solution trace whose result lies in target_range"""
    if k < 2:
        raise InputError(f"Countdown needs at least 2 numbers, got {k}")
    lo, hi = target_range
    if not (0 <= lo <= hi <= result_max) or not (1 <= operand_max <= result_max):
        raise InputError(f"Ranges incompatible with result_max={result_max}")
    length = seq_len or countdown_seq_len(k)
    if length < countdown_seq_len(k):
        raise InputError(f"seq_len {length} too short for k={k}")

    codec = CountdownCodec(result_max)
    rng = np.random.default_rng(seed)
    while True:
        numbers = [int(v) for v in rng.integers(1, operand_max + 1, size=k)]
        steps = _random_trace(numbers, rng, result_max)
        if steps is not None and lo <= steps[-1][3] <= hi:
            break

    target = steps[-1][3]
    body = numbers + [target] + codec.encode_steps(steps)
    x1 = np.array(body + [codec.eos] * (length - len(body)), dtype=np.int64)
    clues = np.zeros(length, dtype=bool)
    clues[:k + 1] = True
    x0 = np.where(clues, x1, codec.mask_id)
    return PuzzleInstance(x0=x0, x1=x1, clues=clues)
