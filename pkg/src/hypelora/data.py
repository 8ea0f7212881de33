"""Pre-tokenized datasets: JSON-lines ingestion, synthetic tasks, and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .encoder import Batch

PAD = 0
# majority task vocabulary: two markers and a leading summary token
MARKER_A, MARKER_B, CLS = 1, 2, 3
SYNTHETIC_KINDS = ("parity", "majority", "first_token")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int


@dataclass
class DatasetSplit:
    name: str
    examples: list[Example]
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.examples:
            raise DatasetError(f"split {self.name!r} is empty")
        for i, ex in enumerate(self.examples):
            if not 0 <= ex.label < self.n_classes:
                raise DatasetError(f"example {i}: label {ex.label} outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)


def _parse_line(raw: str, lineno: int, n_classes: int, vocab_size: int | None,
                max_seq_len: int | None) -> Example:
    try:
        rec = json.loads(raw)
        tokens, label = rec["tokens"], rec["label"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"line {lineno}: malformed record ({exc})") from None
    if not isinstance(tokens, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens):
        raise DatasetError(f"line {lineno}: tokens must be a list of integers")
    if not isinstance(label, int) or isinstance(label, bool):
        raise DatasetError(f"line {lineno}: label must be an integer")
    if not tokens:
        raise DatasetError(f"line {lineno}: empty token list")
    if max_seq_len is not None and len(tokens) > max_seq_len:
        raise DatasetError(f"line {lineno}: {len(tokens)} tokens exceed max_seq_len={max_seq_len}")
    if min(tokens) < 0 or (vocab_size is not None and max(tokens) >= vocab_size):
        raise DatasetError(f"line {lineno}: token id outside [0, {vocab_size})")
    if not 0 <= label < n_classes:
        raise DatasetError(f"line {lineno}: label {label} outside [0, {n_classes})")
    return Example(tuple(tokens), label)


def load_dataset(path, n_classes: int, vocab_size: int | None = None,
                 max_seq_len: int | None = None, name: str | None = None) -> DatasetSplit:
    """Read ``{"tokens": [...], "label": k}`` records, one per line.

    Every malformed line is reported; the error message lists all of them
    with their line numbers.
    """
    path = Path(path)
    examples, problems = [], []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                examples.append(_parse_line(raw, lineno, n_classes, vocab_size, max_seq_len))
            except DatasetError as exc:
                problems.append(str(exc))
    if problems:
        raise DatasetError(f"{path}: " + "; ".join(problems))
    return DatasetSplit(name or path.stem, examples, n_classes)


def write_dataset(split: DatasetSplit, path) -> None:
    with Path(path).open("w") as fh:
        for ex in split.examples:
            fh.write(json.dumps({"tokens": list(ex.tokens), "label": ex.label}) + "\n")


def parity_label(tokens) -> int:
    return sum(1 for t in tokens if t == 1) % 2


def majority_label(tokens) -> int:
    a = sum(1 for t in tokens if t == MARKER_A)
    b = sum(1 for t in tokens if t == MARKER_B)
    return 1 if b > a else 0


def first_token_label(tokens, vocab_size: int) -> int:
    return int(tokens[0] >= vocab_size / 2)


def make_synthetic_task(kind: str, n: int, seq_len: int, vocab: int, seed=0,
                        name: str = "train") -> DatasetSplit:
    """Deterministic binary classification sequences.

    parity
        binary tokens; label = number of 1s mod 2.
    majority
        ``CLS`` followed by filler tokens and an odd number of markers; label is
        1 when ``MARKER_B`` outnumbers ``MARKER_A``.
    first_token
        uniform tokens; label = 1 when the first token is in the upper half
        of the vocabulary.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DatasetError(f"unknown synthetic task {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if kind == "majority" and (vocab <= CLS + 1 or seq_len < 3):
        raise DatasetError("majority needs vocab > 4 and seq_len >= 3")
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(n):
        length = int(rng.integers(max(2, seq_len // 2), seq_len + 1))
        if kind == "parity":
            tokens = rng.integers(0, 2, size=length).tolist()
            label = parity_label(tokens)
        elif kind == "first_token":
            tokens = rng.integers(0, vocab, size=length).tolist()
            label = first_token_label(tokens, vocab)
        else:
            body = length - 1
            max_markers = min(7, body)
            n_markers = int(rng.choice(np.arange(1, max_markers + 1, 2)))
            tokens = rng.integers(CLS + 1, vocab, size=body)
            slots = rng.choice(body, size=n_markers, replace=False)
            tokens[slots] = rng.choice([MARKER_A, MARKER_B], size=n_markers)
            tokens = [CLS] + tokens.tolist()
            label = majority_label(tokens)
        examples.append(Example(tuple(int(t) for t in tokens), label))
    return DatasetSplit(name, examples, 2, meta={"kind": kind, "seq_len": seq_len, "vocab": vocab})


def collate(examples: list[Example], pad_token: int = PAD) -> Batch:
    t = max(len(ex.tokens) for ex in examples)
    ids = np.full((len(examples), t), pad_token, dtype=np.int64)
    mask = np.zeros((len(examples), t), dtype=np.int64)
    for i, ex in enumerate(examples):
        ids[i, :len(ex.tokens)] = ex.tokens
        mask[i, :len(ex.tokens)] = 1
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(ids, mask, labels)


def batches(split: DatasetSplit, batch_size: int, seed=None, pad_token: int = PAD,
            shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of padded batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(split))
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(len(split))
    for start in range(0, len(order), batch_size):
        yield collate([split.examples[i] for i in order[start:start + batch_size]], pad_token)
