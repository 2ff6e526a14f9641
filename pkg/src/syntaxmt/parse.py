"""Parse targets over ROOT-prefixed sentences, argmax decoding of an
attention head, and attachment scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import DepTree, linear_tree

IGNORE = -1


@dataclass(frozen=True)
class DecodedParse:
    """Predicted heads for the words of a sentence; may contain cycles."""

    heads: tuple[int, ...]

    def __post_init__(self):
        heads = tuple(int(h) for h in self.heads)
        object.__setattr__(self, "heads", heads)
        n = len(heads)
        if any(not 0 <= h <= n for h in heads):
            raise ValueError(f"head out of range 0..{n}: {heads}")

    def __len__(self):
        return len(self.heads)


@dataclass(frozen=True)
class ParseTarget:
    """One-hot head matrix of shape (n+1, n+1); rows are dependents,
    columns heads, row 0 (ROOT) is excluded from the loss."""

    matrix: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0] - 1

    def head_indices(self) -> list[int]:
        """Gold column per row, IGNORE for the ROOT row."""
        return [IGNORE] + [int(j) for j in self.matrix[1:].argmax(axis=1)]


def dep_target(tree: DepTree, n: int) -> ParseTarget:
    if len(tree.heads) != n:
        raise ValueError(f"tree has {len(tree.heads)} words, expected {n}")
    m = np.zeros((n + 1, n + 1), dtype=np.float32)
    for i, h in enumerate(tree.heads, start=1):
        if not 0 <= h <= n:
            raise ValueError(f"head {h} out of range 0..{n}")
        m[i, h] = 1.0
    return ParseTarget(m)


def diagonal_target(n: int) -> ParseTarget:
    if n < 1:
        raise ValueError("n must be >= 1")
    m = np.zeros((n + 1, n + 1), dtype=np.float32)
    rows = np.arange(1, n + 1)
    m[rows, rows - 1] = 1.0
    return ParseTarget(m)


def decode_parse(alpha, n: int) -> DecodedParse:
    """Argmax head for every word row of a (>= n+1, >= n+1) attention matrix.

    ``np.argmax`` returns the first maximum, so ties go to the lowest column.
    """
    a = np.asarray(alpha, dtype=np.float64)[1 : n + 1, : n + 1]
    if a.shape != (n, n + 1):
        raise ValueError(f"attention matrix too small for n={n}: {np.shape(alpha)}")
    return DecodedParse(tuple(int(j) for j in a.argmax(axis=1)))


def _heads(x) -> tuple[int, ...]:
    return tuple(x.heads) if hasattr(x, "heads") else tuple(x)


def uas(gold, predicted) -> float:
    g, p = _heads(gold), _heads(predicted)
    if len(g) != len(p):
        raise ValueError(f"length mismatch: gold {len(g)} vs predicted {len(p)}")
    if not g:
        raise ValueError("empty parse")
    return sum(a == b for a, b in zip(g, p)) / len(g)


def diagonal_precision(predicted) -> float:
    p = _heads(predicted)
    return uas(linear_tree(len(p)).heads, p)


def corpus_uas(golds: Sequence, predictions: Sequence) -> float:
    """Word-weighted UAS over a corpus."""
    correct = total = 0
    for g, p in zip(golds, predictions, strict=True):
        g, p = _heads(g), _heads(p)
        if len(g) != len(p):
            raise ValueError("length mismatch")
        correct += sum(a == b for a, b in zip(g, p))
        total += len(g)
    return correct / total if total else 0.0
