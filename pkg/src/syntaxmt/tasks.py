"""Secondary tasks as plain source/target token sequences.

Every task example is a pair of token sequences; the task is selected by a
task-ID token appended to the source. ``ConstantScheduler`` mixes the
primary (translation) stream with a secondary stream example by example.
"""

from __future__ import annotations

import enum
import itertools
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .corpus import TASK_TOKENS, DepTree, ParallelExample, Sentence
from .parse import DecodedParse

ROOT_FORM = "#ROOT"
ENUM_TOKEN = "W"


class TaskKind(enum.Enum):
    TRANSLATE = "Translate"
    DEP_HEADS = "DepHeads"
    DEP_LABELS = "DepLabels"
    DEP_HEADS_LABELS = "DHeadsLab"
    COUNT_SRC_WORDS = "CountSrcWords"
    ENUM_SRC_WORDS = "EnumSrcWords"
    COPY_SRC = "CopySrc"

    @property
    def token(self) -> str:
        return "#" + self.value

    @property
    def needs_tree(self) -> bool:
        return self in (TaskKind.DEP_HEADS, TaskKind.DEP_LABELS, TaskKind.DEP_HEADS_LABELS)

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        """Accept the enum value ("DepHeads"), member name or ID token."""
        key = name.lstrip("#")
        for kind in cls:
            if key in (kind.value, kind.name) or (kind is cls.DEP_HEADS_LABELS and key == "DepHeadsLabels"):
                return kind
        raise ValueError(f"unknown task kind {name!r}")


_BY_TOKEN = {k.token: k for k in TaskKind}
assert set(_BY_TOKEN) == set(TASK_TOKENS)


@dataclass(frozen=True)
class TaskExample:
    source: tuple[str, ...]
    target: tuple[str, ...]
    kind: TaskKind

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "target", tuple(self.target))
        if any(t in _BY_TOKEN for t in self.target):
            raise ValueError("task-ID token in target")
        if any(t in _BY_TOKEN for t in self.source[:-1]):
            raise ValueError("task-ID token before the end of the source")
        last = self.source[-1] if self.source else None
        if last in _BY_TOKEN:
            if _BY_TOKEN[last] is not self.kind:
                raise ValueError(f"source ends with {last} but kind is {self.kind.value}")
        elif self.kind is not TaskKind.TRANSLATE:
            raise ValueError(f"{self.kind.value} source must end with {self.kind.token}")

    @property
    def has_task_token(self) -> bool:
        return bool(self.source) and self.source[-1] in _BY_TOKEN

    @property
    def raw_source(self) -> tuple[str, ...]:
        return self.source[:-1] if self.has_task_token else self.source

    def to_line(self) -> str:
        return " ".join(self.source) + "\t" + " ".join(self.target)

    @classmethod
    def from_line(cls, line: str) -> "TaskExample":
        src, sep, tgt = line.rstrip("\n").partition("\t")
        if not sep:
            raise ValueError("task example line needs a tab separator")
        source = tuple(src.split())
        kind = _BY_TOKEN.get(source[-1], TaskKind.TRANSLATE) if source else TaskKind.TRANSLATE
        return cls(source, tuple(tgt.split()), kind)


def write_task_examples(path, examples: Iterable[TaskExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(ex.to_line() + "\n")


def read_task_examples(path) -> list[TaskExample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [TaskExample.from_line(line) for line in lines if line.strip()]


def linearize(example: ParallelExample, kind: TaskKind, use_task_token: bool = True) -> TaskExample:
    words = example.source.words
    tree = example.source_tree
    if kind.needs_tree and tree is None:
        raise ValueError(f"{kind.value} requires a source tree")

    if kind is TaskKind.TRANSLATE:
        target = example.target.words
    elif kind is TaskKind.DEP_HEADS:
        target = head_forms(words, tree)
    elif kind is TaskKind.DEP_LABELS:
        target = tuple("#" + label for label in tree.labels)
    elif kind is TaskKind.DEP_HEADS_LABELS:
        target = tuple(
            tok
            for form, label in zip(head_forms(words, tree), tree.labels)
            for tok in (form, "#" + label)
        )
    elif kind is TaskKind.COUNT_SRC_WORDS:
        target = (str(len(words)),)
    elif kind is TaskKind.ENUM_SRC_WORDS:
        target = (ENUM_TOKEN,) * len(words)
    elif kind is TaskKind.COPY_SRC:
        target = words
    else:  # pragma: no cover
        raise AssertionError(kind)

    if use_task_token or kind is not TaskKind.TRANSLATE:
        source = words + (kind.token,)
    else:
        source = words
    return TaskExample(source, target, kind)


def head_forms(words: Sequence[str], tree: DepTree) -> tuple[str, ...]:
    return tuple(ROOT_FORM if h == 0 else words[h - 1] for h in tree.heads)


@dataclass
class ReconstructionDiagnostics:
    unmatched: int = 0
    missing: int = 0
    surplus: int = 0


def reconstruct_tree(
    source: Sentence | Sequence[str],
    depheads_output: Sequence[str],
    diagnostics: Optional[ReconstructionDiagnostics] = None,
) -> DecodedParse:
    """Invert the DepHeads linearization.

    A predicted form is attached to its nearest occurrence in the source
    other than the word itself, ties going to the earlier occurrence. Forms
    absent from the source, and words beyond the end of a short output,
    attach to the previous word (ROOT for the first word).
    """
    words = source.words if isinstance(source, Sentence) else tuple(source)
    diag = diagnostics if diagnostics is not None else ReconstructionDiagnostics()
    positions: dict[str, list[int]] = {}
    for j, w in enumerate(words, start=1):
        positions.setdefault(w, []).append(j)

    heads = []
    for i in range(1, len(words) + 1):
        if i > len(depheads_output):
            diag.missing += 1
            heads.append(i - 1)
            continue
        tok = depheads_output[i - 1]
        if tok == ROOT_FORM:
            heads.append(0)
            continue
        options = [j for j in positions.get(tok, ()) if j != i]
        if not options:
            diag.unmatched += 1
            heads.append(i - 1)
            continue
        heads.append(min(options, key=lambda j: (abs(j - i), j)))
    diag.surplus += max(0, len(depheads_output) - len(words))
    return DecodedParse(tuple(heads))


def split_heads_labels(output: Sequence[str]) -> tuple[list[str], list[str]]:
    """Split an interleaved DepHeads+DepLabels output into its two streams."""
    return list(output[0::2]), list(output[1::2])


def label_accuracy(gold: DepTree, predicted: Sequence[str]) -> float:
    """Positional label matches over the gold length; a leading ``#`` on
    predicted labels is ignored."""
    labels = gold.labels
    if not labels:
        return 0.0
    hits = sum(
        1 for g, p in zip(labels, predicted) if (p[1:] if p.startswith("#") else p) == g
    )
    return hits / len(labels)


@dataclass(frozen=True)
class SchedulerConfig:
    p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("scheduler p must lie in [0, 1]")


class ConstantScheduler:
    """Draw each example from the secondary stream with probability ``p``.

    Both streams are cycled. ``counts`` tracks how many examples were
    emitted from each side.
    """

    def __init__(self, primary: Iterable, secondary: Optional[Iterable], config: SchedulerConfig):
        if config.p > 0 and secondary is None:
            raise ValueError("p > 0 requires a secondary stream")
        self._primary = _cycle(primary, "primary") if config.p < 1 else iter(())
        self._secondary = _cycle(secondary, "secondary") if config.p > 0 else iter(())
        self._rng = random.Random(config.seed)
        self.p = config.p
        self.counts = {"primary": 0, "secondary": 0}

    def __iter__(self) -> Iterator:
        return self

    def __next__(self):
        if self._rng.random() < self.p:
            self.counts["secondary"] += 1
            return next(self._secondary)
        self.counts["primary"] += 1
        return next(self._primary)


def _cycle(stream, name):
    it = iter(stream)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError(f"{name} stream is empty") from None
    return itertools.cycle(itertools.chain([first], it))


def schedule(primary, secondary, config: SchedulerConfig) -> ConstantScheduler:
    return ConstantScheduler(primary, secondary, config)
