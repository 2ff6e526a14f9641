"""Corpus ingestion: CoNLL-U trees, parallel text, vocabularies and a
seeded synthetic language with nested (non-linear) dependency trees."""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
EOS = "</s>"
ROOT = "ROOT"

# Task-ID tokens live here so the vocabulary can reserve them without
# importing the task layer.
TASK_TOKENS = (
    "#Translate",
    "#DepHeads",
    "#DepLabels",
    "#DHeadsLab",
    "#CountSrcWords",
    "#EnumSrcWords",
    "#CopySrc",
)
RESERVED = (PAD, UNK, EOS, ROOT) + TASK_TOKENS
_RESERVED_SET = frozenset(RESERVED)


class CorpusFormatError(ValueError):
    """Malformed input file; the message names the offending line."""


class InvalidTreeError(ValueError):
    pass


@dataclass
class IngestReport:
    """Counts of input silently dropped or rejected during reading."""

    dropped: int = 0
    rejected: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    rooted: bool = False

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if not tokens:
            raise ValueError("empty sentence")
        body = tokens[1:] if self.rooted else tokens
        if self.rooted and tokens[0] != ROOT:
            raise ValueError("rooted sentence must start with ROOT")
        for tok in body:
            if tok in _RESERVED_SET:
                raise ValueError(f"reserved token {tok!r} inside sentence")
            if not tok or any(c.isspace() for c in tok):
                raise ValueError(f"invalid token {tok!r}")

    @classmethod
    def from_text(cls, line: str) -> "Sentence":
        return cls(tuple(line.split()))

    @property
    def words(self) -> tuple[str, ...]:
        """Tokens without the artificial ROOT."""
        return self.tokens[1:] if self.rooted else self.tokens

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __str__(self):
        return " ".join(self.tokens)


@dataclass(frozen=True)
class DepTree:
    """Heads are 1-based word indices, 0 is the artificial ROOT."""

    heads: tuple[int, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        heads = tuple(int(h) for h in self.heads)
        labels = tuple(self.labels) if self.labels else ("_",) * len(heads)
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "labels", labels)
        if len(labels) != len(heads):
            raise InvalidTreeError("labels and heads differ in length")
        check_tree(heads)

    def __len__(self):
        return len(self.heads)


def check_tree(heads: Sequence[int]) -> None:
    """Raise InvalidTreeError unless every word reaches ROOT."""
    n = len(heads)
    if n == 0:
        raise InvalidTreeError("empty tree")
    for i, h in enumerate(heads, start=1):
        if not 0 <= h <= n:
            raise InvalidTreeError(f"head {h} of word {i} out of range 0..{n}")
        if h == i:
            raise InvalidTreeError(f"word {i} is its own head")
    for i in range(1, n + 1):
        node, steps = i, 0
        while node != 0:
            node = heads[node - 1]
            steps += 1
            if steps > n:
                raise InvalidTreeError(f"cycle through word {i}")


def linear_tree(n: int) -> DepTree:
    return DepTree(tuple(range(n)))


@dataclass(frozen=True)
class ParallelExample:
    source: Sentence
    target: Sentence
    source_tree: Optional[DepTree] = None

    def __post_init__(self):
        if self.source_tree is not None and len(self.source_tree) != len(self.source.words):
            raise ValueError(
                f"tree length {len(self.source_tree)} != source length {len(self.source.words)}"
            )


def insert_root(sentence: Sentence) -> Sentence:
    if sentence.rooted or ROOT in sentence.tokens:
        raise ValueError("sentence already contains ROOT")
    return Sentence((ROOT,) + sentence.tokens, rooted=True)


# --- CoNLL-U --------------------------------------------------------------


def read_conllu(path, report: Optional[IngestReport] = None) -> list[tuple[Sentence, DepTree]]:
    """Read basic dependency trees from a CoNLL-U file.

    Multi-word token ranges (``1-2``) and empty nodes (``1.1``) are skipped.
    Sentences whose heads do not form a tree are logged, recorded in
    ``report.rejected`` and left out of the result.
    """
    out: list[tuple[Sentence, DepTree]] = []
    block: list[tuple[int, list[str]]] = []

    def flush():
        if not block:
            return
        start = block[0][0]
        forms = [cols[1] for _, cols in block]
        labels = [cols[7] for _, cols in block]
        heads = []
        for lineno, cols in block:
            try:
                heads.append(int(cols[6]))
            except ValueError:
                raise CorpusFormatError(f"{path}:{lineno}: non-integer head {cols[6]!r}") from None
        ids = [int(cols[0]) for _, cols in block]
        if ids != list(range(1, len(ids) + 1)):
            raise CorpusFormatError(f"{path}:{start}: word ids are not 1..n")
        try:
            tree = DepTree(tuple(heads), tuple(labels))
            sentence = Sentence(tuple(forms))
        except ValueError as exc:
            msg = f"{path}:{start}: sentence rejected: {exc}"
            logger.warning(msg)
            if report is not None:
                report.rejected.append(msg)
        else:
            out.append((sentence, tree))
        block.clear()

    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise CorpusFormatError(f"{path}:{lineno}: expected 10 columns, got {len(cols)}")
            idx = cols[0]
            if "-" in idx or "." in idx:
                continue
            if not idx.isdigit():
                raise CorpusFormatError(f"{path}:{lineno}: bad word id {idx!r}")
            block.append((lineno, cols))
    flush()
    return out


def write_conllu(path, rows: Iterable[tuple[Sequence[str], Sequence[int], Sequence[str]]]) -> None:
    """Write (forms, heads, labels) triples; other columns are ``_``."""
    with open(path, "w", encoding="utf-8") as f:
        for forms, heads, labels in rows:
            for i, (form, head, label) in enumerate(zip(forms, heads, labels), start=1):
                f.write(f"{i}\t{form}\t_\t_\t_\t_\t{head}\t{label}\t_\t_\n")
            f.write("\n")


# --- parallel text --------------------------------------------------------


def read_parallel(src_path, tgt_path, report: Optional[IngestReport] = None) -> list[ParallelExample]:
    with open(src_path, encoding="utf-8") as f:
        src_lines = f.read().splitlines()
    with open(tgt_path, encoding="utf-8") as f:
        tgt_lines = f.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise CorpusFormatError(
            f"line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}"
        )
    out = []
    dropped = 0
    for src, tgt in zip(src_lines, tgt_lines):
        if not src.split() or not tgt.split():
            dropped += 1
            continue
        out.append(ParallelExample(Sentence.from_text(src), Sentence.from_text(tgt)))
    if dropped:
        logger.warning("dropped %d empty line pair(s) from %s", dropped, src_path)
    if report is not None:
        report.dropped += dropped
    return out


# --- vocabulary -----------------------------------------------------------


class Vocabulary:
    """Word-level vocabulary; ids of RESERVED tokens are fixed."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary does not start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    pad_id = RESERVED.index(PAD)
    unk_id = RESERVED.index(UNK)
    eos_id = RESERVED.index(EOS)
    root_id = RESERVED.index(ROOT)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(sentences: Iterable[Iterable[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size - len(RESERVED)`` most frequent tokens.

    Ties go to the token seen first. Reserved tokens in the input are not
    counted.
    """
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)} reserved tokens")
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            if tok in _RESERVED_SET:
                continue
            counts[tok] += 1
            first_seen.setdefault(tok, len(first_seen))
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocabulary(list(RESERVED) + ranked[: max_size - len(RESERVED)])


def example_tokens(examples: Iterable[ParallelExample]) -> Iterable[tuple[str, ...]]:
    for ex in examples:
        yield ex.source.words
        yield ex.target.words


# --- synthetic language ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticGrammarConfig:
    """A toy language whose trees follow bracket nesting.

    Words come in three classes: openers (``o*``), closers (``c*``) and
    plain words (``w*``). Openers and closers nest like brackets up to
    ``max_depth``. The first word heads the sentence; every other word
    attaches to the innermost open bracket (its opener), or to the first
    word when no bracket is open. A closer attaches to the opener it
    matches. Targets map every word through a seeded bijective dictionary
    and, if ``reverse`` is set, reverse the order.
    """

    vocab_size: int = 40
    min_length: int = 4
    max_length: int = 12
    seed: int = 1
    max_depth: int = 2
    open_prob: float = 0.3
    close_prob: float = 0.35
    num_openers: int = 6
    num_closers: int = 6
    reverse: bool = True
    distinct_words: bool = False

    def __post_init__(self):
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.vocab_size <= self.num_openers + self.num_closers:
            raise ValueError("vocab_size must leave room for plain words")
        if self.distinct_words and self.max_length > min(
            self.num_openers, self.num_closers, self.vocab_size - self.num_openers - self.num_closers
        ):
            raise ValueError("distinct_words needs every word class to cover max_length")

    @property
    def openers(self) -> list[str]:
        return [f"o{i}" for i in range(self.num_openers)]

    @property
    def closers(self) -> list[str]:
        return [f"c{i}" for i in range(self.num_closers)]

    @property
    def plain(self) -> list[str]:
        return [f"w{i}" for i in range(self.vocab_size - self.num_openers - self.num_closers)]

    def dictionary(self) -> dict[str, str]:
        words = self.openers + self.closers + self.plain
        images = [f"t{i}" for i in range(len(words))]
        random.Random(f"dict-{self.seed}").shuffle(images)
        return dict(zip(words, images))


def nested_heads(classes: Sequence[str]) -> list[int]:
    """Heads for a class sequence over {'open', 'close', 'plain'}."""
    heads = []
    stack: list[int] = []
    for i, cls in enumerate(classes, start=1):
        if i == 1:
            head = 0
        elif cls == "close" and stack:
            head = stack[-1]
        else:
            head = stack[-1] if stack else 1
        heads.append(head)
        if cls == "open":
            stack.append(i)
        elif cls == "close" and stack:
            stack.pop()
    return heads


def _sample_classes(rng: random.Random, n: int, cfg: SyntheticGrammarConfig) -> list[str]:
    classes = []
    depth = 0
    for pos in range(n):
        remaining = n - pos
        if depth and remaining <= depth:
            cls = "close"
        else:
            can_open = depth < cfg.max_depth and remaining - 1 >= depth + 1
            r = rng.random()
            if depth and r < cfg.close_prob:
                cls = "close"
            elif can_open and r < cfg.close_prob * (depth > 0) + cfg.open_prob:
                cls = "open"
            else:
                cls = "plain"
        classes.append(cls)
        depth += {"open": 1, "close": -1}.get(cls, 0)
    return classes


def generate_synthetic(config: SyntheticGrammarConfig, n: int) -> list[ParallelExample]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = random.Random(config.seed)
    pools = {"open": config.openers, "close": config.closers, "plain": config.plain}
    mapping = config.dictionary()
    out = []
    for _ in range(n):
        length = rng.randint(config.min_length, config.max_length)
        classes = _sample_classes(rng, length, config)
        if config.distinct_words:
            picks = {c: iter(rng.sample(pools[c], classes.count(c))) for c in pools}
            words = [next(picks[c]) for c in classes]
        else:
            words = [rng.choice(pools[c]) for c in classes]
        heads = nested_heads(classes)
        target = [mapping[w] for w in words]
        if config.reverse:
            target.reverse()
        out.append(
            ParallelExample(
                Sentence(tuple(words)),
                Sentence(tuple(target)),
                DepTree(tuple(heads), tuple(_label(c) for c in classes)),
            )
        )
    return out


def _label(cls: str) -> str:
    return {"open": "Opn", "close": "Cls", "plain": "Wrd"}[cls]


# --- prepared splits ------------------------------------------------------


def write_examples(path, examples: Iterable[ParallelExample]) -> None:
    """One example per line: source, target, heads, labels (tab-separated,
    each space-tokenized; the last two are empty without a tree)."""
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            t = ex.source_tree
            heads = " ".join(map(str, t.heads)) if t else ""
            labels = " ".join(t.labels) if t else ""
            f.write(f"{ex.source}\t{ex.target}\t{heads}\t{labels}\n")


def read_examples(path) -> list[ParallelExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 4:
                raise CorpusFormatError(f"{path}:{lineno}: expected 4 tab-separated columns")
            src, tgt, heads, labels = cols
            tree = None
            if heads.strip():
                try:
                    tree = DepTree(tuple(int(h) for h in heads.split()), tuple(labels.split()))
                except ValueError as exc:
                    raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
            out.append(ParallelExample(Sentence.from_text(src), Sentence.from_text(tgt), tree))
    return out
