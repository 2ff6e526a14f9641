"""Run directories: configuration, data preparation and the experiment
routines behind each CLI subcommand.

A run directory holds::

    config.json          frozen RunConfig
    vocab.txt            one token per line, line number = id
    data/{train,dev,test}.tsv
    manifest.json        sha256 of every prepared file
    metrics.jsonl        written by training
    checkpoints/         step_*.pt and last.pt
    reports/             evaluation, histogram and series output
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import random
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from . import corpus
from .corpus import (
    IngestReport,
    ParallelExample,
    SyntheticGrammarConfig,
    Vocabulary,
    build_vocab,
    generate_synthetic,
    read_conllu,
    read_examples,
    read_parallel,
    write_conllu,
    write_examples,
)
from .evaluation import attention_histogram, report, sharpness
from .model import ModelConfig
from .tasks import ROOT_FORM, ConstantScheduler, SchedulerConfig, TaskKind, linearize
from .training import (
    EncodedExample,
    TrainConfig,
    encode_parallel,
    encode_task,
    encoder_attention,
    epoch_stream,
    evaluate_model,
    load_checkpoint,
    predict_parses,
    train,
    translate_items,
)

logger = logging.getLogger(__name__)

MODES = {"baseline": "none", "alternating": "none", "depparse": "dep", "diagonalparse": "diagonal"}
SPLITS = ("train", "dev", "test")
# keys that shape the prepared data; fixed once a run directory exists
DATA_KEYS = (
    "synthetic", "synth_vocab_size", "synth_min_length", "synth_max_length", "synth_max_depth",
    "synth_seed", "synth_reverse", "synth_distinct_words", "train_size", "dev_size", "test_size",
    "train_src", "train_tgt", "train_conllu", "dev_src", "dev_tgt", "dev_conllu",
    "test_src", "test_tgt", "test_conllu", "vocab_size",
)


class ConfigError(ValueError):
    category = "config"


class InputError(ValueError):
    category = "input"


@dataclass
class RunConfig:
    run_dir: str = "run"
    mode: str = "baseline"
    # model
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 128
    ff_dim: int = 512
    max_sequence_length: int = 64
    dropout: float = 0.1
    parse_layer: int = 1
    parse_head: int = 0
    parse_loss_weight: float = 1.0
    seed: int = 1
    # data
    synthetic: bool = True
    synth_vocab_size: int = 40
    synth_min_length: int = 4
    synth_max_length: int = 12
    synth_max_depth: int = 2
    synth_seed: int = 1
    synth_reverse: bool = True
    synth_distinct_words: bool = False
    train_size: int = 20000
    dev_size: int = 500
    test_size: int = 500
    train_src: str = ""
    train_tgt: str = ""
    train_conllu: str = ""
    dev_src: str = ""
    dev_tgt: str = ""
    dev_conllu: str = ""
    test_src: str = ""
    test_tgt: str = ""
    test_conllu: str = ""
    vocab_size: int = 50000
    # multi-task
    tasks: str = ""
    scheduler_p: float = 0.5
    scheduler_seed: int = 0
    use_task_token: bool = False
    # training
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 2e-3
    warmup_steps: int = 200
    log_every: int = 50
    eval_every: int = 500
    eval_max_sentences: int = 500
    decode_max_length: int = 40
    checkpoint_every: int = 0

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        try:
            self.model_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.mode == "alternating" and self.scheduler_p > 0 and not self.task_mix():
            raise ConfigError("alternating mode needs a non-empty 'tasks' list")
        if not 0 <= self.scheduler_p <= 1:
            raise ConfigError("scheduler_p must lie in [0, 1]")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        return self

    @property
    def parse_mode(self) -> str:
        return MODES[self.mode]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_layers=self.num_layers, num_heads=self.num_heads, model_dim=self.model_dim,
            ff_dim=self.ff_dim, max_sequence_length=self.max_sequence_length, dropout=self.dropout,
            parse_mode=MODES.get(self.mode, "none"), parse_layer=self.parse_layer,
            parse_head=self.parse_head, parse_loss_weight=self.parse_loss_weight, seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**dataclasses.asdict(self), "seed": self.seed})

    def grammar(self) -> SyntheticGrammarConfig:
        return SyntheticGrammarConfig(
            vocab_size=self.synth_vocab_size, min_length=self.synth_min_length,
            max_length=self.synth_max_length, seed=self.synth_seed, max_depth=self.synth_max_depth,
            reverse=self.synth_reverse, distinct_words=self.synth_distinct_words,
        )

    def task_mix(self) -> list[tuple[TaskKind, float]]:
        """Parse ``"DepHeads:1,CopySrc:0.5"`` (weight defaults to 1)."""
        out = []
        for part in filter(None, (p.strip() for p in self.tasks.split(","))):
            name, _, w = part.partition(":")
            try:
                kind = TaskKind.parse(name)
                weight = float(w) if w else 1.0
            except ValueError as exc:
                raise ConfigError(f"bad task entry {part!r}: {exc}") from None
            if kind is TaskKind.TRANSLATE or weight <= 0:
                raise ConfigError(f"bad task entry {part!r}: need a secondary kind with positive weight")
            out.append((kind, weight))
        return out

    # -- (de)serialization --

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**{k: coerce(known[k], v) for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def override(self, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        return dataclasses.replace(self, **{k: coerce(known[k], v) for k, v in values.items()})


def coerce(f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    if kind is bool:
        if isinstance(value, str):
            lowered = value.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ConfigError(f"{f.name}: expected a boolean, got {value!r}")
            return lowered in ("1", "true", "yes")
        return bool(value)
    try:
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: expected {kind.__name__}, got {value!r}") from None


# --- prepare --------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_split(cfg: RunConfig, split: str) -> list[ParallelExample]:
    src, tgt, conllu = (getattr(cfg, f"{split}_{k}") for k in ("src", "tgt", "conllu"))
    rep = IngestReport()
    if conllu:
        rows = read_conllu(conllu, rep)
        with open(tgt, encoding="utf-8") as f:
            targets = f.read().splitlines()
        if rep.rejected:
            raise InputError(f"{conllu}: {len(rep.rejected)} sentence(s) rejected; cannot align with {tgt}")
        if len(targets) != len(rows):
            raise InputError(f"{conllu} has {len(rows)} sentences but {tgt} has {len(targets)} lines")
        out = []
        for (sent, tree), line in zip(rows, targets):
            if not line.split():
                rep.dropped += 1
                continue
            out.append(ParallelExample(sent, corpus.Sentence.from_text(line), tree))
    else:
        out = read_parallel(src, tgt, rep)
    if rep.dropped:
        logger.warning("%s: dropped %d example(s) with an empty side", split, rep.dropped)
    return out


def _required_inputs(cfg: RunConfig) -> list[str]:
    paths = []
    for split in SPLITS:
        if getattr(cfg, f"{split}_conllu"):
            paths += [getattr(cfg, f"{split}_conllu"), getattr(cfg, f"{split}_tgt")]
        else:
            paths += [getattr(cfg, f"{split}_src"), getattr(cfg, f"{split}_tgt")]
    return paths


def vocab_tokens(examples: list[ParallelExample], max_length: int):
    """Every token the model may read or emit: sentences, all secondary
    task outputs and the count tokens up to ``max_length``."""
    yield from corpus.example_tokens(examples)
    for ex in examples:
        for kind in TaskKind:
            if kind.needs_tree and ex.source_tree is None:
                continue
            if kind in (TaskKind.TRANSLATE, TaskKind.COPY_SRC):
                continue
            yield linearize(ex, kind).target
    yield [str(i) for i in range(max_length + 1)]
    yield [ROOT_FORM]


def prepare(cfg: RunConfig, force: bool = False) -> dict:
    """Create the run directory; returns the manifest."""
    cfg.validate()
    run = Path(cfg.run_dir)
    cfg_path = run / "config.json"
    if cfg_path.exists() and not force:
        old = RunConfig.load(cfg_path)
        if {k: getattr(old, k) for k in DATA_KEYS} != {k: getattr(cfg, k) for k in DATA_KEYS}:
            raise ConfigError(f"{run} already holds a different dataset; pass --force to overwrite")
    elif run.exists() and any(run.iterdir()) and not cfg_path.exists() and not force:
        raise ConfigError(f"{run} exists and is not a run directory; pass --force to use it")

    if cfg.synthetic:
        total = cfg.train_size + cfg.dev_size + cfg.test_size
        data = generate_synthetic(cfg.grammar(), total)
        splits = {
            "train": data[: cfg.train_size],
            "dev": data[cfg.train_size : cfg.train_size + cfg.dev_size],
            "test": data[cfg.train_size + cfg.dev_size :],
        }
    else:
        missing = [p for p in _required_inputs(cfg) if not p or not Path(p).exists()]
        if missing:
            raise InputError("missing input file(s): " + ", ".join(repr(p) for p in missing))
        splits = {s: _load_split(cfg, s) for s in SPLITS}
    if not splits["train"]:
        raise InputError("training split is empty")

    (run / "data").mkdir(parents=True, exist_ok=True)
    max_len = max(len(ex.source.words) for part in splits.values() for ex in part)
    vocab = build_vocab(vocab_tokens(splits["train"], max_len), cfg.vocab_size)
    vocab.save(run / "vocab.txt")
    for split, examples in splits.items():
        write_examples(run / "data" / f"{split}.tsv", examples)
    cfg_path.write_text(cfg.to_json(), encoding="utf-8")
    files = ["vocab.txt"] + [f"data/{s}.tsv" for s in SPLITS]
    manifest = {
        "files": {f: _sha256(run / f) for f in files},
        "counts": {s: len(v) for s, v in splits.items()},
        "vocab_size": len(vocab),
    }
    (run / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# --- loading a run --------------------------------------------------------


@dataclass
class Run:
    config: RunConfig
    vocab: Vocabulary
    path: Path

    @classmethod
    def open(cls, run_dir, overrides: Optional[dict] = None) -> "Run":
        path = Path(run_dir)
        if not (path / "config.json").exists():
            raise InputError(f"{path} is not a prepared run directory (no config.json)")
        cfg = RunConfig.load(path / "config.json")
        if overrides:
            changed = sorted(k for k, v in overrides.items() if k in DATA_KEYS and coerce(
                next(f for f in fields(cfg) if f.name == k), v) != getattr(cfg, k))
            if changed:
                raise ConfigError(f"data keys are fixed after prepare: {', '.join(changed)}")
            cfg = cfg.override({k: v for k, v in overrides.items() if k != "run_dir"})
        cfg.run_dir = str(path)
        return cls(cfg.validate(), Vocabulary.load(path / "vocab.txt"), path)

    def split(self, name: str) -> list[ParallelExample]:
        p = self.path / "data" / f"{name}.tsv"
        if not p.exists():
            raise InputError(f"missing prepared split {p}")
        return read_examples(p)

    def encode_split(self, examples: list[ParallelExample]) -> list[EncodedExample]:
        cfg = self.config
        items = [encode_parallel(ex, self.vocab, cfg.parse_mode, cfg.use_task_token) for ex in examples]
        if cfg.mode == "alternating":
            for kind, _ in cfg.task_mix():
                items += encode_kind(examples, kind, self.vocab)
        return items

    def checkpoint(self, name: str = "last.pt"):
        p = self.path / "checkpoints" / name
        if not p.exists():
            raise InputError(f"checkpoint not found: {p}")
        return load_checkpoint(p)[0]


def encode_kind(examples, kind: TaskKind, vocab: Vocabulary) -> list[EncodedExample]:
    if kind.needs_tree and any(ex.source_tree is None for ex in examples):
        raise InputError(f"task {kind.value} needs source trees")
    return [encode_task(linearize(ex, kind), vocab, "none", ex.source_tree) for ex in examples]


def training_stream(run: Run, train_examples: list[ParallelExample]):
    """The example stream for ``run.config.mode``; for alternating mode the
    ConstantScheduler itself is returned second so its counters can be read."""
    cfg = run.config
    if cfg.parse_mode == "dep" and any(ex.source_tree is None for ex in train_examples):
        raise InputError("depparse mode needs source trees for every training example")
    primary = [encode_parallel(ex, run.vocab, cfg.parse_mode, cfg.use_task_token) for ex in train_examples]
    if cfg.mode != "alternating":
        return epoch_stream(primary, cfg.seed), None
    mix = cfg.task_mix()
    secondary = None
    if mix:
        streams = [epoch_stream(encode_kind(train_examples, k, run.vocab), cfg.seed + i + 1)
                   for i, (k, _) in enumerate(mix)]
        weights = [w for _, w in mix]
        rng = random.Random(cfg.scheduler_seed + 1)

        def mixture():
            while True:
                yield next(rng.choices(streams, weights)[0])

        secondary = mixture()
    sched = ConstantScheduler(epoch_stream(primary, cfg.seed), secondary,
                              SchedulerConfig(cfg.scheduler_p, cfg.scheduler_seed))
    return sched, sched


def train_run(run: Run):
    cfg = run.config
    cfg.validate()
    stream, _ = training_stream(run, run.split("train"))
    dev = run.encode_split(run.split("dev"))
    (run.path / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    return train(cfg.model_config(), cfg.train_config(), run.vocab, stream, dev, run_dir=run.path)


def evaluate_run(run: Run, split: str = "test", examples: Optional[list[ParallelExample]] = None) -> dict:
    cfg = run.config
    model = run.checkpoint()
    examples = run.split(split) if examples is None else examples
    needs_tree = cfg.parse_mode == "dep" or any(k.needs_tree for k, _ in cfg.task_mix() if cfg.mode == "alternating")
    if needs_tree and any(ex.source_tree is None for ex in examples):
        raise InputError(f"{split}: parsing metrics need gold trees")
    items = run.encode_split(examples)
    tc = dataclasses.replace(cfg.train_config(), eval_max_sentences=len(examples))
    metrics = {"split": split, "sentences": len(examples), **evaluate_model(model, items, run.vocab, tc)}
    out = run.path / "reports" / f"eval_{split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    return metrics


def attn_hist_run(run: Run, split: str = "test", first_n: int = 100) -> list[dict]:
    """Per-layer histograms and per-head sharpness over the first sentences."""
    examples = run.split(split)
    if first_n > len(examples):
        logger.warning("first_n=%d exceeds %d %s sentences; clamping", first_n, len(examples), split)
        first_n = len(examples)
    if first_n < 1:
        raise InputError("first_n must be >= 1")
    model = run.checkpoint()
    items = [encode_parallel(ex, run.vocab, "none", run.config.use_task_token) for ex in examples[:first_n]]
    records = encoder_attention(model, items, run.vocab)
    rows = []
    for layer in range(model.config.num_layers):
        hist = attention_histogram(records, layer)
        rows.append({
            **json.loads(hist.to_json()),
            "sentences": first_n,
            "sharpness": [sharpness(records, layer, h) for h in range(model.config.num_heads)],
        })
    out = run.path / "reports" / "attn_hist.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return rows


def _read_sources(path) -> list[corpus.Sentence]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"input file not found: {p}")
    if p.suffix == ".conllu":
        return [s for s, _ in read_conllu(p)]
    return [corpus.Sentence.from_text(line) for line in p.read_text(encoding="utf-8").splitlines() if line.split()]


def translate_run(run: Run, input_path, task: Optional[str] = None) -> list[str]:
    model = run.checkpoint()
    kind = TaskKind.parse(task) if task else TaskKind.TRANSLATE
    use_token = run.config.use_task_token or kind is not TaskKind.TRANSLATE
    items = []
    for s in _read_sources(input_path):
        tokens = s.words + ((kind.token,) if use_token else ())
        items.append(EncodedExample(src=run.vocab.encode((corpus.ROOT,) + tokens), tgt=[], kind=kind, words=s.words))
    hyps = translate_items(model, items, run.vocab, run.config.decode_max_length)
    return [" ".join(h) for h in hyps]


def parse_run(run: Run, input_path, output_path) -> int:
    """Write a CoNLL-U file with predicted heads (labels ``_``)."""
    model = run.checkpoint()
    sents = _read_sources(input_path)
    items = [
        EncodedExample(
            src=run.vocab.encode((corpus.ROOT,) + s.words + ((TaskKind.TRANSLATE.token,) if run.config.use_task_token else ())),
            tgt=[], words=s.words,
        )
        for s in sents
    ]
    preds = predict_parses(model, items, run.vocab)
    write_conllu(output_path, ((s.words, p.heads, ["_"] * len(p)) for s, p in zip(sents, preds)))
    return len(sents)


def report_run(run_dir) -> dict:
    rep, series = report(run_dir)
    return {"report": rep.to_dict(), "series": sorted(series)}
