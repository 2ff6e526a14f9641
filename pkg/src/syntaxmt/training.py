"""Training loop, batching, checkpoints and model-side evaluation."""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import torch

from .corpus import ROOT, DepTree, ParallelExample, Vocabulary
from .evaluation import corpus_bleu, exact_match
from .model import ModelConfig, Transformer, greedy_decode, joint_loss, mt_loss, parse_loss
from .parse import IGNORE, corpus_uas, decode_parse
from .tasks import TaskExample, TaskKind, label_accuracy, linearize, reconstruct_tree, split_heads_labels

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "syntaxmt-checkpoint-v1"


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: Optional[Path]):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 2e-3
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    clip_norm: float = 1.0
    log_every: int = 50
    eval_every: int = 500
    eval_max_sentences: int = 500
    decode_max_length: int = 40
    checkpoint_every: int = 0
    seed: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class EncodedExample:
    src: list[int]
    tgt: list[int]
    kind: TaskKind = TaskKind.TRANSLATE
    heads: Optional[list[int]] = None
    words: tuple[str, ...] = ()
    tree: Optional[DepTree] = None
    target_tokens: tuple[str, ...] = ()


def parse_heads(parse_mode: str, n: int, src_len: int, tree: Optional[DepTree]) -> Optional[list[int]]:
    """Gold head column per ROOT-prefixed source position (IGNORE for ROOT
    and anything after the words)."""
    if parse_mode == "none":
        return None
    if parse_mode == "diagonal":
        body = list(range(n))
    else:
        if tree is None:
            raise ValueError("parse_mode 'dep' needs source trees")
        body = list(tree.heads)
    return [IGNORE] + body + [IGNORE] * (src_len - n - 1)


def encode_parallel(
    example: ParallelExample, vocab: Vocabulary, parse_mode: str = "none", use_task_token: bool = False
) -> EncodedExample:
    task = linearize(example, TaskKind.TRANSLATE, use_task_token)
    return encode_task(task, vocab, parse_mode, example.source_tree)


def encode_task(
    task: TaskExample, vocab: Vocabulary, parse_mode: str = "none", tree: Optional[DepTree] = None
) -> EncodedExample:
    words = task.raw_source
    src = vocab.encode((ROOT,) + task.source)
    return EncodedExample(
        src=src,
        tgt=vocab.encode(task.target),
        kind=task.kind,
        heads=parse_heads(parse_mode, len(words), len(src), tree),
        words=words,
        tree=tree,
        target_tokens=task.target,
    )


@dataclass
class Batch:
    src: torch.Tensor
    tgt_in: torch.Tensor
    tgt_out: torch.Tensor
    heads: Optional[torch.Tensor]


def collate(items: Sequence[EncodedExample], pad_id: int, eos_id: int, with_target: bool = True) -> Batch:
    b = len(items)
    s = max(len(x.src) for x in items)
    src = torch.full((b, s), pad_id, dtype=torch.long)
    for i, x in enumerate(items):
        src[i, : len(x.src)] = torch.tensor(x.src)
    heads = None
    if all(x.heads is not None for x in items):
        heads = torch.full((b, s), IGNORE, dtype=torch.long)
        for i, x in enumerate(items):
            heads[i, : len(x.heads)] = torch.tensor(x.heads)
    t = max(len(x.tgt) for x in items) + 1 if with_target else 1
    tgt_in = torch.full((b, t), pad_id, dtype=torch.long)
    tgt_out = torch.full((b, t), pad_id, dtype=torch.long)
    if with_target:
        for i, x in enumerate(items):
            tgt_in[i, : len(x.tgt) + 1] = torch.tensor([eos_id] + x.tgt)
            tgt_out[i, : len(x.tgt) + 1] = torch.tensor(x.tgt + [eos_id])
    return Batch(src, tgt_in, tgt_out, heads)


def epoch_stream(items: Sequence, seed: int) -> Iterator:
    """Endless reshuffled passes over ``items``."""
    if not items:
        raise ValueError("empty training set")
    rng = random.Random(seed)
    order = list(range(len(items)))
    while True:
        rng.shuffle(order)
        for i in order:
            yield items[i]


def inverse_sqrt_schedule(warmup: int):
    warmup = max(1, warmup)

    def factor(step: int) -> float:
        step = step + 1
        return min(step / warmup, math.sqrt(warmup / step))

    return factor


def build_model(config: ModelConfig, vocab_size: int, pad_id: int = 0) -> Transformer:
    torch.manual_seed(config.seed)
    return Transformer(config, vocab_size, pad_id)


def save_checkpoint(path, model: Transformer, step: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "vocab_size": model.vocab_size,
        "pad_id": model.pad_id,
        "step": step,
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[Transformer, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint of this package")
    model = Transformer(ModelConfig.from_dict(payload["config"]), payload["vocab_size"], payload["pad_id"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


@dataclass
class TrainResult:
    model: Transformer
    history: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    examples_by_task: dict[str, int] = field(default_factory=dict)
    last_checkpoint: Optional[Path] = None


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab: Vocabulary,
    stream: Iterable[EncodedExample],
    dev: Sequence[EncodedExample] = (),
    run_dir=None,
    model: Optional[Transformer] = None,
) -> TrainResult:
    """Train on ``stream`` for ``train_config.steps`` batches.

    With a run directory, metrics go to ``metrics.jsonl`` (one JSON object
    per line) and checkpoints to ``checkpoints/``. ``result.history`` holds
    every step's losses as Python floats.
    """
    model_config.validate()
    if model is None:
        model = build_model(model_config, len(vocab), vocab.pad_id)
    torch.manual_seed(train_config.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "metrics.jsonl", "w", encoding="utf-8")

    opt = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=(train_config.adam_beta1, train_config.adam_beta2),
        eps=1e-9,
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, inverse_sqrt_schedule(train_config.warmup_steps))
    parse_on = model_config.parse_mode != "none"
    weight = model_config.parse_loss_weight
    result = TrainResult(model)
    counts: dict[str, int] = {}
    it = iter(stream)
    start = time.perf_counter()
    window: list[dict] = []

    def emit(rec):
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log_file.flush()

    def checkpoint(step):
        if run_dir is None:
            return
        extra = {"examples_by_task": dict(counts), "train_config": asdict(train_config)}
        save_checkpoint(run_dir / "checkpoints" / f"step_{step:07d}.pt", model, step, extra)
        result.last_checkpoint = save_checkpoint(run_dir / "checkpoints" / "last.pt", model, step, extra)

    try:
        model.train()
        for step in range(1, train_config.steps + 1):
            items = [next(it) for _ in range(train_config.batch_size)]
            for x in items:
                counts[x.kind.value] = counts.get(x.kind.value, 0) + 1
            batch = collate(items, vocab.pad_id, vocab.eos_id)
            out = model(batch.src, batch.tgt_in)
            mt = mt_loss(out.logits, batch.tgt_out, vocab.pad_id)
            ploss = None
            if parse_on and batch.heads is not None:
                if weight == 0:
                    with torch.no_grad():
                        ploss = parse_loss(out.attention, batch.heads, model_config)
                else:
                    ploss = parse_loss(out.attention, batch.heads, model_config)
            loss = joint_loss(mt, ploss, weight)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, result.last_checkpoint)
            opt.zero_grad()
            loss.backward()
            if train_config.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.clip_norm)
            opt.step()
            sched.step()

            rec = {"step": step, "loss": loss.item(), "mt_loss": mt.item()}
            if ploss is not None:
                rec["parse_loss"] = ploss.item()
            result.history.append(rec)
            window.append(rec)
            if train_config.log_every and step % train_config.log_every == 0:
                line = {"type": "train", "step": step, "examples_by_task": dict(counts),
                        "lr": sched.get_last_lr()[0], "wall_time": time.perf_counter() - start}
                for key in window[-1]:
                    if key != "step":
                        line[key] = sum(r[key] for r in window) / len(window)
                emit(line)
                window = []
            if train_config.eval_every and (step % train_config.eval_every == 0 or step == train_config.steps):
                metrics = {}
                if dev:
                    metrics = evaluate_model(model, dev, vocab, train_config)
                    model.train()
                ev = {"type": "eval", "step": step, "examples_by_task": dict(counts),
                      "wall_time": time.perf_counter() - start, **metrics}
                result.evals.append(ev)
                emit(ev)
                logger.info("step %d %s", step, {k: v for k, v in metrics.items()})
                checkpoint(step)
            elif train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
                checkpoint(step)
    finally:
        if log_file is not None:
            log_file.close()
    result.examples_by_task = counts
    model.eval()
    return result


def batched(seq: Sequence, size: int):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


@torch.no_grad()
def encoder_attention(model: Transformer, items: Sequence[EncodedExample], vocab: Vocabulary, batch_size: int = 128):
    """Per-sentence attention records (padding removed), in input order."""
    model.eval()
    records = []
    for chunk in batched(items, batch_size):
        batch = collate(chunk, vocab.pad_id, vocab.eos_id, with_target=False)
        _, _, rec = model.encode(batch.src)
        records.extend(rec.split())
    return records


@torch.no_grad()
def translate_items(model: Transformer, items: Sequence[EncodedExample], vocab: Vocabulary,
                    max_length: int = 40, batch_size: int = 128) -> list[list[str]]:
    out = []
    for chunk in batched(items, batch_size):
        batch = collate(chunk, vocab.pad_id, vocab.eos_id, with_target=False)
        for ids in greedy_decode(model, batch.src, vocab.eos_id, max_length):
            out.append(vocab.decode(ids))
    return out


@torch.no_grad()
def predict_parses(model: Transformer, items: Sequence[EncodedExample], vocab: Vocabulary,
                   layer: Optional[int] = None, head: Optional[int] = None):
    cfg = model.config
    layer = cfg.parse_layer if layer is None else layer
    head = cfg.parse_head if head is None else head
    records = encoder_attention(model, items, vocab)
    return [decode_parse(r.weights[layer][0, head], len(x.words)) for r, x in zip(records, items)]


def evaluate_model(model: Transformer, items: Sequence[EncodedExample], vocab: Vocabulary,
                   train_config: Optional[TrainConfig] = None) -> dict:
    """Translation and parsing metrics on encoded dev/test items, at most
    ``eval_max_sentences`` per task kind.

    BLEU is computed over Translate items; each task kind present gets an
    exact-match rate. Parse metrics follow ``model.config.parse_mode`` and
    DepHeads-style outputs are scored by UAS / label accuracy.
    """
    tc = train_config or TrainConfig()
    kept, seen = [], {}
    for x in items:
        seen[x.kind] = seen.get(x.kind, 0) + 1
        if seen[x.kind] <= tc.eval_max_sentences:
            kept.append(x)
    items = kept
    metrics: dict = {}
    hyps = translate_items(model, items, vocab, tc.decode_max_length)
    by_kind: dict[TaskKind, list[int]] = {}
    for i, x in enumerate(items):
        by_kind.setdefault(x.kind, []).append(i)
    for kind, idx in by_kind.items():
        h = [hyps[i] for i in idx]
        r = [list(items[i].target_tokens) for i in idx]
        metrics[f"exact_match.{kind.value}"] = exact_match(h, r)
        if kind is TaskKind.TRANSLATE:
            metrics["bleu"] = corpus_bleu(h, r)
        elif kind in (TaskKind.DEP_HEADS, TaskKind.DEP_HEADS_LABELS):
            golds, preds = [], []
            for i, out in zip(idx, h):
                heads_out = split_heads_labels(out)[0] if kind is TaskKind.DEP_HEADS_LABELS else out
                golds.append(items[i].tree)
                preds.append(reconstruct_tree(items[i].words, heads_out))
            metrics[f"uas.{kind.value}"] = corpus_uas(golds, preds)
        if kind in (TaskKind.DEP_LABELS, TaskKind.DEP_HEADS_LABELS):
            accs = []
            for i, out in zip(idx, h):
                labels = split_heads_labels(out)[1] if kind is TaskKind.DEP_HEADS_LABELS else out
                accs.append((label_accuracy(items[i].tree, labels), len(items[i].words)))
            metrics[f"label_accuracy.{kind.value}"] = sum(a * n for a, n in accs) / sum(n for _, n in accs)

    mode = model.config.parse_mode
    if mode != "none":
        parse_items = [x for x in items if x.kind is TaskKind.TRANSLATE]
        preds = predict_parses(model, parse_items, vocab)
        if mode == "dep":
            metrics["uas"] = corpus_uas([x.tree for x in parse_items], preds)
        else:
            metrics["diagonal_precision"] = corpus_uas([tuple(range(len(x.words))) for x in parse_items], preds)
    return metrics
