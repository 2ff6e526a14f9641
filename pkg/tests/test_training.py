import json
import math

import pytest
import torch

import syntaxmt.training as training
from syntaxmt.corpus import SyntheticGrammarConfig, build_vocab, example_tokens, generate_synthetic
from syntaxmt.model import ModelConfig
from syntaxmt.parse import IGNORE
from syntaxmt.tasks import ConstantScheduler, SchedulerConfig, TaskKind, linearize
from syntaxmt.training import (
    TrainConfig,
    TrainingDiverged,
    collate,
    encode_parallel,
    encode_task,
    epoch_stream,
    evaluate_model,
    load_checkpoint,
    train,
    translate_items,
)

SMALL = dict(num_layers=2, num_heads=2, model_dim=16, ff_dim=32, max_sequence_length=32)


@pytest.fixture(scope="module")
def data():
    cfg = SyntheticGrammarConfig(seed=11, vocab_size=20, num_openers=3, num_closers=3, max_length=8)
    examples = generate_synthetic(cfg, 300)
    vocab = build_vocab(example_tokens(examples), 200)
    return examples, vocab


def test_encode_parallel_parse_heads(data):
    examples, vocab = data
    ex = examples[0]
    n = len(ex.source.words)
    dep = encode_parallel(ex, vocab, "dep")
    assert dep.src[0] == vocab.root_id and len(dep.src) == n + 1
    assert dep.heads == [IGNORE] + list(ex.source_tree.heads)
    diag = encode_parallel(ex, vocab, "diagonal", use_task_token=True)
    assert len(diag.src) == n + 2 and diag.src[-1] == vocab.stoi["#Translate"]
    assert diag.heads == [IGNORE] + list(range(n)) + [IGNORE]
    assert encode_parallel(ex, vocab).heads is None


def test_collate_shapes(data):
    examples, vocab = data
    items = [encode_parallel(x, vocab, "dep") for x in examples[:4]]
    b = collate(items, vocab.pad_id, vocab.eos_id)
    assert b.src.shape[0] == 4 and b.heads.shape == b.src.shape
    assert torch.all(b.tgt_in[:, 0] == vocab.eos_id)
    for i, x in enumerate(items):
        assert b.tgt_out[i, len(x.tgt)] == vocab.eos_id


def run(data, mode, weight=1.0, steps=30, dropout=0.1, seed=3, run_dir=None, **tc):
    examples, vocab = data
    mc = ModelConfig(**SMALL, dropout=dropout, parse_mode=mode, parse_loss_weight=weight, seed=seed)
    items = [encode_parallel(x, vocab, mode) for x in examples]
    cfg = TrainConfig(**{"steps": steps, "batch_size": 16, "eval_every": 0, "log_every": 10, "seed": seed, **tc})
    return train(mc, cfg, vocab, epoch_stream(items, seed), items[:20], run_dir=run_dir)


def test_zero_weight_matches_baseline(data):
    base = run(data, "none")
    zero = run(data, "dep", weight=0.0)
    assert [r["loss"] for r in base.history] == [r["loss"] for r in zero.history]
    for p, q in zip(base.model.parameters(), zero.model.parameters()):
        assert torch.equal(p, q)
    assert "parse_loss" in zero.history[0]


def test_parse_weight_changes_training(data):
    base = run(data, "none", steps=10)
    dep = run(data, "dep", weight=1.0, steps=10)
    assert [r["mt_loss"] for r in base.history][1:] != [r["mt_loss"] for r in dep.history][1:]


def test_checkpoint_round_trip(tmp_path, data):
    examples, vocab = data
    res = run(data, "dep", steps=6, run_dir=tmp_path, eval_every=3)
    model, payload = load_checkpoint(tmp_path / "checkpoints" / "last.pt")
    assert payload["step"] == 6 and payload["config"]["parse_mode"] == "dep"
    b = collate([encode_parallel(x, vocab) for x in examples[:5]], vocab.pad_id, vocab.eos_id)
    res.model.eval()
    assert torch.equal(model(b.src, b.tgt_in).logits, res.model(b.src, b.tgt_in).logits)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    evals = [x for x in lines if x["type"] == "eval"]
    assert [x["step"] for x in evals] == [3, 6]
    assert "uas" in evals[-1] and "bleu" in evals[-1]
    assert (tmp_path / "checkpoints" / "step_0000003.pt").exists()


def test_divergence_keeps_last_good_checkpoint(tmp_path, data, monkeypatch):
    real = training.mt_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        loss = real(*args, **kwargs)
        return loss * math.nan if calls["n"] == 5 else loss

    monkeypatch.setattr(training, "mt_loss", flaky)
    with pytest.raises(TrainingDiverged) as info:
        run(data, "none", steps=10, run_dir=tmp_path, eval_every=2)
    assert info.value.step == 5
    model, payload = load_checkpoint(info.value.last_checkpoint)
    assert payload["step"] == 4
    assert all(torch.isfinite(p).all() for p in model.parameters())


def test_alternating_counts_both_streams(data):
    examples, vocab = data
    primary = [encode_parallel(x, vocab) for x in examples]
    secondary = [encode_task(linearize(x, TaskKind.COPY_SRC), vocab) for x in examples]
    sched = ConstantScheduler(epoch_stream(primary, 0), epoch_stream(secondary, 1), SchedulerConfig(0.5, 2))
    mc = ModelConfig(**SMALL, dropout=0.0)
    res = train(mc, TrainConfig(steps=20, batch_size=16, eval_every=0), vocab, sched)
    counts = res.examples_by_task
    assert counts["Translate"] == sched.counts["primary"]
    assert counts["CopySrc"] == sched.counts["secondary"]
    assert counts["Translate"] + counts["CopySrc"] == 320
    assert 0.35 < counts["CopySrc"] / 320 < 0.65


def test_copy_model_learns_to_copy(data):
    examples, vocab = data
    items = [encode_task(linearize(x, TaskKind.COPY_SRC), vocab) for x in examples]
    mc = ModelConfig(num_layers=1, num_heads=2, model_dim=32, ff_dim=64, max_sequence_length=32, dropout=0.0)
    res = train(mc, TrainConfig(steps=400, batch_size=32, eval_every=0, learning_rate=3e-3, warmup_steps=50),
                vocab, epoch_stream(items, 0))
    hyps = translate_items(res.model, items[:50], vocab)
    exact = sum(h == list(x.words) for h, x in zip(hyps, items[:50])) / 50
    assert exact >= 0.9
    metrics = evaluate_model(res.model, items[:50], vocab)
    assert metrics["exact_match.CopySrc"] == exact


def test_evaluate_model_tree_tasks(data):
    examples, vocab = data
    items = [encode_task(linearize(x, k), vocab, tree=x.source_tree)
             for x in examples[:10] for k in (TaskKind.DEP_HEADS, TaskKind.DEP_HEADS_LABELS, TaskKind.DEP_LABELS)]
    model = training.build_model(ModelConfig(**SMALL, dropout=0.0), len(vocab))
    m = evaluate_model(model, items, vocab)
    for key in ("uas.DepHeads", "uas.DHeadsLab", "label_accuracy.DepLabels", "label_accuracy.DHeadsLab"):
        assert 0.0 <= m[key] <= 1.0
