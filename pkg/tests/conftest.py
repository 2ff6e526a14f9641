import math

import pytest
import torch

from syntaxmt.corpus import ROOT, SyntheticGrammarConfig, build_vocab, example_tokens, generate_synthetic
from syntaxmt.model import ModelConfig, Transformer, joint_loss, mt_loss, parse_loss
from syntaxmt.training import build_model, collate, encode_parallel

TINY = dict(num_layers=2, num_heads=2, model_dim=8, ff_dim=16, max_sequence_length=16, dropout=0.0)


def tiny_batch(parse_mode="dep", n=3, seed=0):
    cfg = SyntheticGrammarConfig(vocab_size=14, num_openers=2, num_closers=2, min_length=3, max_length=6, seed=seed)
    data = generate_synthetic(cfg, n)
    vocab = build_vocab(example_tokens(data), 100)
    items = [encode_parallel(x, vocab, parse_mode) for x in data]
    return vocab, collate(items, vocab.pad_id, vocab.eos_id)


def tiny_model(parse_mode="dep", weight=1.0, vocab_size=40, dtype=torch.float64, **overrides):
    cfg = ModelConfig(**{**TINY, "parse_mode": parse_mode, "parse_loss_weight": weight, **overrides})
    return build_model(cfg, vocab_size).to(dtype)


def total_loss(model, batch):
    out = model(batch.src, batch.tgt_in)
    mt = mt_loss(out.logits, batch.tgt_out, model.pad_id)
    cfg = model.config
    p = parse_loss(out.attention, batch.heads, cfg) if cfg.parse_mode != "none" else None
    return joint_loss(mt, p, cfg.parse_loss_weight)


def finite_difference_check(model, batch, h=1e-6):
    """Central differences for every scalar parameter; returns the worst
    per-tensor relative error ||analytic - numeric|| / ||numeric||."""
    model.zero_grad()
    total_loss(model, batch).backward()
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone()
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = total_loss(model, batch).item()
                flat[i] = orig - h
                down = total_loss(model, batch).item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * h)
            denom = numeric.norm().item()
            err = (analytic - numeric).norm().item()
            rel = err / denom if denom > 1e-8 else err
            worst = max(worst, rel)
    return worst


@pytest.fixture
def tiny():
    return tiny_model, tiny_batch


# --- acceptance summary -----------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _criteria[n] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, detail = _criteria[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
