"""Corpus BLEU, encoder attention histograms and run reports."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUM_BINS = 10


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses: Sequence, references: Sequence) -> dict:
    """Corpus totals: hypothesis/reference lengths and clipped n-gram
    matches and totals for n = 1..4."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _tokens(hyp), _tokens(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum((h & r).values())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return {"hyp_len": hyp_len, "ref_len": ref_len, "matches": matches, "totals": totals}


def corpus_bleu(hypotheses: Sequence, references: Sequence) -> float:
    """Unsmoothed 4-gram corpus BLEU on pre-tokenized text, in [0, 100]."""
    s = bleu_stats(hypotheses, references)
    if s["hyp_len"] == 0 or any(m == 0 for m in s["matches"]):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(s["matches"], s["totals"])) / 4
    c, r = s["hyp_len"], s["ref_len"]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(log_prec)


def exact_match(hypotheses: Sequence, references: Sequence) -> float:
    if len(hypotheses) != len(references):
        raise ValueError("length mismatch")
    if not hypotheses:
        return 0.0
    return sum(_tokens(h) == _tokens(r) for h, r in zip(hypotheses, references)) / len(hypotheses)


# --- attention analysis ---------------------------------------------------


@dataclass
class HistogramReport:
    layer: int
    counts: list[int]
    cells: int
    excluded_bins: tuple[int, ...] = (0,)

    @property
    def edges(self) -> list[float]:
        return [round(i / NUM_BINS, 1) for i in range(NUM_BINS + 1)]

    def display(self) -> dict[str, int]:
        """Bins as "[lo,hi)" -> count, without the excluded low bin."""
        e = self.edges
        out = {}
        for i, c in enumerate(self.counts):
            if i in self.excluded_bins:
                continue
            close = "]" if i == NUM_BINS - 1 else ")"
            out[f"[{e[i]:.1f},{e[i + 1]:.1f}{close}"] = c
        return out

    def to_json(self) -> str:
        return json.dumps(
            {"layer": self.layer, "counts": self.counts, "cells": self.cells, "display": self.display()},
            sort_keys=True,
        )


def _unmasked(records, layer: int, head: Optional[int] = None):
    """Yield (n, n) numpy matrices of one layer: every head, or one head."""
    for rec in records:
        w = rec.weights[layer].detach().cpu().double().numpy()
        for b, n in enumerate(rec.lengths.tolist()):
            heads = range(w.shape[1]) if head is None else (head,)
            for h in heads:
                yield w[b, h, :n, :n]


def attention_histogram(records: Sequence, layer: int) -> HistogramReport:
    """Histogram of attention weights over all heads of one encoder layer.

    Bins have width 0.1; a weight of exactly 1.0 lands in the top bin.
    """
    if not records:
        raise ValueError("no attention records")
    counts = np.zeros(NUM_BINS, dtype=np.int64)
    cells = 0
    for m in _unmasked(records, layer):
        idx = np.minimum(np.floor(m * NUM_BINS).astype(np.int64), NUM_BINS - 1)
        counts += np.bincount(idx.ravel(), minlength=NUM_BINS)
        cells += m.size
    return HistogramReport(layer, [int(c) for c in counts], int(cells))


def sharpness(records: Sequence, layer: int, head: int) -> float:
    """Mean over unmasked attention rows of the largest row weight."""
    row_max = [m.max(axis=1) for m in _unmasked(records, layer, head)]
    if not row_max:
        raise ValueError("no attention rows")
    return float(np.concatenate(row_max).mean())


# --- run reports ----------------------------------------------------------


@dataclass
class MetricsReport:
    bleu: Optional[float] = None
    uas: Optional[float] = None
    diagonal_precision: Optional[float] = None
    label_accuracy: Optional[float] = None
    exact_match: dict[str, float] = field(default_factory=dict)
    loss_curves: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def read_metrics_log(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metrics log not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict) or "step" not in rec:
                raise ValueError("not a metrics record")
        except ValueError as exc:
            logger.warning("%s:%d: skipping corrupt record (%s)", path, lineno, exc)
            continue
        records.append(rec)
    return records


def _write_series(path: Path, rows: Iterable[tuple[int, float]], key: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([key, "value"])
        w.writerows(rows)


def report(run_dir, out_dir=None) -> tuple[MetricsReport, dict[str, list[tuple[int, float]]]]:
    """Consolidate ``metrics.jsonl`` of a run and write plot-ready CSVs.

    Every numeric field of the eval (and train) records becomes a series
    keyed by step, and a second one keyed by the number of translation
    examples consumed so far.
    """
    run_dir = Path(run_dir)
    records = read_metrics_log(run_dir / "metrics.jsonl")
    if not records:
        raise ValueError(f"metrics log of {run_dir} has no records")
    out_dir = Path(out_dir) if out_dir else run_dir / "reports" / "series"
    out_dir.mkdir(parents=True, exist_ok=True)

    series: dict[str, list[tuple[int, float]]] = {}
    for rec in records:
        prefix = rec.get("type", "eval")
        consumed = rec.get("examples_by_task", {})
        for key, value in sorted(rec.items()):
            if key in ("step", "type", "wall_time") or isinstance(value, bool):
                continue
            if isinstance(value, dict) and key == "examples_by_task":
                for task, count in sorted(value.items()):
                    series.setdefault(f"{prefix}.examples.{task}", []).append((rec["step"], count))
                continue
            if isinstance(value, (int, float)) and math.isfinite(value):
                name = f"{prefix}.{key}"
                series.setdefault(name, []).append((rec["step"], value))
                if "Translate" in consumed:
                    series.setdefault(name + "@mt_examples", []).append((consumed["Translate"], value))

    for name, rows in series.items():
        by = "mt_examples" if name.endswith("@mt_examples") else "step"
        _write_series(out_dir / f"{name.replace('@', '_by_')}.csv", rows, by)

    evals = [r for r in records if r.get("type", "eval") == "eval"]
    last = evals[-1] if evals else {}
    rep = MetricsReport(
        bleu=last.get("bleu"),
        uas=last.get("uas"),
        diagonal_precision=last.get("diagonal_precision"),
        label_accuracy=last.get("label_accuracy"),
        exact_match={k[len("exact_match."):]: v for k, v in last.items() if k.startswith("exact_match.")},
        loss_curves={
            k.split(".", 1)[1]: v for k, v in series.items()
            if k.startswith("train.") and "loss" in k and "@" not in k
        },
    )
    (out_dir.parent / "report.json").write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=1) + "\n")
    return rep, series
