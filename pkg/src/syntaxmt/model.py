"""A small encoder-decoder Transformer whose encoder attention maps are
exposed, so that one head can be trained as a dependency head matrix."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

PARSE_MODES = ("none", "dep", "diagonal")


@dataclass
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 128
    ff_dim: int = 512
    max_sequence_length: int = 64
    dropout: float = 0.1
    parse_mode: str = "none"
    parse_layer: int = 1
    parse_head: int = 0
    parse_loss_weight: float = 1.0
    seed: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.parse_mode not in PARSE_MODES:
            raise ValueError(f"parse_mode must be one of {PARSE_MODES}")
        if self.parse_mode != "none":
            if not 0 <= self.parse_layer < self.num_layers:
                raise ValueError(f"parse_layer must lie in [0, {self.num_layers - 1}]")
            if not 0 <= self.parse_head < self.num_heads:
                raise ValueError(f"parse_head must lie in [0, {self.num_heads - 1}]")
            if self.parse_loss_weight < 0:
                raise ValueError("parse_loss_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class AttentionRecord:
    """Encoder self-attention per layer.

    ``weights[l]`` and ``log_weights[l]`` have shape (batch, heads, query,
    key); ``lengths`` holds the unpadded source length of each batch row.
    """

    weights: list[torch.Tensor]
    log_weights: list[torch.Tensor]
    lengths: torch.Tensor

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def matrix(self, layer: int, head: int, index: int = 0) -> torch.Tensor:
        """Unpadded (n, n) attention matrix of one sentence."""
        n = int(self.lengths[index])
        return self.weights[layer][index, head, :n, :n]

    def split(self) -> list["AttentionRecord"]:
        """One record per sentence, padding cut off, detached on CPU."""
        out = []
        for b, n in enumerate(self.lengths.tolist()):
            w = [x[b : b + 1, :, :n, :n].detach().cpu() for x in self.weights]
            lw = [x[b : b + 1, :, :n, :n].detach().cpu() for x in self.log_weights]
            out.append(AttentionRecord(w, lw, torch.tensor([n])))
        return out


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    attention: AttentionRecord


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    inv = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv[: dim // 2])
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, mask):
        """``mask`` is boolean, broadcastable to (B, H, Q, K); True = visible."""
        b, lq, d = query.shape
        lk = key.shape[1]
        q = self.q(query).view(b, lq, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(key).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(key).view(b, lk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask, float("-inf"))
        log_w = torch.log_softmax(scores, dim=-1)
        w = log_w.exp()
        out = (self.dropout(w) @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out), w, log_w


class FeedForward(nn.Module):
    def __init__(self, dim: int, ff_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, ff_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ff_dim, dim)
        )

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, cfg.dropout)
        self.ff = FeedForward(cfg.model_dim, cfg.ff_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        h, w, log_w = self.attn(h, h, mask)
        x = x + self.drop(h)
        x = x + self.drop(self.ff(self.norm2(x)))
        return x, w, log_w


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, cfg.dropout)
        self.ff = FeedForward(cfg.model_dim, cfg.ff_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.norm3 = nn.LayerNorm(cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_mask, cross_mask):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, self_mask)[0])
        y = y + self.drop(self.cross_attn(self.norm2(y), memory, cross_mask)[0])
        y = y + self.drop(self.ff(self.norm3(y)))
        return y


class Transformer(nn.Module):
    """Pre-norm encoder-decoder with one embedding matrix shared by the
    encoder, the decoder and the output projection."""

    def __init__(self, config: ModelConfig, vocab_size: int, pad_id: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab_size = vocab_size
        self.pad_id = pad_id
        d = config.model_dim
        self.embed = nn.Embedding(vocab_size, d, padding_idx=pad_id)
        nn.init.normal_(self.embed.weight, std=d**-0.5)
        with torch.no_grad():
            self.embed.weight[pad_id].zero_()
        self.register_buffer(
            "positions", sinusoidal_positions(config.max_sequence_length, d), persistent=False
        )
        self.encoder = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.decoder = nn.ModuleList(DecoderLayer(config) for _ in range(config.num_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.drop = nn.Dropout(config.dropout)

    def _embed(self, ids):
        if ids.shape[1] > self.config.max_sequence_length:
            raise ValueError(
                f"sequence length {ids.shape[1]} exceeds max_sequence_length {self.config.max_sequence_length}"
            )
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise ValueError("token id out of vocabulary range")
        x = self.embed(ids) * math.sqrt(self.config.model_dim)
        return self.drop(x + self.positions[: ids.shape[1]].to(x.dtype))

    def encode(self, src):
        """Return (memory, source key mask, AttentionRecord)."""
        keep = src != self.pad_id
        mask = keep[:, None, None, :]
        x = self._embed(src)
        weights, log_weights = [], []
        for layer in self.encoder:
            x, w, lw = layer(x, mask)
            weights.append(w)
            log_weights.append(lw)
        record = AttentionRecord(weights, log_weights, keep.sum(dim=1))
        return self.enc_norm(x), mask, record

    def decode(self, tgt_in, memory, src_mask):
        n = tgt_in.shape[1]
        causal = torch.ones(n, n, dtype=torch.bool, device=tgt_in.device).tril()
        self_mask = causal[None, None] & (tgt_in != self.pad_id)[:, None, None, :]
        y = self._embed(tgt_in)
        for layer in self.decoder:
            y = layer(y, memory, self_mask, src_mask)
        return self.dec_norm(y) @ self.embed.weight.t()

    def forward(self, src, tgt_in) -> ForwardOutput:
        memory, src_mask, record = self.encode(src)
        return ForwardOutput(self.decode(tgt_in, memory, src_mask), record)


def forward(model: Transformer, src, tgt_in) -> ForwardOutput:
    return model(src, tgt_in)


def mt_loss(logits, gold, pad_id: int = 0):
    """Mean token cross-entropy over non-pad gold positions."""
    if logits.shape[:-1] != gold.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match gold {tuple(gold.shape)}")
    count = int((gold != pad_id).sum())
    if count == 0:
        raise ValueError("gold target consists of padding only")
    total = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), gold.reshape(-1), ignore_index=pad_id, reduction="sum"
    )
    return total / count


def parse_loss(attention: AttentionRecord, target, config: ModelConfig):
    """Mean negative log attention weight on the gold head.

    ``target`` is a (batch, source length) tensor of gold head columns with
    -1 on rows excluded from the loss (ROOT, padding, task tokens).
    """
    if config.parse_mode == "none":
        raise ValueError("parse_loss needs parse_mode dep or diagonal")
    log_w = attention.log_weights[config.parse_layer][:, config.parse_head]
    target = torch.as_tensor(target, device=log_w.device)
    if target.shape != log_w.shape[:2]:
        raise ValueError(f"target shape {tuple(target.shape)} != {tuple(log_w.shape[:2])}")
    rows = target >= 0
    if not bool(rows.any()):
        raise ValueError("parse target has no included rows")
    lengths = attention.lengths.to(target.device)
    if bool((target >= lengths[:, None]).any()):
        raise ValueError("gold head column is masked or out of range")
    picked = log_w.gather(-1, target.clamp_min(0).unsqueeze(-1)).squeeze(-1)
    return -(picked[rows]).sum() / rows.sum()


def joint_loss(mt, parse, weight: float):
    if weight < 0:
        raise ValueError("loss weight must be >= 0")
    if weight == 0 or parse is None:
        return mt
    return mt + weight * parse


@torch.no_grad()
def greedy_decode(model: Transformer, src, eos_id: int, max_length: Optional[int] = None) -> list[list[int]]:
    """Argmax decoding; decoding starts from EOS and stops at the next EOS."""
    was_training = model.training
    model.eval()
    limit = min(max_length or model.config.max_sequence_length - 1, model.config.max_sequence_length - 1)
    memory, src_mask, _ = model.encode(src)
    b = src.shape[0]
    ys = torch.full((b, 1), eos_id, dtype=torch.long, device=src.device)
    done = torch.zeros(b, dtype=torch.bool, device=src.device)
    for _ in range(limit):
        logits = model.decode(ys, memory, src_mask)[:, -1]
        nxt = logits.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, model.pad_id), nxt)
        ys = torch.cat([ys, nxt[:, None]], dim=1)
        done |= nxt == eos_id
        if bool(done.all()):
            break
    model.train(was_training)
    out = []
    for row in ys[:, 1:].tolist():
        seq = []
        for t in row:
            if t == eos_id or t == model.pad_id:
                break
            seq.append(t)
        out.append(seq)
    return out
