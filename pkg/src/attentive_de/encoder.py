"""Shared embedding, transformer encoders and the residual word-embedding mix."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch

from .backbone import ParameterStore, xavier_uniform, check_finite

SIDES = ("ctx", "rsp")
LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    layers: int = 3
    d_model: int = 128
    heads: int = 4
    word_dim: int = 100
    ffn_dim: int = 512
    max_len: int = 32
    alpha: float = 0.5
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if min(self.layers, self.word_dim, self.ffn_dim, self.max_len) < 1:
            raise ValueError("layers, word_dim, ffn_dim and max_len must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class EncodedSequence:
    """Per-token features ``(B, L, d)`` plus mask ``(B, L)`` and raw embeddings."""
    features: torch.Tensor
    mask: torch.Tensor
    raw: torch.Tensor | None = None

    def __len__(self):
        return self.features.shape[0]

    def select(self, idx) -> "EncodedSequence":
        raw = None if self.raw is None else self.raw[idx]
        return EncodedSequence(self.features[idx], self.mask[idx], raw)


def init_encoder_params(store: ParameterStore, vocab_size: int, cfg: EncoderConfig, gen: torch.Generator) -> None:
    """Add the embedding table and both encoders (with residual maps) to ``store``."""
    dt = store.dtype
    d, dw, f = cfg.d_model, cfg.word_dim, cfg.ffn_dim

    def mat(name, fi, fo):
        store.add(name, xavier_uniform(fi, fo, (fi, fo), gen, dt))

    def vec(name, n, fill=0.0):
        store.add(name, torch.full((n,), fill, dtype=dt))

    store.add("emb.table", xavier_uniform(vocab_size, dw, (vocab_size, dw), gen, dt))
    for side in SIDES:
        mat(f"{side}.proj.W", dw, d)
        vec(f"{side}.proj.b", d)
        for k in range(cfg.layers):
            p = f"{side}.layer{k}"
            for w in ("q", "k", "v", "o"):
                mat(f"{p}.attn.W{w}", d, d)
                vec(f"{p}.attn.b{w}", d)
            vec(f"{p}.ln1.g", d, 1.0)
            vec(f"{p}.ln1.b", d)
            mat(f"{p}.ffn.W1", d, f)
            vec(f"{p}.ffn.b1", f)
            mat(f"{p}.ffn.W2", f, d)
            vec(f"{p}.ffn.b2", d)
            vec(f"{p}.ln2.g", d, 1.0)
            vec(f"{p}.ln2.b", d)
        mat(f"{side}.residual.W", dw, d)
        vec(f"{side}.residual.b", d)


def embed(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise IndexError(f"token id out of range for a vocabulary of {table.shape[0]}")
    return table[ids]


def positional_encoding(length: int, d: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype)[:, None]
    i = torch.arange(0, d, 2, dtype=dtype)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), i / d)
    pe = torch.zeros(length, d, dtype=dtype)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + LN_EPS) * g + b


def _dropout(x, rate, gen):
    if gen is None or rate <= 0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate).to(x.dtype)
    return x * keep / (1 - rate)


def self_attention(x, mask, store, p, heads):
    B, L, d = x.shape
    dh = d // heads

    def split(t):
        return t.view(B, L, heads, dh).transpose(1, 2)

    q = split(x @ store[f"{p}.Wq"] + store[f"{p}.bq"])
    k = split(x @ store[f"{p}.Wk"] + store[f"{p}.bk"])
    v = split(x @ store[f"{p}.Wv"] + store[f"{p}.bv"])
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    logits = logits.masked_fill(~mask[:, None, None, :], float("-inf"))
    w = torch.softmax(logits, dim=-1)
    out = (w @ v).transpose(1, 2).reshape(B, L, d)
    return out @ store[f"{p}.Wo"] + store[f"{p}.bo"]


def encode(e: torch.Tensor, mask: torch.Tensor, store: ParameterStore, side: str, cfg: EncoderConfig,
           gen: torch.Generator | None = None) -> torch.Tensor:
    """Project word embeddings to the model width and run the transformer stack.

    ``gen`` enables dropout; pass None at evaluation time.
    """
    B, L, _ = e.shape
    x = e @ store[f"{side}.proj.W"] + store[f"{side}.proj.b"]
    # sqrt(d) keeps token content on the same scale as the positional signal
    x = x * math.sqrt(cfg.d_model) + positional_encoding(L, cfg.d_model, x.dtype)
    x = _dropout(x, cfg.dropout, gen)
    for k in range(cfg.layers):
        p = f"{side}.layer{k}"
        a = self_attention(x, mask, store, f"{p}.attn", cfg.heads)
        x = layer_norm(x + _dropout(a, cfg.dropout, gen), store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
        hdn = torch.relu(x @ store[f"{p}.ffn.W1"] + store[f"{p}.ffn.b1"])
        hdn = hdn @ store[f"{p}.ffn.W2"] + store[f"{p}.ffn.b2"]
        x = layer_norm(x + _dropout(hdn, cfg.dropout, gen), store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])
    return check_finite(f"{side} encoder", x)


def residual_combine(h: torch.Tensor, e: torch.Tensor, alpha: float, store: ParameterStore, side: str) -> torch.Tensor:
    """``alpha * h + (1 - alpha) * F(e)`` with F a single dense layer on raw embeddings."""
    r = e @ store[f"{side}.residual.W"] + store[f"{side}.residual.b"]
    return alpha * h + (1 - alpha) * r


def mean_pool(h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    counts = mask.sum(-1)
    if bool((counts == 0).any()):
        raise ValueError("mean_pool over a fully masked sequence")
    m = mask.to(h.dtype).unsqueeze(-1)
    return (h * m).sum(-2) / counts.to(h.dtype).unsqueeze(-1)


def encode_tokens(ids: torch.Tensor, mask: torch.Tensor, store: ParameterStore, side: str, cfg: EncoderConfig,
                  residual: bool, gen: torch.Generator | None = None) -> EncodedSequence:
    """Full per-side pipeline: lookup, transformer, optional residual mix."""
    e = embed(ids, store["emb.table"])
    h = encode(e, mask, store, side, cfg, gen)
    if residual:
        h = residual_combine(h, e, cfg.alpha, store, side)
    return EncodedSequence(h, mask, e)
