"""Alternating min-max training, run configs and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import backbone
from .attention import cosine_grid, score_grid, attend
from .backbone import ParameterStore, adam_step, clip_grad_norm, evaluate_with_gradients
from .corpus import (Batch, Dialogue, TokenSequence, Vocabulary, build_vocabulary, encode_context, encode_text,
                     make_batch, sample_batch, train_validation_split, response_counts)
from .encoder import EncoderConfig, EncodedSequence, encode_tokens, init_encoder_params, SIDES
from .objectives import CriticState, LossBreakdown, Variant, init_critic_params, regularizer, total_objective

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    variant: str = "ADE+WE+REG"
    data: str = ""
    batch_size: int = 64
    lr: float = 1e-4
    gamma: float = 1.0
    beta: float = 1.0
    alpha: float = 0.5
    steps: int = 1000
    critic_steps: int = 1
    critic_lr: float = 1e-4
    seed: int = 0
    eval_every: int = 0
    checkpoint: str = ""
    layers: int = 3
    d_model: int = 128
    heads: int = 4
    word_dim: int = 100
    ffn_dim: int = 512
    max_len: int = 32
    dropout: float = 0.1
    min_count: int = 1
    ema_decay: float = 0.99
    grad_clip: float = 5.0
    pooling: str = "max"
    symmetric_reg: bool = False
    val_fraction: float = 0.1
    top_l: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        Variant.parse(self.variant)
        if self.steps < 1:
            raise ValueError("steps >= 1 required")
        if self.batch_size < 2:
            raise ValueError("batch_size >= 2 required")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.critic_steps < 0 or self.eval_every < 0:
            raise ValueError("critic_steps and eval_every must be non-negative")
        self.encoder_config()

    @property
    def parsed_variant(self) -> Variant:
        return Variant.parse(self.variant)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.layers, self.d_model, self.heads, self.word_dim, self.ffn_dim,
                             self.max_len, self.alpha, self.dropout)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise KeyError(f"unknown config key {k!r}")
        return cls(**d)


def _coerce(name: str, ftype, raw: str):
    ftype = ftype if isinstance(ftype, str) else ftype.__name__
    try:
        if ftype == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {raw!r} as {ftype}") from None


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# -- model bundle --------------------------------------------------------------

@dataclass
class TrainedModel:
    """Parameters plus everything needed to encode text and score candidates."""
    store: ParameterStore
    vocab: Vocabulary
    config: TrainConfig
    critic: CriticState = field(default_factory=CriticState)
    response_freq: dict[str, int] = field(default_factory=dict)

    @property
    def variant(self) -> Variant:
        return self.config.parsed_variant

    @property
    def encoder(self) -> EncoderConfig:
        return self.config.encoder_config()

    def token_tensors(self, seqs: Sequence[TokenSequence]):
        ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
        mask = torch.tensor([s.mask for s in seqs], dtype=torch.bool)
        return ids, mask

    def encode(self, seqs: Sequence[TokenSequence], side: str, gen=None) -> EncodedSequence:
        ids, mask = self.token_tensors(seqs)
        return encode_tokens(ids, mask, self.store, side, self.encoder, self.variant.residual, gen)

    def encode_contexts(self, contexts: Sequence[Sequence[str]]) -> EncodedSequence:
        L = self.config.max_len
        with torch.no_grad():
            return self.encode([encode_context(c, self.vocab, L) for c in contexts], "ctx")

    def encode_responses(self, texts: Sequence[str]) -> EncodedSequence:
        L = self.config.max_len
        with torch.no_grad():
            return self.encode([encode_text(t, self.vocab, L) for t in texts], "rsp")

    def score_encoded(self, ctx: EncodedSequence, rsp: EncodedSequence) -> torch.Tensor:
        with torch.no_grad():
            if self.variant.attention:
                return score_grid(ctx, rsp, self.config.pooling)[0]
            return cosine_grid(ctx, rsp)

    def score_matrix(self, contexts, responses, chunk: int = 256) -> np.ndarray:
        rsp = self.encode_responses(responses)
        rows = []
        for s in range(0, len(contexts), chunk):
            ctx = self.encode_contexts(contexts[s:s + chunk])
            rows.append(self.score_encoded(ctx, rsp).double().numpy())
        return np.concatenate(rows, axis=0)

    def score_candidates(self, context, candidates) -> np.ndarray:
        return self.score_matrix([tuple(context)], list(candidates))[0]

    def attention(self, context, response):
        """Token weights for one pair: ``(a_x, a_y)`` over real tokens only."""
        L = self.config.max_len
        cs, rs = encode_context(context, self.vocab, L), encode_text(response, self.vocab, L)
        with torch.no_grad():
            ctx, rsp = self.encode([cs], "ctx"), self.encode([rs], "rsp")
            pair = attend(ctx.features[0], ctx.mask[0], rsp.features[0], rsp.mask[0], self.config.pooling)
        return pair.a_x[: cs.length].double().numpy(), pair.a_y[: rs.length].double().numpy(), cs, rs

    def tokens(self, seq: TokenSequence) -> list[str]:
        return [self.vocab.itos[i] for i in seq.ids[: seq.length]]

    # checkpoint: tensor container at `path`, metadata next to it at `path.meta.json`
    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        backbone.save_store(self.store, path)
        meta = {"config": self.config.to_dict(), "vocab": self.vocab.itos, "min_count": self.vocab.min_count,
                "critic_log_ema": self.critic.log_ema, "response_freq": self.response_freq}
        meta_path(path).write_text(json.dumps(meta), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "TrainedModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        store = load_checkpoint(path, dtype)
        mp = meta_path(path)
        if not mp.exists():
            raise FileNotFoundError(f"checkpoint metadata not found: {mp}")
        meta = json.loads(mp.read_text(encoding="utf-8"))
        vocab = Vocabulary(meta["vocab"][3:], min_count=meta.get("min_count", 1))
        cfg = TrainConfig.from_dict(meta["config"])
        rows = store["emb.table"].shape[0]
        if rows != len(vocab):
            raise VocabularyMismatch(f"checkpoint embedding has {rows} rows but vocabulary has {len(vocab)} entries")
        critic = CriticState(cfg.ema_decay, meta.get("critic_log_ema"))
        return cls(store, vocab, cfg, critic, meta.get("response_freq", {}))


class VocabularyMismatch(ValueError):
    pass


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save_checkpoint(store: ParameterStore, path) -> None:
    backbone.save_store(store, path)


def load_checkpoint(path, dtype=torch.float32) -> ParameterStore:
    return backbone.load_store(path, dtype)


def init_model(vocab: Vocabulary, cfg: TrainConfig) -> TrainedModel:
    gen = torch.Generator().manual_seed(cfg.seed)
    store = ParameterStore(DTYPES[cfg.dtype])
    init_encoder_params(store, len(vocab), cfg.encoder_config(), gen)
    init_critic_params(store, cfg.d_model, gen, "critic.x")
    init_critic_params(store, cfg.d_model, gen, "critic.y")
    return TrainedModel(store, vocab, cfg, CriticState(cfg.ema_decay))


def encoder_names(store: ParameterStore, variant: Variant) -> list[str]:
    names = store.names(("emb.",) + tuple(f"{s}." for s in SIDES))
    if not variant.residual:
        names = [n for n in names if ".residual." not in n]
    return names


def critic_names(store: ParameterStore, symmetric: bool = False) -> list[str]:
    return store.names(("critic.x.", "critic.y.") if symmetric else ("critic.x.",))


# -- training ------------------------------------------------------------------------

def train_step(batch: Batch, model: TrainedModel, gen: torch.Generator | None = None) -> LossBreakdown:
    """One critic ascent phase followed by one encoder descent step."""
    cfg, store, variant = model.config, model.store, model.variant
    ctx = model.encode(batch.contexts, "ctx", gen)
    rsp = model.encode(batch.responses, "rsp", gen)
    if variant.regularize and cfg.critic_steps:
        frozen_c = EncodedSequence(ctx.features.detach(), ctx.mask)
        frozen_r = EncodedSequence(rsp.features.detach(), rsp.mask)
        names = critic_names(store, cfg.symmetric_reg)
        for _ in range(cfg.critic_steps):
            evaluate_with_gradients(
                lambda s: regularizer(frozen_c, frozen_r, s, None, cfg.pooling, cfg.symmetric_reg), store, names)
            clip_grad_norm(store, names, cfg.grad_clip)
            adam_step(store, cfg.critic_lr, names=names, maximize=True)

    names = encoder_names(store, variant)
    out: list[LossBreakdown] = []

    def objective(s):
        out.append(total_objective(ctx, rsp, s, variant, cfg.gamma, cfg.beta, model.critic,
                                   cfg.pooling, cfg.symmetric_reg))
        return out[-1].total

    evaluate_with_gradients(objective, store, names)
    clip_grad_norm(store, names, cfg.grad_clip)
    adam_step(store, cfg.lr, names=names)
    return out[-1]


@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def to_dict(self):
        return {"history": self.history, "validation": [list(v) for v in self.validation],
                "wall_clock": self.wall_clock, "checkpoint": self.checkpoint}


def in_batch_recall(model: TrainedModel, dialogues: Sequence[Dialogue], batch_size: int) -> float:
    """Recall@1 of each context against the responses of its own chunk."""
    hits = total = 0
    for s in range(0, len(dialogues), batch_size):
        chunk = dialogues[s:s + batch_size]
        if len(chunk) < 2:
            continue
        scores = model.score_matrix([d.context for d in chunk], [d.response for d in chunk])
        hits += int((scores.argmax(axis=1) == np.arange(len(chunk))).sum())
        total += len(chunk)
    return hits / total if total else float("nan")


def train(cfg: TrainConfig, dialogues: Sequence[Dialogue], vocab: Vocabulary | None = None,
          progress: bool = False) -> tuple[TrainReport, TrainedModel]:
    if cfg.steps < 1:
        raise ValueError("steps >= 1 required")
    t0 = time.perf_counter()
    dialogues = list(dialogues)
    tr_idx, va_idx = train_validation_split(len(dialogues), cfg.val_fraction, cfg.seed)
    train_set = [dialogues[i] for i in tr_idx]
    val_set = [dialogues[i] for i in va_idx]
    if len(train_set) < cfg.batch_size:
        raise ValueError(f"training split has {len(train_set)} pairs, fewer than batch_size={cfg.batch_size}")
    vocab = vocab or build_vocabulary(train_set, cfg.min_count)
    model = init_model(vocab, cfg)
    model.response_freq = dict(Counter(response_counts(train_set)).most_common(cfg.top_l))
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1) if cfg.dropout > 0 else None
    report = TrainReport()
    for step in range(1, cfg.steps + 1):
        idx = sample_batch(train_set, cfg.batch_size, rng)
        batch = make_batch(train_set, idx, vocab, cfg.max_len)
        report.history.append(train_step(batch, model, gen).to_dict())
        if progress and step % 50 == 0:
            log.info("step %d loss %.4f", step, report.history[-1]["total"])
        if cfg.eval_every and step % cfg.eval_every == 0:
            if len(val_set) >= 2:
                r1 = in_batch_recall(model, val_set, cfg.batch_size)
                report.validation.append((step, r1))
                log.info("step %d validation recall@1 %.4f", step, r1)
            if cfg.checkpoint:
                model.save(cfg.checkpoint)
    if cfg.checkpoint:
        report.checkpoint = str(model.save(cfg.checkpoint))
    report.wall_clock = time.perf_counter() - t0
    return report, model
