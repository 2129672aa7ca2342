"""scikit-learn style wrappers around the trainer and the baselines."""
from __future__ import annotations

from dataclasses import fields
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .corpus import Dialogue
from .evaluation import RandomScorer, TfidfScorer
from .trainer import TrainConfig, TrainedModel, in_batch_recall, train
from .visualize import HeatmapDocument


def _as_context(c) -> tuple[str, ...]:
    if isinstance(c, str):
        return (c,)
    c = tuple(c)
    if not c or not all(isinstance(m, str) for m in c):
        raise ValueError("a context must be a string or a non-empty sequence of strings")
    return c


def check_dialogues(X, y=None) -> list[Dialogue]:
    """Accept Dialogue objects, or contexts ``X`` paired with responses ``y``."""
    if y is None:
        if not all(isinstance(d, Dialogue) for d in X):
            raise TypeError("pass a list of Dialogue objects, or contexts X with responses y")
        out = list(X)
    else:
        if len(X) != len(y):
            raise ValueError(f"X and y have different lengths ({len(X)} != {len(y)})")
        out = [Dialogue(_as_context(c), str(r)) for c, r in zip(X, y)]
    if not out:
        raise ValueError("no dialogues given")
    return out


def check_contexts(contexts) -> list[tuple[str, ...]]:
    if isinstance(contexts, str):
        raise TypeError("pass a sequence of contexts, not a single string")
    return [_as_context(c) for c in contexts]


class _RetrieverMixin:
    def decision_function(self, contexts, candidates) -> np.ndarray:
        contexts = check_contexts(contexts)
        return np.stack([self.score_candidates(c, list(candidates)) for c in contexts])

    def predict(self, contexts, candidates) -> np.ndarray:
        """Index of the best candidate for each context (lowest index on ties)."""
        return np.argmax(self.decision_function(contexts, candidates), axis=1)


_CONFIG_KEYS = [f.name for f in fields(TrainConfig) if f.name not in ("data", "checkpoint")]


class AttentiveDualEncoder(_RetrieverMixin, BaseEstimator):
    """Dual encoder with word-level cross attention, trained with in-batch negatives.

    ``variant`` selects the ablation: ``DE`` (cosine of mean-pooled features),
    ``ADE`` (attention), ``+WE`` (residual word embeddings) and ``+REG``
    (mutual-information penalty on unattended context words).
    """

    def __init__(self, variant="ADE+WE+REG", batch_size=64, lr=1e-4, gamma=1.0, beta=1.0, alpha=0.5,
                 steps=1000, critic_steps=1, critic_lr=1e-4, seed=0, eval_every=0, layers=3, d_model=128,
                 heads=4, word_dim=100, ffn_dim=512, max_len=32, dropout=0.1, min_count=1, ema_decay=0.99,
                 grad_clip=5.0, pooling="max", symmetric_reg=False, val_fraction=0.1, top_l=1000,
                 dtype="float32"):
        self.variant = variant
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.beta = beta
        self.alpha = alpha
        self.steps = steps
        self.critic_steps = critic_steps
        self.critic_lr = critic_lr
        self.seed = seed
        self.eval_every = eval_every
        self.layers = layers
        self.d_model = d_model
        self.heads = heads
        self.word_dim = word_dim
        self.ffn_dim = ffn_dim
        self.max_len = max_len
        self.dropout = dropout
        self.min_count = min_count
        self.ema_decay = ema_decay
        self.grad_clip = grad_clip
        self.pooling = pooling
        self.symmetric_reg = symmetric_reg
        self.val_fraction = val_fraction
        self.top_l = top_l
        self.dtype = dtype

    def to_config(self, **extra) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _CONFIG_KEYS}, **extra)

    def fit(self, X, y=None, checkpoint: str = ""):
        dialogues = check_dialogues(X, y)
        self.report_, self.model_ = train(self.to_config(checkpoint=checkpoint), dialogues)
        self.vocabulary_ = self.model_.vocab
        return self

    @classmethod
    def from_model(cls, model: TrainedModel) -> "AttentiveDualEncoder":
        est = cls(**{k: getattr(model.config, k) for k in _CONFIG_KEYS})
        est.model_ = model
        est.vocabulary_ = model.vocab
        return est

    @classmethod
    def load(cls, path) -> "AttentiveDualEncoder":
        return cls.from_model(TrainedModel.load(path))

    def save(self, path):
        check_is_fitted(self, "model_")
        return self.model_.save(path)

    def score_candidates(self, context, candidates) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.score_candidates(_as_context(context), list(candidates))

    def decision_function(self, contexts, candidates) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.score_matrix(check_contexts(contexts), list(candidates))

    def transform(self, contexts) -> np.ndarray:
        """Mean-pooled context features, shape ``(n_contexts, d_model)``."""
        check_is_fitted(self, "model_")
        enc = self.model_.encode_contexts(check_contexts(contexts))
        m = enc.mask.unsqueeze(-1).to(enc.features.dtype)
        return ((enc.features * m).sum(1) / m.sum(1)).double().numpy()

    def attention(self, context, response) -> HeatmapDocument:
        check_is_fitted(self, "model_")
        a_x, a_y, cs, rs = self.model_.attention(_as_context(context), response)
        score = float(self.score_candidates(context, [response])[0])
        return HeatmapDocument.from_attention(self.model_.tokens(cs), a_x, self.model_.tokens(rs), a_y,
                                              self.variant, score)

    def score(self, X, y=None) -> float:
        """In-batch Recall@1 over consecutive chunks of ``batch_size`` pairs."""
        check_is_fitted(self, "model_")
        return in_batch_recall(self.model_, check_dialogues(X, y), self.batch_size)


class TfidfRetriever(_RetrieverMixin, BaseEstimator):
    """IR baseline: TF-IDF cosine between the context and each candidate."""

    def fit(self, X, y=None):
        dialogues = check_dialogues(X, y)
        self.scorer_ = TfidfScorer([d.response for d in dialogues])
        return self

    def score_candidates(self, context, candidates) -> np.ndarray:
        check_is_fitted(self, "scorer_")
        return self.scorer_.score_candidates(_as_context(context), list(candidates))


class RandomRetriever(_RetrieverMixin, BaseEstimator):
    def __init__(self, seed=0):
        self.seed = seed

    def fit(self, X=None, y=None):
        self.scorer_ = RandomScorer(self.seed)
        return self

    def score_candidates(self, context, candidates: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "scorer_")
        return self.scorer_.score_candidates(context, candidates)
