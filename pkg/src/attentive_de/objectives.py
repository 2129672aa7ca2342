"""Retrieval loss, the critic and the leave-one-out mutual information bound."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import attend, attended_feature, unattended_feature, score_grid, cosine_grid
from .backbone import ParameterStore, xavier_uniform, check_finite
from .encoder import EncodedSequence

VARIANTS = ("DE", "ADE", "ADE+WE", "ADE+REG", "ADE+WE+REG")


@dataclass(frozen=True)
class Variant:
    name: str
    attention: bool
    residual: bool
    regularize: bool

    @classmethod
    def parse(cls, name: str) -> "Variant":
        key = name.strip().upper().replace(" ", "")
        if key not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}")
        parts = key.split("+")
        return cls(key, parts[0] == "ADE", "WE" in parts, "REG" in parts)


@dataclass
class LossBreakdown:
    l_ret_y: torch.Tensor
    l_ret_x: torch.Tensor
    l_ret: torch.Tensor
    l_reg: torch.Tensor
    total: torch.Tensor
    gamma: float
    beta: float
    scores: torch.Tensor | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_ret_y", "l_ret_x", "l_ret", "l_reg", "total")}


@dataclass
class CriticState:
    """Moving average of the bound's denominator, used to debias encoder gradients.

    The average is kept as a logarithm; critic logits can reach hundreds.
    """
    decay: float = 0.99
    log_ema: float | None = None

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError("EMA decay must lie in (0, 1)")

    def update(self, batch_log_mean: float) -> float:
        """Fold in the log of a batch mean; returns the log of the new average."""
        if self.log_ema is None:
            self.log_ema = batch_log_mean
        else:
            self.log_ema = float(np.logaddexp(math.log(self.decay) + self.log_ema,
                                              math.log1p(-self.decay) + batch_log_mean))
        return self.log_ema


def retrieval_loss(scores: torch.Tensor, gamma: float = 1.0):
    """Bidirectional in-batch softmax loss; matched pairs sit on the diagonal."""
    if gamma <= 0:
        raise ValueError(f"temperature must be positive, got {gamma}")
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1] or scores.shape[0] < 2:
        raise ValueError(f"retrieval loss needs a square score matrix with N >= 2, got {tuple(scores.shape)}")
    z = scores / gamma
    l_y = -torch.diagonal(torch.log_softmax(z, dim=1)).sum()
    l_x = -torch.diagonal(torch.log_softmax(z, dim=0)).sum()
    return l_y, l_x, l_y + l_x


def init_critic_params(store: ParameterStore, d: int, gen: torch.Generator, prefix: str = "critic.x") -> None:
    store.add(f"{prefix}.W", xavier_uniform(d, d, (d, d), gen, store.dtype))
    store.add(f"{prefix}.b", torch.zeros((), dtype=store.dtype))
    store.add(f"{prefix}.Q", torch.zeros((d, d), dtype=store.dtype))


def critic_logit_matrix(hbar: torch.Tensor, hy: torch.Tensor, W, b, Q) -> torch.Tensor:
    """``L[n, n'] = hbar[n'] @ W @ hy[n] + b - hbar[n'] @ Q @ hbar[n'] / 2``.

    The last term is the context-dependent log normalizer of a Gaussian
    conditional; it does not cancel between numerator and denominator.
    """
    quad = 0.5 * ((hbar @ Q) * hbar).sum(-1)
    return hy @ (hbar @ W).T + b - quad.unsqueeze(0)


def critic_logit(hbar_x: torch.Tensor, hy: torch.Tensor, W, b, Q=None) -> torch.Tensor:
    out = hbar_x @ W @ hy + b
    if Q is not None:
        out = out - 0.5 * hbar_x @ Q @ hbar_x
    return out


def _off_diagonal_logmeanexp(logits):
    K = logits.shape[0]
    eye = torch.eye(K, dtype=torch.bool)
    off = logits.masked_fill(eye, float("-inf"))
    return torch.logsumexp(off, dim=1) - math.log(K - 1)


def mi_upper_bound(logits: torch.Tensor, state: CriticState | None = None) -> torch.Tensor:
    """Leave-one-out bound ``mean_n [L_nn - log mean_{n' != n} exp L_nn']``.

    With ``state`` the returned value is unchanged but its gradient uses the
    moving-average denominator in place of each row's batch estimate.
    """
    K = logits.shape[0]
    if logits.ndim != 2 or logits.shape[1] != K or K < 2:
        raise ValueError(f"MI bound needs a square logit matrix with K >= 2, got {tuple(logits.shape)}")
    diag = torch.diagonal(logits)
    log_den = _off_diagonal_logmeanexp(logits)
    raw = (diag - log_den).mean()
    if state is None:
        return check_finite("mi bound", raw)
    batch_log_mean = float(torch.logsumexp(log_den.detach(), 0) - math.log(K))
    log_ema = state.update(batch_log_mean)
    surrogate = diag.mean() - torch.exp(log_den - log_ema).mean()
    return check_finite("mi bound", raw.detach() + (surrogate - surrogate.detach()))


def matched_attention(ctx: EncodedSequence, rsp: EncodedSequence, pooling: str = "max"):
    """Attention weights of each context with its own response (the batch diagonal)."""
    pair = attend(ctx.features, ctx.mask, rsp.features, rsp.mask, pooling)
    return pair.a_x, pair.a_y


def _critic_input(a, seq: EncodedSequence) -> torch.Tensor:
    # the unattended sum grows with length; dividing by the token count keeps
    # critic logits O(1) so Adam steps on the critic cannot blow them up
    n = seq.mask.sum(-1, keepdim=True).to(seq.features.dtype)
    return unattended_feature(a, seq.features, seq.mask) / n


def regularizer(ctx: EncodedSequence, rsp: EncodedSequence, store: ParameterStore, state: CriticState | None,
                pooling: str = "max", symmetric: bool = False, a=None) -> torch.Tensor:
    a_x, a_y = a if a is not None else matched_attention(ctx, rsp, pooling)
    hbar_x = _critic_input(a_x, ctx)
    f_y = attended_feature(a_y, rsp.features)
    logits = critic_logit_matrix(hbar_x, f_y, *(store[f"critic.x.{k}"] for k in "WbQ"))
    l_reg = mi_upper_bound(logits, state)
    if symmetric:
        hbar_y = _critic_input(a_y, rsp)
        f_x = attended_feature(a_x, ctx.features)
        logits_y = critic_logit_matrix(hbar_y, f_x, *(store[f"critic.y.{k}"] for k in "WbQ"))
        l_reg = l_reg + mi_upper_bound(logits_y, None)
    return l_reg


def total_objective(ctx: EncodedSequence, rsp: EncodedSequence, store: ParameterStore, variant: Variant,
                    gamma: float = 1.0, beta: float = 1.0, state: CriticState | None = None,
                    pooling: str = "max", symmetric: bool = False) -> LossBreakdown:
    """Retrieval loss plus ``beta`` times the MI bound on unattended context features."""
    if len(ctx) < 2:
        raise ValueError("the in-batch objective needs at least 2 pairs")
    zero = torch.zeros((), dtype=ctx.features.dtype)
    if not variant.attention:
        scores = cosine_grid(ctx, rsp)
        l_y, l_x, l_ret = retrieval_loss(scores, gamma)
        return LossBreakdown(l_y, l_x, l_ret, zero, l_ret, gamma, beta, scores)
    scores, a_x, a_y, _ = score_grid(ctx, rsp, pooling)
    l_y, l_x, l_ret = retrieval_loss(scores, gamma)
    if variant.regularize:
        idx = torch.arange(len(ctx))
        l_reg = regularizer(ctx, rsp, store, state, pooling, symmetric, a=(a_x[idx, idx], a_y[idx, idx]))
    else:
        l_reg = zero
    total = l_ret + beta * l_reg if beta else l_ret
    return LossBreakdown(l_y, l_x, l_ret, l_reg, total, gamma, beta, scores)
