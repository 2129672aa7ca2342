"""Word-level cross attention between a context and a response.

All functions broadcast over leading batch dimensions; a single pair is just
the case with no leading dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .backbone import NEG_INF, masked_softmax, max_first, unit_rows, check_finite
from .encoder import EncodedSequence, mean_pool

POOLINGS = ("max", "mean", "weighted")


@dataclass
class AttentionPair:
    S: torch.Tensor
    a_x: torch.Tensor
    a_y: torch.Tensor


def _pair_mask(mx, my):
    return mx.unsqueeze(-1) & my.unsqueeze(-2)


def similarity_matrix(hx, mx, hy, my) -> torch.Tensor:
    """Cosine similarity between every context token and every response token.

    Entries involving a padded position hold ``-inf``.
    """
    S = unit_rows(hx) @ unit_rows(hy).transpose(-1, -2)
    return S.masked_fill(~_pair_mask(mx, my), NEG_INF)


def attention_weights(S, mx, my, pooling: str = "max") -> tuple[torch.Tensor, torch.Tensor]:
    """Token weights for both sides from the similarity matrix.

    With ``max`` pooling each context token takes its largest row-softmax entry
    (response tokens: largest column-softmax entry), and a final softmax over
    the real tokens of each side turns those scores into weights.
    """
    pm = _pair_mask(mx, my)
    if pooling == "max":
        row = masked_softmax(S, pm, dim=-1)
        col = masked_softmax(S, pm, dim=-2)
        sx = max_first(row, dim=-1)
        sy = max_first(col, dim=-2)
    elif pooling == "mean":
        Sz = S.masked_fill(~pm, 0.0)
        sx = Sz.sum(-1) / my.sum(-1, keepdim=True).clamp_min(1).to(S.dtype)
        sy = Sz.sum(-2) / mx.sum(-1, keepdim=True).clamp_min(1).to(S.dtype)
    elif pooling == "weighted":
        Sz = S.masked_fill(~pm, 0.0)
        sx = (masked_softmax(S, pm, dim=-1) * Sz).sum(-1)
        sy = (masked_softmax(S, pm, dim=-2) * Sz).sum(-2)
    else:
        raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    a_x = masked_softmax(sx, mx, dim=-1)
    a_y = masked_softmax(sy, my, dim=-1)
    return check_finite("attention weights", a_x), check_finite("attention weights", a_y)


def attend(hx, mx, hy, my, pooling: str = "max") -> AttentionPair:
    S = similarity_matrix(hx, mx, hy, my)
    a_x, a_y = attention_weights(S, mx, my, pooling)
    return AttentionPair(S, a_x, a_y)


def attended_feature(a, h) -> torch.Tensor:
    return (a.unsqueeze(-2) @ h).squeeze(-2)


def unattended_feature(a, h, mask) -> torch.Tensor:
    """Features weighted by ``1 - a`` over real tokens, without renormalizing."""
    w = (1.0 - a) * mask.to(a.dtype)
    return (w.unsqueeze(-2) @ h).squeeze(-2)


def score_pair(hx, mx, hy, my, pooling: str = "max") -> torch.Tensor:
    """Dot product of the two attended features for one context/response pair."""
    hx, mx, hy, my = (t.unsqueeze(0) for t in (hx, mx, hy, my))
    return score_grid(EncodedSequence(hx, mx), EncodedSequence(hy, my), pooling)[0][0, 0]


def score_grid(ctx: EncodedSequence, rsp: EncodedSequence, pooling: str = "max"):
    """Scores of every context against every response.

    Returns ``(scores, a_x, a_y, S)`` with scores ``(N, M)``, ``a_x`` of shape
    ``(N, M, Lx)``, ``a_y`` of shape ``(N, M, Ly)`` and ``S`` ``(N, M, Lx, Ly)``.
    """
    (N, Lx, d), (M, Ly, _) = ctx.features.shape, rsp.features.shape
    mx, my = ctx.mask.unsqueeze(1), rsp.mask.unsqueeze(0)
    # one (N*Lx, M*Ly) product instead of N*M small ones
    ux = unit_rows(ctx.features).reshape(N * Lx, d)
    uy = unit_rows(rsp.features).reshape(M * Ly, d)
    S = (ux @ uy.T).view(N, Lx, M, Ly).permute(0, 2, 1, 3)
    S = S.masked_fill(~_pair_mask(mx, my), NEG_INF)
    a_x, a_y = attention_weights(S, mx, my, pooling)
    fx = a_x @ ctx.features                                     # (N, M, d)
    fy = (a_y.transpose(0, 1) @ rsp.features).transpose(0, 1)   # (N, M, d)
    scores = (fx * fy).sum(-1)
    return check_finite("pair scores", scores), a_x, a_y, S


def score_batch(contexts: EncodedSequence, responses: EncodedSequence, pooling: str = "max") -> torch.Tensor:
    return score_grid(contexts, responses, pooling)[0]


def cosine_grid(ctx: EncodedSequence, rsp: EncodedSequence) -> torch.Tensor:
    """Plain dual-encoder scores: cosine of mean-pooled token features."""
    px = unit_rows(mean_pool(ctx.features, ctx.mask))
    py = unit_rows(mean_pool(rsp.features, rsp.mask))
    return px @ py.T
