"""Attention heatmaps rendered as HTML spans or ANSI-shaded terminal text."""
from __future__ import annotations

import html
import json
from dataclasses import dataclass, field, asdict

import numpy as np

ANSI_LEVELS = 8
# 256-colour greyscale ramp, light to dark
_ANSI_BG = [255, 252, 249, 246, 243, 240, 237, 234]


def normalize_weights(w) -> list[float]:
    w = np.asarray(w, dtype=np.float64)
    top = w.max() if w.size else 0.0
    return (w / top).tolist() if top > 0 else w.tolist()


@dataclass
class HeatmapDocument:
    context_tokens: list[str]
    context_weights: list[float]
    response_tokens: list[str]
    response_weights: list[float]
    variant: str
    score: float | None = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_attention(cls, ctx_tokens, a_x, rsp_tokens, a_y, variant, score=None):
        if len(ctx_tokens) != len(a_x) or len(rsp_tokens) != len(a_y):
            raise ValueError("one weight per token required")
        raw = {"context": [float(v) for v in a_x], "response": [float(v) for v in a_y]}
        return cls(list(ctx_tokens), normalize_weights(a_x), list(rsp_tokens), normalize_weights(a_y),
                   variant, score, raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_html(self) -> str:
        def row(label, tokens, weights):
            spans = "".join(
                f'<span class="tok" style="background-color: rgba(200, 30, 30, {w:.4f})">{html.escape(t)}</span> '
                for t, w in zip(tokens, weights))
            return f'<div class="row"><b>{label}</b> {spans}</div>'

        score = "" if self.score is None else f"<p>score: {self.score:.4f}</p>"
        return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>attention</title></head><body>"
                f"<p>variant: {html.escape(self.variant)}</p>{score}"
                f"{row('context', self.context_tokens, self.context_weights)}"
                f"{row('response', self.response_tokens, self.response_weights)}"
                "</body></html>\n")

    def to_ansi(self) -> str:
        def row(label, tokens, weights):
            parts = []
            for t, w in zip(tokens, weights):
                level = ansi_level(w)
                fg = 231 if level >= ANSI_LEVELS // 2 else 16
                parts.append(f"\x1b[48;5;{_ANSI_BG[level]}m\x1b[38;5;{fg}m{t}\x1b[0m")
            return f"{label}: " + " ".join(parts)

        return "\n".join([row("context", self.context_tokens, self.context_weights),
                          row("response", self.response_tokens, self.response_weights)]) + "\n"


def ansi_level(weight: float) -> int:
    return min(ANSI_LEVELS - 1, int(weight * ANSI_LEVELS))
