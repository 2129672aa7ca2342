"""Candidate ranking, Recall@k, frequency priors and the TF-IDF baseline."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer

from .corpus import CandidateList, Dialogue, sample_distractors, tokenize

PROTOCOLS = ("fixed", "distractor19")
N_DISTRACTORS = 19


class Scorer(Protocol):
    def score_candidates(self, context: Sequence[str], candidates: Sequence[str]) -> np.ndarray: ...


class EvaluationError(ValueError):
    pass


@dataclass
class RankingResult:
    rank: int
    order: np.ndarray
    scores: np.ndarray


def rank_scores(scores, truth: int, log_prior=None) -> RankingResult:
    """Sort candidates by score (descending), ties broken by candidate index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or not len(scores):
        raise EvaluationError("need a non-empty 1-d score vector")
    if log_prior is not None:
        scores = scores + log_prior
    order = np.lexsort((np.arange(len(scores)), -scores))
    rank = int(np.nonzero(order == truth)[0][0]) + 1
    return RankingResult(rank, order, scores[order])


def rank_candidates(context, candidates: CandidateList, model: Scorer, truth: int,
                    use_prior: bool = False) -> RankingResult:
    scores = model.score_candidates(context, candidates.texts)
    prior = np.log(candidates.freq) if use_prior else None
    return rank_scores(scores, truth, prior)


def recall_at_k(results: Sequence[RankingResult] | Sequence[int], k: int) -> float:
    if k < 1:
        raise EvaluationError("k must be >= 1")
    if not len(results):
        raise EvaluationError("no ranking results")
    ranks = np.array([r.rank if isinstance(r, RankingResult) else r for r in results])
    return float(np.mean(ranks <= k))


class TfidfScorer:
    """Cosine similarity of TF-IDF bags of words; IDF is fit on training responses."""

    def __init__(self, responses: Sequence[str]):
        self.vectorizer = TfidfVectorizer(tokenizer=tokenize, lowercase=False, token_pattern=None,
                                          smooth_idf=True, sublinear_tf=False, norm="l2")
        self.vectorizer.fit(list(responses))

    def score(self, a: str, b: str) -> float:
        return float(self.score_candidates([a], [b])[0])

    def score_candidates(self, context, candidates) -> np.ndarray:
        text = " ".join(context) if not isinstance(context, str) else context
        q = self.vectorizer.transform([text])
        c = self.vectorizer.transform(list(candidates))
        return np.asarray((c @ q.T).toarray()).ravel()


def tfidf_score(context: str, candidate: str, stats: TfidfScorer) -> float:
    return stats.score(context, candidate)


class RandomScorer:
    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)

    def score_candidates(self, context, candidates) -> np.ndarray:
        return self.rng.random(len(candidates))


def _uniq(texts):
    return list(dict.fromkeys(texts))


def evaluate(dialogues: Sequence[Dialogue], model: Scorer, protocol: str = "distractor19",
             ks: Sequence[int] = (1,), candidates: CandidateList | None = None, use_prior: bool = False,
             seed: int = 0) -> dict:
    """Recall@k under the fixed-list or 19-distractor protocol.

    Fixed-list evaluation skips dialogues whose response is not a candidate.
    Under the distractor protocol the prior is each candidate's relative
    frequency in the evaluated responses.
    """
    if protocol not in PROTOCOLS:
        raise EvaluationError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    ranks = []
    if protocol == "fixed":
        if candidates is None:
            raise EvaluationError("fixed-list protocol needs a candidate list")
        pos = {t: i for i, t in enumerate(candidates.texts)}
        for d in dialogues:
            if d.response in pos:
                ranks.append(rank_candidates(d.context, candidates, model, pos[d.response], use_prior).rank)
    else:
        rng = np.random.default_rng(seed)
        counts = Counter(d.response for d in dialogues)
        pool = _uniq(d.response for d in dialogues)
        for d in dialogues:
            texts = [d.response] + sample_distractors(pool, d.response, N_DISTRACTORS, rng)
            # shuffled so index tie-breaking does not favour the ground truth
            perm = rng.permutation(len(texts))
            texts = [texts[i] for i in perm]
            f = np.array([counts[t] for t in texts], dtype=np.float64)
            cl = CandidateList(texts, f / f.sum())
            truth = int(np.nonzero(perm == 0)[0][0])
            ranks.append(rank_candidates(d.context, cl, model, truth, use_prior).rank)
    if not ranks:
        raise EvaluationError("no evaluable instances: no ground-truth response is in the candidate list")
    return {"recall_at": {str(k): recall_at_k(ranks, k) for k in ks}, "instances": len(ranks),
            "protocol": protocol}


def format_metrics(metrics: dict) -> str:
    lines = [f"protocol: {metrics['protocol']}", f"instances: {metrics['instances']}"]
    lines += [f"recall@{k}: {v:.4f}" for k, v in metrics["recall_at"].items()]
    return "\n".join(lines)


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, indent=2)
