"""Dialogue ingestion, tokenization, vocabulary and batching."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, SEP = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<sep>")
MAX_TURNS = 5

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Dialogue:
    context: tuple[str, ...]
    response: str

    def __post_init__(self):
        context = tuple(self.context)
        if not context:
            raise CorpusError("dialogue context is empty")
        if any(not m.strip() for m in context) or not self.response.strip():
            raise CorpusError("dialogue contains an empty message")
        object.__setattr__(self, "context", context[-MAX_TURNS:])


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask: tuple[bool, ...]

    @property
    def length(self) -> int:
        return sum(self.mask)


@dataclass(frozen=True)
class Batch:
    contexts: list[TokenSequence]
    responses: list[TokenSequence]
    indices: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.contexts)


@dataclass(frozen=True)
class CandidateList:
    texts: list[str]
    freq: np.ndarray
    responses: list[TokenSequence] | None = None

    def __post_init__(self):
        if len(self.texts) < 2:
            raise CorpusError("a candidate list needs at least 2 responses")
        if len(self.freq) != len(self.texts) or np.any(self.freq <= 0):
            raise CorpusError("candidate frequencies must be positive, one per response")

    def __len__(self):
        return len(self.texts)

    def index(self, text: str) -> int:
        return self.texts.index(text)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and break punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token to id map with PAD/UNK/SEP reserved at ids 0, 1, 2."""

    def __init__(self, tokens: Sequence[str] = (), min_count: int = 1):
        self.min_count = min_count
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]


def build_vocabulary(dialogues: Sequence[Dialogue], min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise CorpusError("min_count must be >= 1")
    if not dialogues:
        raise CorpusError("empty corpus")
    counts: Counter[str] = Counter()
    for d in dialogues:
        for message in (*d.context, d.response):
            counts.update(tokenize(message))
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_count=min_count)


def _pad(ids: list[int], max_len: int) -> TokenSequence:
    n = len(ids)
    return TokenSequence(tuple(ids + [PAD] * (max_len - n)), tuple([True] * n + [False] * (max_len - n)))


def encode_text(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Encode a single message, keeping its first `max_len` tokens."""
    if max_len < 1:
        raise CorpusError("max_len must be >= 1")
    ids = vocab.ids(tokenize(text))[:max_len] or [UNK]
    return _pad(ids, max_len)


def encode_context(context: Sequence[str], vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Join messages with SEP and keep the most recent `max_len` tokens."""
    if max_len < 1:
        raise CorpusError("max_len must be >= 1")
    ids: list[int] = []
    for k, message in enumerate(context):
        if k:
            ids.append(SEP)
        ids.extend(vocab.ids(tokenize(message)))
    ids = ids[-max_len:]
    # a leading SEP left over from truncation carries no content
    while len(ids) > 1 and ids[0] == SEP:
        ids = ids[1:]
    return _pad(ids or [UNK], max_len)


def encode_dialogue(d: Dialogue, vocab: Vocabulary, max_len: int) -> tuple[TokenSequence, TokenSequence]:
    return encode_context(d.context, vocab, max_len), encode_text(d.response, vocab, max_len)


def sample_batch(dataset: Sequence, n: int, seed=None, dedupe_responses: bool = True) -> list[int]:
    """Draw `n` distinct dataset indices uniformly without replacement.

    `seed` may be an int or a ``np.random.Generator``.  With ``dedupe_responses``
    the draw avoids two pairs sharing the same response text when the dataset
    allows it, so in-batch negatives are real negatives.
    """
    size = len(dataset)
    if n < 2:
        raise CorpusError("batch size must be >= 2")
    if n > size:
        raise CorpusError(f"batch size {n} exceeds dataset size {size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(size)
    if not dedupe_responses or not isinstance(dataset[0], Dialogue):
        return [int(i) for i in order[:n]]
    picked, seen, spare = [], set(), []
    for i in order:
        text = dataset[i].response
        if text in seen:
            spare.append(int(i))
            continue
        seen.add(text)
        picked.append(int(i))
        if len(picked) == n:
            return picked
    return picked + spare[: n - len(picked)]


def make_batch(dialogues: Sequence[Dialogue], indices: Sequence[int], vocab: Vocabulary, max_len: int) -> Batch:
    ctx, rsp = [], []
    for i in indices:
        c, r = encode_dialogue(dialogues[i], vocab, max_len)
        ctx.append(c)
        rsp.append(r)
    return Batch(ctx, rsp, list(indices))


def response_counts(dialogues: Sequence[Dialogue]) -> Counter[str]:
    return Counter(d.response for d in dialogues)


def build_candidate_list(dialogues: Sequence[Dialogue], top_l: int = 1000) -> CandidateList:
    """The `top_l` most frequent responses with renormalized usage frequencies."""
    if top_l < 2:
        raise CorpusError("top_l must be >= 2")
    counts = response_counts(dialogues)
    if len(counts) < top_l:
        raise CorpusError(
            f"only {len(counts)} distinct responses, {top_l} requested (short by {top_l - len(counts)})"
        )
    kept = sorted(counts, key=lambda t: (-counts[t], t))[:top_l]
    c = np.array([counts[t] for t in kept], dtype=np.float64)
    return CandidateList(kept, c / c.sum())


def sample_distractors(pool: Sequence[str], truth: str, n: int, rng: np.random.Generator) -> list[str]:
    """Pick `n` distinct response texts from `pool`, never the ground truth text."""
    options = [t for t in pool if t != truth]
    if len(options) < n:
        raise CorpusError(f"need {n} distractors but only {len(options)} other responses exist")
    picked = rng.choice(len(options), size=n, replace=False)
    return [options[i] for i in picked]


def train_validation_split(n: int, fraction: float = 0.1, seed=None) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def load_jsonl(path) -> list[Dialogue]:
    """Read ``{"context": [...], "response": "..."}`` records, one per line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                context = rec["context"]
                if isinstance(context, str) or not isinstance(context, list):
                    raise TypeError("context must be a list of strings")
                out.append(Dialogue(tuple(context), rec["response"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: cannot parse dialogue ({exc})") from exc
    if not out:
        raise CorpusError(f"{path}: empty corpus")
    return out


def write_jsonl(dialogues: Iterable[Dialogue], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps({"context": list(d.context), "response": d.response}) + "\n")
