"""Small generated corpora with known structure, for demos and tests."""
from __future__ import annotations

import numpy as np

from .corpus import Dialogue


def random_corpus(n: int, seed: int = 0, vocab_size: int = 200, ctx_len: int = 8, rsp_len: int = 5) -> list[Dialogue]:
    """Pairs of unrelated random word strings; only memorization can match them."""
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab_size)]
    return [Dialogue((" ".join(rng.choice(words, ctx_len)),), " ".join(rng.choice(words, rsp_len)))
            for _ in range(n)]


def planted_keyword_corpus(n: int, seed: int = 0, n_signal: int = 10, ctx_noise: int = 20, rsp_noise: int = 5,
                           noise_vocab: int = 300):
    """Each pair shares one keyword from a small signal set amid random noise.

    Returns ``(dialogues, signal_words)``.  The keyword is the only token that
    links a context to its response.
    """
    rng = np.random.default_rng(seed)
    signal = [f"key{i}" for i in range(n_signal)]
    noise = [f"n{i}" for i in range(noise_vocab)]
    out = []
    for _ in range(n):
        kw = signal[rng.integers(n_signal)]
        ctx = list(rng.choice(noise, ctx_noise))
        ctx.insert(int(rng.integers(ctx_noise + 1)), kw)
        rsp = list(rng.choice(noise, rsp_noise))
        rsp.insert(int(rng.integers(rsp_noise + 1)), kw)
        out.append(Dialogue((" ".join(ctx),), " ".join(rsp)))
    return out, signal


def topic_corpus(n: int, seed: int = 0, n_topics: int = 40, ctx_noise: int = 8, rsp_noise: int = 4,
                 noise_vocab: int = 50, copy_prob: float = 0.3) -> list[Dialogue]:
    """Contexts carry a topic cue word, responses a different word tied to the same topic.

    With probability ``copy_prob`` the response also repeats the cue word, the
    only signal a bag-of-words matcher can use.  Noise words come from a small
    shared pool so they carry no pair identity.
    """
    rng = np.random.default_rng(seed)
    noise = [f"n{i}" for i in range(noise_vocab)]
    out = []
    for _ in range(n):
        t = int(rng.integers(n_topics))
        ctx = list(rng.choice(noise, ctx_noise))
        ctx.insert(int(rng.integers(ctx_noise + 1)), f"cue{t}")
        rsp = list(rng.choice(noise, rsp_noise))
        rsp.insert(int(rng.integers(rsp_noise + 1)), f"ans{t}")
        if rng.random() < copy_prob:
            rsp.insert(int(rng.integers(len(rsp) + 1)), f"cue{t}")
        out.append(Dialogue((" ".join(ctx),), " ".join(rsp)))
    return out
