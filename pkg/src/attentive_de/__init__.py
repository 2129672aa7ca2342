"""Attentive dual encoder for dialogue response retrieval."""
from .corpus import (CandidateList, Dialogue, TokenSequence, Vocabulary, build_candidate_list, build_vocabulary,
                     encode_dialogue, load_jsonl, sample_batch, tokenize)
from .estimator import AttentiveDualEncoder, RandomRetriever, TfidfRetriever
from .evaluation import evaluate, rank_candidates, recall_at_k
from .trainer import TrainConfig, TrainedModel, train

__all__ = [
    "AttentiveDualEncoder", "CandidateList", "Dialogue", "RandomRetriever", "TfidfRetriever", "TokenSequence",
    "TrainConfig", "TrainedModel", "Vocabulary", "build_candidate_list", "build_vocabulary", "encode_dialogue",
    "evaluate", "load_jsonl", "rank_candidates", "recall_at_k", "sample_batch", "tokenize", "train",
]
