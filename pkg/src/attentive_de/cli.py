"""Command line entry points: train, eval, visualize.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Set ``ADE_LOG_LEVEL`` (e.g. ``DEBUG``) to change log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .backbone import CheckpointError
from .corpus import CandidateList, CorpusError, load_jsonl
from .estimator import AttentiveDualEncoder
from .evaluation import EvaluationError, evaluate, format_metrics
from .trainer import TrainedModel, VocabularyMismatch, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
PROTOCOL_NAMES = {"fixed": "fixed", "distractor19": "distractor19"}

log = logging.getLogger("attentive_de")


class UsageError(Exception):
    pass


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--k expects comma separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k values must be >= 1")
    return ks


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_DATA
    except (KeyError, ValueError) as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE
    if not cfg.data:
        print("error: config key 'data' (dataset path) is required", file=sys.stderr)
        return EXIT_USAGE
    if not cfg.checkpoint:
        cfg.checkpoint = str(Path(args.config).with_suffix(".ckpt"))
    dialogues = load_jsonl(cfg.data)
    log.info("training %s on %d dialogues for %d steps", cfg.variant, len(dialogues), cfg.steps)
    report, _ = train(cfg, dialogues, progress=True)
    report_path = Path(cfg.checkpoint).with_name(Path(cfg.checkpoint).name + ".report.json")
    report_path.write_text(json.dumps(report.to_dict()), encoding="utf-8")
    print(f"checkpoint: {report.checkpoint}")
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ks = _parse_ks(args.k)
    protocol = PROTOCOL_NAMES.get(args.protocol)
    if protocol is None:
        raise UsageError(f"unknown protocol {args.protocol!r}; expected fixed or distractor19")
    model = TrainedModel.load(args.checkpoint)
    dialogues = load_jsonl(args.data)
    candidates = None
    if protocol == "fixed":
        freq = model.response_freq
        if len(freq) < 2:
            raise CorpusError("checkpoint carries fewer than 2 candidate responses")
        texts = sorted(freq, key=lambda t: (-freq[t], t))
        counts = np.array([freq[t] for t in texts], dtype=np.float64)
        candidates = CandidateList(texts, counts / counts.sum())
    est = AttentiveDualEncoder.from_model(model)
    metrics = evaluate(dialogues, est, protocol, ks, candidates, use_prior=args.prior, seed=args.seed)
    metrics["prior"] = bool(args.prior)
    print(format_metrics(metrics))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(Path(args.checkpoint).name + ".metrics.json")
    out.write_text(json.dumps(metrics, indent=2), encoding="utf-8")
    print(f"metrics: {out}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    if not args.context.strip() or not args.response.strip():
        raise UsageError("context and response must be non-empty")
    est = AttentiveDualEncoder.load(args.checkpoint)
    if not est.model_.variant.attention:
        raise UsageError("the DE variant has no attention weights to visualize")
    doc = est.attention(args.context, args.response)
    text = doc.to_html() if args.format == "html" else doc.to_ansi()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"written: {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ade", description="Attentive dual encoder for response retrieval")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Recall@k of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", default="distractor19")
    e.add_argument("--k", default="1")
    e.add_argument("--prior", action="store_true", help="add log response frequency to scores")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="export an attention heatmap for one pair")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--context", required=True)
    v.add_argument("--response", required=True)
    v.add_argument("--format", choices=("html", "ansi"), default="html")
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ADE_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VocabularyMismatch as exc:
        print(f"error: checkpoint/vocabulary mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, CorpusError, CheckpointError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
