"""Command-line entry point.

Subcommands: ``corpus gen|filter``, ``tok train|expand|stats``,
``train base|stage``, ``eval ppl|choices|economy``, ``run all``, ``report``.
Exit codes: 0 success, 2 validation error, 3 step failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import evals, tokenizer as tok_mod
from .checkpoint import load_checkpoint
from .pipeline import ConfigError, Pipeline, PipelineConfig, StepError, default_config

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STEP_FAILURE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vexlm", description="Vocabulary expansion experiments for small causal LMs.")
    parser.add_argument("--config", type=Path, help="pipeline config JSON (defaults to built-in desk-scale config)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--work-dir", type=Path, default=Path("work"), help="artifact directory")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus_p = sub.add_parser("corpus", help="corpus generation and filtering")
    corpus_sub = corpus_p.add_subparsers(dest="subcommand", required=True)
    corpus_sub.add_parser("gen", help="generate or ingest the corpus")
    corpus_sub.add_parser("filter", help="apply the quality filters")

    tok_p = sub.add_parser("tok", help="tokenizer training and statistics")
    tok_sub = tok_p.add_subparsers(dest="subcommand", required=True)
    tok_sub.add_parser("train", help="train the base tokenizer")
    tok_sub.add_parser("expand", help="expand the tokenizer on the target corpus")
    stats_p = tok_sub.add_parser("stats", help="emit per-document token counts as CSV")
    stats_p.add_argument("--tokenizer", choices=["base", "expanded"], default="expanded")
    stats_p.add_argument("--out", type=Path, help="CSV output path (default: stdout)")

    train_p = sub.add_parser("train", help="model training")
    train_sub = train_p.add_subparsers(dest="subcommand", required=True)
    train_sub.add_parser("base", help="pre-train the base model")
    stage_p = train_sub.add_parser("stage", help="run a single adaptation stage")
    stage_p.add_argument("stage_id", type=int)
    stage_p.add_argument("--from-checkpoint", type=Path, help="checkpoint prefix to start from")

    eval_p = sub.add_parser("eval", help="evaluation")
    eval_sub = eval_p.add_subparsers(dest="subcommand", required=True)
    ppl_p = eval_sub.add_parser("ppl", help="perplexity of a checkpoint")
    ppl_p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint prefix")
    ch_p = eval_sub.add_parser("choices", help="multiple-choice accuracy of a checkpoint")
    ch_p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint prefix")
    eval_sub.add_parser("economy", help="token-economy report")

    run_p = sub.add_parser("run", help="full pipeline")
    run_sub = run_p.add_subparsers(dest="subcommand", required=True)
    run_sub.add_parser("all", help="run every step end to end")

    sub.add_parser("report", help="comparative per-stage report")
    return parser


def _load_config(args) -> PipelineConfig:
    config = PipelineConfig.load(args.config) if args.config else default_config()
    if args.seed is not None:
        config.seed = args.seed
    return config


def _dispatch(args, pipe: Pipeline) -> None:
    cmd = (args.command, getattr(args, "subcommand", None))
    if cmd == ("corpus", "gen"):
        print(pipe.step_corpus())
    elif cmd == ("corpus", "filter"):
        print(pipe.step_filter())
    elif cmd == ("tok", "train"):
        print(pipe.step_tok_train())
    elif cmd == ("tok", "expand"):
        print(pipe.step_tok_expand())
    elif cmd == ("tok", "stats"):
        tok_file = pipe.step_tok_expand() if args.tokenizer == "expanded" else pipe.step_tok_train()
        tok = tok_mod.TokenizerModel.load(tok_file)
        docs = corpus_mod.read_jsonl(pipe.step_filter())
        stats = tok_mod.compute_stats(tok, docs)
        out = open(args.out, "w", newline="") if args.out else sys.stdout
        try:
            w = csv.writer(out)
            w.writerow(["tokenizer", "doc_id", "tokens"])
            for doc_id, n in stats.per_doc:
                w.writerow([args.tokenizer, doc_id, n])
        finally:
            if args.out:
                out.close()
    elif cmd == ("train", "base"):
        print(pipe.step_pretrain())
    elif cmd == ("train", "stage"):
        print(pipe.run_one_stage(args.stage_id, from_prefix=args.from_checkpoint))
    elif cmd == ("eval", "ppl"):
        params, mcfg, meta = load_checkpoint(args.checkpoint)
        tok = tok_mod.TokenizerModel.load(pipe.step_tok_expand())
        docs = corpus_mod.read_jsonl(pipe.step_filter())
        for lang in ("base", "target"):
            subset = [d for d in docs if d.lang == lang][: pipe.config.eval.get("max_eval_docs", 30)]
            if subset:
                print(f"{lang},{evals.perplexity(params, mcfg, tok, subset):.6g}")
    elif cmd == ("eval", "choices"):
        params, mcfg, _ = load_checkpoint(args.checkpoint)
        tok = tok_mod.TokenizerModel.load(pipe.step_tok_expand())
        items = evals.read_choice_items(pipe.step_choice_items())
        for label, normalize in (("normalized", True), ("raw", False)):
            print(f"{label},{evals.score_choices(params, mcfg, tok, items, length_normalize=normalize):.4f}")
    elif cmd == ("eval", "economy"):
        base_tok = tok_mod.TokenizerModel.load(pipe.step_tok_train())
        expanded = tok_mod.TokenizerModel.load(pipe.step_tok_expand())
        docs = corpus_mod.read_jsonl(pipe.step_filter())
        report = evals.token_economy_report(base_tok, expanded, docs)
        print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    elif cmd == ("run", "all"):
        pipe.run_all()
        print(pipe.manifest.path)
    elif cmd == ("report", None):
        print(pipe.write_report().read_text())
    else:
        raise ConfigError(f"unknown command {cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        pipe = Pipeline(config, args.work_dir, verbose=args.verbose)
        _dispatch(args, pipe)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except StepError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STEP_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
