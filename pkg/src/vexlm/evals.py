"""Perplexity, likelihood-ranked multiple choice, and token-economy reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import ModelConfig, ModelParams, forward_batch
from .tokenizer import TokenizerModel, compute_stats


@dataclass
class ChoiceItem:
    context: str
    options: list[str]
    answer_index: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError("need at least two options")
        if not 0 <= self.answer_index < len(self.options):
            raise ValueError("answer_index out of range")


def read_choice_items(path) -> list[ChoiceItem]:
    items = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            items.append(ChoiceItem(context=rec["context"], options=list(rec["options"]), answer_index=rec["answer_index"]))
    return items


def write_choice_items(items: Iterable[ChoiceItem], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            f.write(json.dumps({"context": it.context, "options": it.options, "answer_index": it.answer_index}, ensure_ascii=False))
            f.write("\n")


def _doc_windows(ids: list[int], max_len: int) -> list[list[int]]:
    # Non-overlapping windows; a trailing window shorter than 2 is dropped.
    out = []
    for i in range(0, len(ids), max_len):
        win = ids[i : i + max_len]
        if len(win) >= 2:
            out.append(win)
    return out


def _seq_log_probs(params: ModelParams, config: ModelConfig, ids: Sequence[int]) -> np.ndarray:
    """Log probability of ids[1:] given their prefixes; length len(ids)-1."""
    arr = np.asarray(ids, dtype=np.int64)
    logits = forward_batch(params, config, arr[None, :])[0]
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return logp[np.arange(len(arr) - 1), arr[1:]]


def perplexity(params: ModelParams, config: ModelConfig, tok: TokenizerModel, docs: Iterable) -> float:
    """Corpus perplexity with next-token positions pooled across documents."""
    total_nll = 0.0
    positions = 0
    n_docs = 0
    for doc in docs:
        text = getattr(doc, "text", doc)
        ids = tok.encode(text)
        n_docs += 1
        if len(ids) < 2:
            raise ValueError("every document must encode to at least 2 tokens")
        for window in _doc_windows(ids, config.max_seq_len):
            lp = _seq_log_probs(params, config, window)
            total_nll -= float(lp.sum())
            positions += len(lp)
    if n_docs == 0:
        raise ValueError("no documents to evaluate")
    return math.exp(total_nll / positions)


def option_log_likelihood(params: ModelParams, config: ModelConfig, tok: TokenizerModel, context: str, option: str) -> tuple[float, int]:
    """Summed log-likelihood of the option tokens given the context, and the count."""
    ctx_ids = tok.encode(context)
    opt_ids = tok.encode(option)
    if not opt_ids:
        raise ValueError("option encodes to zero tokens")
    seq = (ctx_ids + opt_ids)[-config.max_seq_len :]
    n_opt = min(len(opt_ids), len(seq) - 1)
    if n_opt < 1:
        raise ValueError("option cannot be scored without at least one conditioning token")
    lp = _seq_log_probs(params, config, seq)
    return float(lp[-n_opt:].sum()), n_opt


def score_choices(
    params: ModelParams,
    config: ModelConfig,
    tok: TokenizerModel,
    items: Sequence[ChoiceItem],
    length_normalize: bool = True,
) -> float:
    """Accuracy of argmax option log-likelihood; ties go to the lower index."""
    if not items:
        raise ValueError("no items to score")
    correct = 0
    for item in items:
        best_idx = 0
        best_score = None
        for idx, option in enumerate(item.options):
            ll, n_tokens = option_log_likelihood(params, config, tok, item.context, option)
            score = ll / n_tokens if length_normalize else ll
            if best_score is None or score > best_score:
                best_score = score
                best_idx = idx
        if best_idx == item.answer_index:
            correct += 1
    return correct / len(items)


@dataclass
class TokenEconomyReport:
    """Expanded-vs-base token spend per language tag and overall."""

    per_lang: dict[str, dict]
    overall: dict

    def to_dict(self) -> dict:
        return {"per_lang": self.per_lang, "overall": self.overall}


def token_economy_report(tok_base: TokenizerModel, tok_expanded: TokenizerModel, corpus: Sequence) -> TokenEconomyReport:
    """Totals, averages, and expanded/base ratios for each language tag."""
    if not corpus:
        raise ValueError("corpus is empty")
    by_lang: dict[str, list] = {}
    for doc in corpus:
        by_lang.setdefault(getattr(doc, "lang", "unknown"), []).append(doc)

    def entry(docs):
        base = compute_stats(tok_base, docs)
        expanded = compute_stats(tok_expanded, docs)
        return {
            "docs": base.docs,
            "base_total": base.total_tokens,
            "expanded_total": expanded.total_tokens,
            "base_avg": base.avg_tokens_per_doc,
            "expanded_avg": expanded.avg_tokens_per_doc,
            "ratio": expanded.total_tokens / base.total_tokens if base.total_tokens else 1.0,
        }

    return TokenEconomyReport(
        per_lang={lang: entry(docs) for lang, docs in sorted(by_lang.items())},
        overall=entry(list(corpus)),
    )


@dataclass
class EvalReport:
    stage_id: int
    perplexity_per_lang: dict[str, float]
    choice_accuracy: dict[str, float]  # keys: "normalized", "raw"
    token_ratio_per_lang: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "perplexity_per_lang": self.perplexity_per_lang,
            "choice_accuracy": self.choice_accuracy,
            "token_ratio_per_lang": self.token_ratio_per_lang,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            stage_id=d["stage_id"],
            perplexity_per_lang=d["perplexity_per_lang"],
            choice_accuracy=d["choice_accuracy"],
            token_ratio_per_lang=d.get("token_ratio_per_lang", {}),
            meta=d.get("meta", {}),
        )
