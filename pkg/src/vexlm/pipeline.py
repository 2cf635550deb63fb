"""End-to-end experiment orchestration with a content-hashed run manifest.

The pipeline runs: corpus generation/ingestion -> quality filters -> base
tokenizer training -> base-model pre-training on the base-language split ->
tokenizer expansion -> embedding expansion/initialization (stage 0) ->
stages 1..7 -> per-stage evaluation -> comparative report.

Every step records a signature (hash of its settings plus input artifact
hashes) and its output hashes in ``manifest.json``; re-running with an
unchanged config reuses completed steps. Artifacts carry no timestamps, so
identical config + seed reproduces identical content hashes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import corpus as corpus_mod
from . import evals, tokenizer as tok_mod
from .checkpoint import atomic_write_text, load_checkpoint, save_checkpoint, sha256_file, sha256_json
from .corpus import CharNgramScorer, Document, GeneratorParams
from .embed_init import decompose_added_tokens, expand_params
from .evals import ChoiceItem, EvalReport
from .model import ModelConfig, init_params
from .optim import AdamWSettings, StageResult, run_stage
from .stages import ConvergenceSettings, StagePlan

__version_tag__ = "vexlm-0.1.0"


class ConfigError(ValueError):
    """Invalid pipeline configuration (exit code 2 territory)."""


class StepError(RuntimeError):
    """A pipeline step failed after validation (exit code 3 territory)."""

    def __init__(self, step: str, message: str):
        super().__init__(f"step '{step}' failed: {message}")
        self.step = step


# -- configuration ---------------------------------------------------------


def _take(d: dict, cls, **overrides):
    try:
        return cls(**{**d, **overrides})
    except TypeError as e:
        raise ConfigError(str(e)) from None


@dataclass
class PipelineConfig:
    """One declarative document driving the whole run."""

    seed: int = 0
    dtype: str = "float64"
    corpus_path: str | None = None  # JSONL; None -> synthetic generator
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    filters: dict = field(default_factory=dict)
    tokenizer: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    optimizer: AdamWSettings = field(default_factory=AdamWSettings)
    stages: list[StagePlan] = field(default_factory=list)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = dict(raw)
        gen = raw.pop("generator", {})
        if "words_per_doc" in gen:
            gen["words_per_doc"] = tuple(gen["words_per_doc"])
        for k in ("base_word_len", "morpheme_len", "morphemes_per_word"):
            if k in gen:
                gen[k] = tuple(gen[k])
        stages_raw = raw.pop("stages", None)
        opt = raw.pop("optimizer", {})
        cfg = _take(raw, cls, generator=_take(gen, GeneratorParams), optimizer=_take(opt, AdamWSettings))
        if stages_raw is None:
            stages_raw = [{"stage_id": i} for i in range(1, 8)]
        plans = []
        for s in stages_raw:
            s = dict(s)
            conv = s.pop("convergence", {})
            plans.append(_take(s, StagePlan, convergence=_take(conv, ConvergenceSettings)))
        ids = [p.stage_id for p in plans]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError("stage plans must cover a contiguous prefix of 1..7 in order")
        cfg.stages = plans
        if cfg.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if cfg.corpus_path is not None and not Path(cfg.corpus_path).exists():
            raise ConfigError(f"corpus path does not exist: {cfg.corpus_path}")
        curation = cfg.tokenizer.get("curation_file")
        if curation is not None and not Path(curation).exists():
            raise ConfigError(f"curation file does not exist: {curation}")
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "dtype": self.dtype,
            "corpus_path": self.corpus_path,
            "generator": vars(self.generator).copy(),
            "filters": self.filters,
            "tokenizer": self.tokenizer,
            "model": self.model,
            "pretrain": self.pretrain,
            "training": self.training,
            "optimizer": vars(self.optimizer).copy(),
            "stages": [
                {
                    "stage_id": p.stage_id,
                    "max_steps": p.max_steps,
                    "lr": p.lr,
                    "convergence": vars(p.convergence).copy(),
                    "use_low_rank_adapters": p.use_low_rank_adapters,
                    "lora_rank": p.lora_rank,
                    "lora_alpha": p.lora_alpha,
                }
                for p in self.stages
            ],
            "eval": self.eval,
        }
        for k in ("words_per_doc", "base_word_len", "morpheme_len", "morphemes_per_word"):
            d["generator"][k] = list(d["generator"][k])
        return d


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "dtype": "float64",
    "generator": {"n_base_docs": 120, "n_target_docs": 120},
    "filters": {
        "perplexity": {"max_ppl": 25.0, "order": 4, "alpha": 0.1, "seed_docs": 20},
        "repetition": {"n": 8, "max_dup_ratio": 0.6},
        "stopword": {"min_rate": 1e-9, "max_rate": 1.0, "top_k": 30},
        "new_token_coverage": {"min_new_ratio": 0.3},
    },
    "tokenizer": {"base_vocab_size": 512, "min_freq": 5, "max_new": 192, "candidate_budget": None, "curation_file": None},
    "model": {"n_layers": 2, "n_heads": 4, "d_model": 64, "d_ff": 128, "max_seq_len": 64},
    "pretrain": {"max_steps": 300, "lr": 3e-3, "micro_batch": 16, "accumulation": 1, "warmup_steps": 10},
    "training": {"micro_batch": 16, "accumulation": 1, "warmup_steps": 10, "base_mix_frac": 0.3},
    "stages": [
        {"stage_id": 1, "max_steps": 150, "lr": 3e-3},
        {"stage_id": 2, "max_steps": 150, "lr": 3e-3},
        {"stage_id": 3, "max_steps": 150, "lr": 2e-3},
        {"stage_id": 4, "max_steps": 150, "lr": 1e-3},
        {"stage_id": 5, "max_steps": 150, "lr": 1e-3},
        {"stage_id": 6, "max_steps": 150, "lr": 5e-4},
        {"stage_id": 7, "max_steps": 150, "lr": 5e-4},
    ],
    "eval": {"n_choice_items": 60, "n_options": 4, "length_normalize": True, "max_eval_docs": 30},
}


def default_config() -> PipelineConfig:
    return PipelineConfig.from_dict(json.loads(json.dumps(DEFAULT_CONFIG)))


# -- data helpers ----------------------------------------------------------


def token_stream(tok: tok_mod.TokenizerModel, docs: list[Document]) -> np.ndarray:
    ids: list[int] = []
    newline = tok.encode("\n")
    for d in docs:
        ids.extend(tok.encode(d.text))
        ids.extend(newline)
    return np.asarray(ids, dtype=np.int64)


def batch_sampler(stream: np.ndarray, micro_batch: int, seq_len: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless random fixed-shape (ids, targets) windows from a token stream."""
    if len(stream) < seq_len + 2:
        raise ValueError("token stream too short for the requested sequence length")
    while True:
        starts = rng.integers(0, len(stream) - seq_len - 1, size=micro_batch)
        chunk = np.stack([stream[s : s + seq_len + 1] for s in starts])
        yield chunk[:, :-1], chunk[:, 1:]


def mixed_sampler(streams: list[np.ndarray], weights: list[float], micro_batch: int, seq_len: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Sample each window from a stream chosen by weight; deterministic in rng."""
    weights_arr = np.asarray(weights, dtype=float)
    weights_arr /= weights_arr.sum()
    while True:
        rows = []
        for _ in range(micro_batch):
            s = streams[rng.choice(len(streams), p=weights_arr)]
            start = int(rng.integers(0, len(s) - seq_len - 1))
            rows.append(s[start : start + seq_len + 1])
        chunk = np.stack(rows)
        yield chunk[:, :-1], chunk[:, 1:]


def make_choice_items(docs: list[Document], n_items: int, n_options: int, rng: np.random.Generator) -> list[ChoiceItem]:
    """Continuation-ranking items: pick the doc's own next words among distractors."""
    usable = [d for d in docs if len(d.text.split()) >= 8]
    if len(usable) < n_options + 1:
        raise ValueError("not enough documents to build choice items")
    items = []
    for _ in range(n_items):
        doc = usable[rng.integers(0, len(usable))]
        words = doc.text.split()
        cut = int(rng.integers(4, len(words) - 3))
        context = " ".join(words[:cut])
        true_cont = " " + " ".join(words[cut : cut + 3])
        options = [true_cont]
        while len(options) < n_options:
            other = usable[rng.integers(0, len(usable))]
            ow = other.text.split()
            if len(ow) < 3:
                continue
            start = int(rng.integers(0, len(ow) - 2))
            cand = " " + " ".join(ow[start : start + 3])
            if cand not in options:
                options.append(cand)
        order = rng.permutation(n_options)
        shuffled = [options[i] for i in order]
        items.append(ChoiceItem(context=context, options=shuffled, answer_index=int(np.argwhere(order == 0)[0][0])))
    return items


# -- run manifest ----------------------------------------------------------


class RunManifest:
    """Per-step signatures and output hashes enabling idempotent re-runs."""

    def __init__(self, work_dir: Path):
        self.work_dir = Path(work_dir)
        self.path = self.work_dir / "manifest.json"
        self.data: dict = {"version": __version_tag__, "config_hash": None, "steps": {}}
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as f:
                self.data = json.load(f)

    def save(self) -> None:
        atomic_write_text(self.path, json.dumps(self.data, indent=1, sort_keys=True))

    def is_done(self, step: str, signature: str) -> bool:
        rec = self.data["steps"].get(step)
        if rec is None or rec["signature"] != signature:
            return False
        for rel, digest in rec["outputs"].items():
            p = self.work_dir / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def record(self, step: str, signature: str, outputs: list[Path]) -> None:
        self.data["steps"][step] = {
            "signature": signature,
            "outputs": {str(p.relative_to(self.work_dir)): sha256_file(p) for p in outputs},
        }
        self.save()

    def output_hash(self, step: str, rel: str) -> str | None:
        rec = self.data["steps"].get(step)
        return rec["outputs"].get(rel) if rec else None


# -- pipeline --------------------------------------------------------------


class Pipeline:
    def __init__(self, config: PipelineConfig, work_dir, verbose: bool = False):
        self.config = config
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.work_dir)
        self.manifest.data["config_hash"] = sha256_json(config.to_dict())
        self.verbose = verbose

    def log(self, msg: str) -> None:
        if self.verbose:
            print(f"[vexlm] {msg}")

    def _dtype(self):
        return np.float64 if self.config.dtype == "float64" else np.float32

    def _sig(self, step: str, settings, inputs: list[str]) -> str:
        return sha256_json({"step": step, "settings": settings, "inputs": inputs, "seed": self.config.seed})

    def _skip_or_run(self, step: str, signature: str, outputs: list[Path], fn) -> bool:
        """Returns True when the step actually ran."""
        if self.manifest.is_done(step, signature):
            self.log(f"{step}: reusing cached outputs")
            return False
        self.log(f"{step}: running")
        try:
            fn()
        except (ConfigError, StepError):
            raise
        except Exception as e:
            raise StepError(step, str(e)) from e
        for p in outputs:
            if not p.exists():
                raise StepError(step, f"expected output missing: {p}")
        self.manifest.record(step, signature, outputs)
        return True

    # ---- steps ----

    def step_corpus(self) -> Path:
        out = self.work_dir / "corpus.jsonl"
        if self.config.corpus_path:
            settings = {"source": "file", "hash": sha256_file(self.config.corpus_path)}
            sig = self._sig("corpus", settings, [])
            self._skip_or_run("corpus", sig, [out], lambda: corpus_mod.write_jsonl(corpus_mod.read_jsonl(self.config.corpus_path), out))
        else:
            settings = {"source": "generator", "params": self.config.to_dict()["generator"]}
            sig = self._sig("corpus", settings, [])
            self._skip_or_run(
                "corpus", sig, [out],
                lambda: corpus_mod.write_jsonl(corpus_mod.generate_synthetic_corpus(self.config.seed, self.config.generator), out),
            )
        return out

    def step_filter(self) -> Path:
        corpus_file = self.step_corpus()
        out = self.work_dir / "filtered.jsonl"
        report_out = self.work_dir / "filter_report.json"
        f = self.config.filters
        sig = self._sig("filter", f, [sha256_file(corpus_file)])

        def run():
            docs = corpus_mod.read_jsonl(corpus_file)
            reports = []
            if "perplexity" in f:
                cfg = f["perplexity"]
                scorer = CharNgramScorer(order=cfg.get("order", 4), alpha=cfg.get("alpha", 0.1))
                seed_n = cfg.get("seed_docs", 20)
                scorer.train([d.text for d in docs[:seed_n]] + [d.text for d in docs if d.lang == "target"][:seed_n])
                docs, rep = corpus_mod.filter_perplexity(docs, scorer, cfg["max_ppl"])
                reports.append(rep.to_dict())
            if "repetition" in f:
                cfg = f["repetition"]
                docs, rep = corpus_mod.filter_repetition(docs, cfg["n"], cfg["max_dup_ratio"])
                reports.append(rep.to_dict())
            if "stopword" in f:
                cfg = f["stopword"]
                stoplist = cfg.get("stoplist")
                if not stoplist:
                    counts = Counter(w for d in docs for w in d.text.split())
                    stoplist = [w for w, _ in counts.most_common(cfg.get("top_k", 30))]
                docs, rep = corpus_mod.filter_stopword(docs, stoplist, cfg.get("min_rate", 0.0), cfg.get("max_rate", 1.0))
                reports.append(rep.to_dict())
            corpus_mod.write_jsonl(docs, out)
            atomic_write_text(report_out, json.dumps({"filters": reports}, indent=1))

        self._skip_or_run("filter", sig, [out, report_out], run)
        return out

    def step_tok_train(self) -> Path:
        filtered = self.step_filter()
        out = self.work_dir / "tokenizer_base.json"
        settings = {"base_vocab_size": self.config.tokenizer.get("base_vocab_size", 512)}
        sig = self._sig("tok_train", settings, [sha256_file(filtered)])

        def run():
            docs = corpus_mod.read_jsonl(filtered)
            base_docs = [d for d in docs if d.lang == "base"] or docs
            tok = tok_mod.train_base(base_docs, settings["base_vocab_size"])
            atomic_write_text(out, tok.to_json())

        self._skip_or_run("tok_train", sig, [out], run)
        return out

    def step_pretrain(self) -> Path:
        filtered = self.step_filter()
        tok_file = self.step_tok_train()
        prefix = self.work_dir / "model_base"
        outs = [prefix.with_suffix(".json"), prefix.with_suffix(".bin"), self.work_dir / "loss_pretrain.csv"]
        settings = {"model": self.config.model, "pretrain": self.config.pretrain, "dtype": self.config.dtype}
        sig = self._sig("pretrain", settings, [sha256_file(filtered), sha256_file(tok_file)])

        def run():
            tok = tok_mod.TokenizerModel.load(tok_file)
            docs = corpus_mod.read_jsonl(filtered)
            base_docs = [d for d in docs if d.lang == "base"] or docs
            mcfg = ModelConfig(vocab_size=tok.vocab_size, **self.config.model)
            rng = np.random.default_rng(self.config.seed)
            params = init_params(mcfg, rng, dtype=self._dtype())
            pt = self.config.pretrain
            stream = token_stream(tok, base_docs)
            batches = batch_sampler(stream, pt.get("micro_batch", 16), mcfg.max_seq_len, np.random.default_rng(self.config.seed + 1))
            # Pre-training trains everything: reuse the stage driver with the
            # all-trainable mask (stage 6, no adapters).
            max_steps = pt.get("max_steps", 300)
            conv = _take(
                {"window": min(20, max_steps), **pt.get("convergence", {})},
                ConvergenceSettings,
            )
            plan = StagePlan(stage_id=6, max_steps=max_steps, lr=pt.get("lr", 3e-3), convergence=conv)
            result = run_stage(params, mcfg, batches, plan, accumulation=pt.get("accumulation", 1), opt_settings=self.config.optimizer, warmup_steps=pt.get("warmup_steps", 10))
            self._write_loss_csv(self.work_dir / "loss_pretrain.csv", "pretrain", result)
            save_checkpoint(prefix, result.params, mcfg, stage_id=-1, step_count=result.steps, tokenizer_hash=sha256_file(tok_file))

        self._skip_or_run("pretrain", sig, outs, run)
        return prefix

    def step_tok_expand(self) -> Path:
        filtered = self.step_filter()
        tok_file = self.step_tok_train()
        out = self.work_dir / "tokenizer_expanded.json"
        tcfg = self.config.tokenizer
        settings = {k: tcfg.get(k) for k in ("min_freq", "max_new", "candidate_budget")}
        inputs = [sha256_file(filtered), sha256_file(tok_file)]
        curation = tcfg.get("curation_file")
        if curation:
            inputs.append(sha256_file(curation))
        sig = self._sig("tok_expand", settings, inputs)

        def run():
            tok = tok_mod.TokenizerModel.load(tok_file)
            docs = corpus_mod.read_jsonl(filtered)
            target_docs = [d for d in docs if d.lang == "target"] or docs
            allowlist, blocklist = None, None
            if curation:
                with open(curation, "r", encoding="utf-8") as fh:
                    cur = json.load(fh)
                allowlist = [t.encode("utf-8") for t in cur.get("allow", [])]
                blocklist = [t.encode("utf-8") for t in cur.get("block", [])]
            expanded = tok_mod.expand(
                tok, target_docs,
                min_freq=tcfg.get("min_freq", 5),
                max_new=tcfg.get("max_new", 192),
                candidate_budget=tcfg.get("candidate_budget"),
                allowlist=allowlist,
                blocklist=blocklist,
            )
            atomic_write_text(out, expanded.to_json())

        self._skip_or_run("tok_expand", sig, [out], run)
        return out

    def step_stage0(self) -> Path:
        base_prefix = self.step_pretrain()
        exp_file = self.step_tok_expand()
        prefix = self.work_dir / "model_stage0"
        outs = [prefix.with_suffix(".json"), prefix.with_suffix(".bin")]
        sig = self._sig("stage0", {}, [sha256_file(base_prefix.with_suffix(".json")), sha256_file(exp_file)])

        def run():
            params, mcfg, _ = load_checkpoint(base_prefix)
            tok = tok_mod.TokenizerModel.load(exp_file)
            decomps = decompose_added_tokens(tok)
            expanded = expand_params(params, tok.base_size, decomps)
            new_cfg = ModelConfig(**{**mcfg.to_dict(), "vocab_size": tok.vocab_size})
            save_checkpoint(
                prefix, expanded, new_cfg, stage_id=0, step_count=0,
                tokenizer_hash=sha256_file(exp_file),
                decompositions={d.new_token: list(d.parts) for d in decomps},
            )

        self._skip_or_run("stage0", sig, outs, run)
        return prefix

    # ---- stage training ----

    def _stage_streams(self, tok) -> tuple[list[np.ndarray], list[float]]:
        docs = corpus_mod.read_jsonl(self.step_filter())
        target_docs = [d for d in docs if d.lang == "target"] or docs
        base_docs = [d for d in docs if d.lang == "base"] or docs
        cov = self.config.filters.get("new_token_coverage")
        if cov and tok.added_tokens:
            target_docs, _ = corpus_mod.filter_new_token_coverage(target_docs, tok, cov.get("min_new_ratio", 0.0))
            if not target_docs:
                raise StepError("stage", "coverage filter removed every target document")
        base_frac = self.config.training.get("base_mix_frac", 0.3)
        return [token_stream(tok, target_docs), token_stream(tok, base_docs)], [1.0 - base_frac, base_frac]

    def run_one_stage(self, stage_id: int, from_prefix: Path | None = None) -> Path:
        if not 1 <= stage_id <= len(self.config.stages):
            raise ConfigError(f"stage {stage_id} is not in the configured plan")
        prev_prefix = from_prefix or self.work_dir / (f"model_stage{stage_id - 1}" if stage_id > 1 else "model_stage0")
        if stage_id == 1 and from_prefix is None:
            prev_prefix = self.step_stage0()
        prefix = self.work_dir / f"model_stage{stage_id}"
        loss_csv = self.work_dir / f"loss_stage{stage_id}.csv"
        outs = [prefix.with_suffix(".json"), prefix.with_suffix(".bin"), loss_csv]
        plan = self.config.stages[stage_id - 1]
        exp_file = self.step_tok_expand()
        if not prev_prefix.with_suffix(".json").exists():
            raise StepError(f"stage{stage_id}", f"missing input checkpoint {prev_prefix}")
        settings = {"plan": self.config.to_dict()["stages"][stage_id - 1], "training": self.config.training}
        sig = self._sig(f"stage{stage_id}", settings, [sha256_file(prev_prefix.with_suffix(".json")), sha256_file(exp_file)])

        def run():
            params, mcfg, meta = load_checkpoint(prev_prefix)
            if meta["stage_id"] != stage_id - 1:
                raise ConfigError(f"stage order violation: checkpoint is stage {meta['stage_id']}, cannot run stage {stage_id}")
            tok_hash = sha256_file(exp_file)
            if meta["tokenizer_sha256"] != tok_hash:
                raise ConfigError("tokenizer hash mismatch between checkpoint and config")
            tok = tok_mod.TokenizerModel.load(exp_file)
            streams, weights = self._stage_streams(tok)
            tr = self.config.training
            batches = mixed_sampler(streams, weights, tr.get("micro_batch", 16), mcfg.max_seq_len, np.random.default_rng(self.config.seed * 1000 + stage_id))
            result = run_stage(
                params, mcfg, batches, plan,
                accumulation=tr.get("accumulation", 1),
                opt_settings=self.config.optimizer,
                warmup_steps=tr.get("warmup_steps", 10),
                rng=np.random.default_rng(self.config.seed * 1000 + 500 + stage_id),
            )
            self._write_loss_csv(loss_csv, f"stage{stage_id}", result)
            save_checkpoint(
                prefix, result.params, mcfg, stage_id=stage_id, step_count=result.steps,
                tokenizer_hash=tok_hash, decompositions=meta.get("decompositions"),
            )

        self._skip_or_run(f"stage{stage_id}", sig, outs, run)
        return prefix

    @staticmethod
    def _write_loss_csv(path: Path, stage: str, result: StageResult) -> None:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["stage", "step", "lr", "loss", "stop_reason"])
        for i, (lr, loss_value) in enumerate(zip(result.lrs, result.losses), start=1):
            reason = result.stop_reason if i == len(result.losses) else ""
            w.writerow([stage, i, f"{lr:.10g}", f"{loss_value:.10g}", reason])
        atomic_write_text(path, buf.getvalue())

    # ---- evaluation ----

    def step_choice_items(self) -> Path:
        filtered = self.step_filter()
        out = self.work_dir / "choices.jsonl"
        ev = self.config.eval
        sig = self._sig("choice_items", {k: ev.get(k) for k in ("n_choice_items", "n_options")}, [sha256_file(filtered)])

        def run():
            docs = corpus_mod.read_jsonl(filtered)
            rng = np.random.default_rng(self.config.seed + 99)
            items = make_choice_items(docs, ev.get("n_choice_items", 60), ev.get("n_options", 4), rng)
            evals.write_choice_items(items, out)

        self._skip_or_run("choice_items", sig, [out], run)
        return out

    def evaluate_checkpoint(self, prefix: Path, stage_id: int) -> Path:
        exp_file = self.step_tok_expand()
        base_tok_file = self.step_tok_train()
        choices_file = self.step_choice_items()
        filtered = self.step_filter()
        out = self.work_dir / f"eval_stage{stage_id}.json"
        ev = self.config.eval
        sig = self._sig(
            f"eval_stage{stage_id}", ev,
            [sha256_file(prefix.with_suffix(".json")), sha256_file(exp_file), sha256_file(choices_file), sha256_file(filtered)],
        )

        def run():
            params, mcfg, meta = load_checkpoint(prefix)
            tok = tok_mod.TokenizerModel.load(exp_file)
            base_tok = tok_mod.TokenizerModel.load(base_tok_file)
            docs = corpus_mod.read_jsonl(filtered)
            max_docs = ev.get("max_eval_docs", 30)
            ppl = {}
            ratios = {}
            for lang in ("base", "target"):
                subset = [d for d in docs if d.lang == lang][:max_docs]
                if subset:
                    ppl[lang] = evals.perplexity(params, mcfg, tok, subset)
                    econ = evals.token_economy_report(base_tok, tok, subset)
                    ratios[lang] = econ.overall["ratio"]
            items = evals.read_choice_items(choices_file)
            acc = {
                "normalized": evals.score_choices(params, mcfg, tok, items, length_normalize=True),
                "raw": evals.score_choices(params, mcfg, tok, items, length_normalize=False),
            }
            report = EvalReport(
                stage_id=stage_id,
                perplexity_per_lang=ppl,
                choice_accuracy=acc,
                token_ratio_per_lang=ratios,
                meta={"checkpoint": prefix.name, "seed": self.config.seed, "step_count": meta["step_count"]},
            )
            atomic_write_text(out, json.dumps(report.to_dict(), indent=1, sort_keys=True))

        self._skip_or_run(f"eval_stage{stage_id}", sig, [out], run)
        return out

    # ---- top-level commands ----

    def run_all(self) -> RunManifest:
        prefix = self.step_stage0()
        self.evaluate_checkpoint(prefix, 0)
        for plan in self.config.stages:
            prefix = self.run_one_stage(plan.stage_id)
            self.evaluate_checkpoint(prefix, plan.stage_id)
        self.write_report()
        return self.manifest

    def write_report(self) -> Path:
        reports = []
        eval_paths = []
        for stage_id in range(0, 8):
            path = self.work_dir / f"eval_stage{stage_id}.json"
            if path.exists():
                eval_paths.append(path)
                with open(path, "r", encoding="utf-8") as f:
                    reports.append(EvalReport.from_dict(json.load(f)))
        if len(reports) < 2:
            raise StepError("report", "need at least two evaluated checkpoints")
        csv_out = self.work_dir / "report.csv"
        txt_out = self.work_dir / "report.txt"
        sig = self._sig("report", {}, [sha256_file(p) for p in eval_paths])
        self._skip_or_run("report", sig, [csv_out, txt_out], lambda: self._render_report(reports, csv_out, txt_out))
        return txt_out

    @staticmethod
    def _render_report(reports: list[EvalReport], csv_out: Path, txt_out: Path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["stage", "ppl_base", "ppl_target", "ratio_base", "ratio_target", "acc_normalized", "acc_raw"])
        lines = [f"{'stage':>5} {'ppl_base':>10} {'ppl_target':>11} {'acc_norm':>9} {'acc_raw':>8}"]
        for r in reports:
            w.writerow([
                r.stage_id,
                f"{r.perplexity_per_lang.get('base', float('nan')):.6g}",
                f"{r.perplexity_per_lang.get('target', float('nan')):.6g}",
                f"{r.token_ratio_per_lang.get('base', float('nan')):.6g}",
                f"{r.token_ratio_per_lang.get('target', float('nan')):.6g}",
                f"{r.choice_accuracy['normalized']:.4f}",
                f"{r.choice_accuracy['raw']:.4f}",
            ])
            lines.append(
                f"{r.stage_id:>5} {r.perplexity_per_lang.get('base', float('nan')):>10.4g} "
                f"{r.perplexity_per_lang.get('target', float('nan')):>11.4g} "
                f"{r.choice_accuracy['normalized']:>9.4f} {r.choice_accuracy['raw']:>8.4f}"
            )
        first, last = reports[0], reports[-1]
        for lang in ("base", "target"):
            if lang in first.perplexity_per_lang and lang in last.perplexity_per_lang:
                a, b = first.perplexity_per_lang[lang], last.perplexity_per_lang[lang]
                lines.append(f"{lang} perplexity: {a:.4g} -> {b:.4g} ({(b - a) / a * 100:+.1f}%)")
        atomic_write_text(csv_out, buf.getvalue())
        atomic_write_text(txt_out, "\n".join(lines) + "\n")
