import csv
import json
from pathlib import Path

import pytest

from vexlm import cli
from vexlm.pipeline import (
    ConfigError,
    Pipeline,
    PipelineConfig,
    StepError,
    default_config,
)

TINY_CONFIG = {
    "seed": 0,
    "generator": {"n_base_docs": 30, "n_target_docs": 30, "words_per_doc": [15, 30]},
    "filters": {
        "perplexity": {"max_ppl": 40.0, "order": 4, "alpha": 0.1, "seed_docs": 10},
        "repetition": {"n": 8, "max_dup_ratio": 0.8},
        "new_token_coverage": {"min_new_ratio": 0.05},
    },
    "tokenizer": {"base_vocab_size": 300, "min_freq": 3, "max_new": 24},
    "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_seq_len": 32},
    "pretrain": {"max_steps": 8, "lr": 3e-3, "micro_batch": 4, "warmup_steps": 2},
    "training": {"micro_batch": 4, "accumulation": 1, "warmup_steps": 2, "base_mix_frac": 0.3},
    "stages": [
        {"stage_id": i, "max_steps": 4, "lr": 1e-3, "convergence": {"window": 4, "min_rel_improvement": -1e18}}
        for i in range(1, 8)
    ],
    "eval": {"n_choice_items": 12, "n_options": 3, "max_eval_docs": 8},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("tiny_run")
    pipe = Pipeline(PipelineConfig.from_dict(TINY_CONFIG), work)
    pipe.run_all()
    return work, pipe


class TestConfig:
    def test_default_round_trips(self):
        cfg = default_config()
        again = PipelineConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_missing_corpus_path_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"corpus_path": "/nonexistent/corpus.jsonl"})

    def test_bad_dtype_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"dtype": "float16"})

    def test_non_contiguous_stages_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"stages": [{"stage_id": 1}, {"stage_id": 3}]})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"learning_rate": 1.0})


class TestRunAll:
    def test_all_artifacts_present(self, tiny_run):
        work, _ = tiny_run
        for k in range(8):
            assert (work / f"model_stage{k}.json").exists()
            assert (work / f"model_stage{k}.bin").exists()
            assert (work / f"eval_stage{k}.json").exists()
        for k in range(1, 8):
            assert (work / f"loss_stage{k}.csv").exists()
        for name in ("corpus.jsonl", "filtered.jsonl", "tokenizer_base.json", "tokenizer_expanded.json",
                     "choices.jsonl", "report.csv", "report.txt", "manifest.json"):
            assert (work / name).exists()

    def test_loss_csv_shape_and_stop_reason(self, tiny_run):
        work, _ = tiny_run
        with open(work / "loss_stage1.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4
        assert [r["stop_reason"] for r in rows[:-1]] == ["", "", ""]
        assert rows[-1]["stop_reason"] in ("cap", "converged", "data_exhausted")
        assert all(float(r["loss"]) > 0 for r in rows)

    def test_manifest_lists_every_step(self, tiny_run):
        work, pipe = tiny_run
        manifest = json.loads((work / "manifest.json").read_text())
        steps = set(manifest["steps"])
        assert {"corpus", "filter", "tok_train", "tok_expand", "pretrain", "stage0"} <= steps
        assert {f"stage{k}" for k in range(1, 8)} <= steps
        assert {f"eval_stage{k}" for k in range(8)} <= steps

    def test_rerun_reuses_everything(self, tiny_run):
        work, _ = tiny_run
        mtimes = {p.name: p.stat().st_mtime_ns for p in work.iterdir() if p.name != "manifest.json"}
        pipe = Pipeline(PipelineConfig.from_dict(TINY_CONFIG), work)
        pipe.run_all()
        after = {p.name: p.stat().st_mtime_ns for p in work.iterdir() if p.name != "manifest.json"}
        assert after == mtimes

    def test_stage_order_violation(self, tiny_run):
        work, pipe = tiny_run
        with pytest.raises(ConfigError, match="stage order"):
            pipe.run_one_stage(5, from_prefix=work / "model_stage1")

    def test_tokenizer_hash_mismatch(self, tiny_run, tmp_path):
        work, pipe = tiny_run
        tampered = tmp_path / "model_stage2"
        for suffix in (".json", ".bin"):
            tampered.with_suffix(suffix).write_bytes((work / f"model_stage2{suffix}").read_bytes())
        manifest = json.loads(tampered.with_suffix(".json").read_text())
        manifest["tokenizer_sha256"] = "0" * 64
        tampered.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        with pytest.raises(ConfigError, match="tokenizer hash"):
            pipe.run_one_stage(3, from_prefix=tampered)

    def test_report_needs_two_evals(self, tmp_path):
        pipe = Pipeline(PipelineConfig.from_dict(TINY_CONFIG), tmp_path / "empty")
        with pytest.raises(StepError):
            pipe.write_report()

    def test_stage_checkpoints_advance(self, tiny_run):
        work, _ = tiny_run
        for k in range(8):
            manifest = json.loads((work / f"model_stage{k}.json").read_text())
            assert manifest["stage_id"] == k


class TestCli:
    @pytest.fixture
    def cfg_file(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(TINY_CONFIG))
        return path

    def test_corpus_gen_exit_ok(self, cfg_file, tmp_path, capsys):
        work = tmp_path / "w"
        rc = cli.main(["--config", str(cfg_file), "--work-dir", str(work), "corpus", "gen"])
        assert rc == 0
        printed = capsys.readouterr().out.strip()
        assert Path(printed).exists()

    def test_tok_stats_csv(self, cfg_file, tmp_path):
        work = tmp_path / "w"
        out = tmp_path / "stats.csv"
        rc = cli.main(["--config", str(cfg_file), "--work-dir", str(work), "tok", "stats", "--tokenizer", "base", "--out", str(out)])
        assert rc == 0
        with open(out) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["tokenizer", "doc_id", "tokens"]
        assert all(r[0] == "base" and int(r[2]) > 0 for r in rows[1:])

    def test_missing_config_file_exit_2(self, tmp_path):
        rc = cli.main(["--config", str(tmp_path / "nope.json"), "--work-dir", str(tmp_path / "w"), "corpus", "gen"])
        assert rc == 2

    def test_invalid_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dtype": "float16"}))
        rc = cli.main(["--config", str(bad), "--work-dir", str(tmp_path / "w"), "corpus", "gen"])
        assert rc == 2

    def test_stage_without_checkpoint_exit_3(self, cfg_file, tmp_path):
        work = tmp_path / "w"
        rc = cli.main(["--config", str(cfg_file), "--work-dir", str(work), "train", "stage", "5"])
        assert rc == 3

    def test_seed_override(self, cfg_file, tmp_path):
        work_a = tmp_path / "a"
        work_b = tmp_path / "b"
        cli.main(["--config", str(cfg_file), "--work-dir", str(work_a), "--seed", "1", "corpus", "gen"])
        cli.main(["--config", str(cfg_file), "--work-dir", str(work_b), "--seed", "2", "corpus", "gen"])
        assert (work_a / "corpus.jsonl").read_text() != (work_b / "corpus.jsonl").read_text()
