import json
import os

import numpy as np
import pytest

from duetsql import checkpoint as ck
from duetsql import cli
from duetsql import pipeline as pl
from duetsql import seqmodels as sm
from duetsql import sqlcore as sc


def tiny_cfg(out_dir, **overrides) -> pl.ExperimentConfig:
    base = dict(out_dir=str(out_dir), n_schemas=2, dialogues_per_schema=5,
                aux_n_schemas=2, parser_aux_per_schema=6,
                rewrite_aux_dialogues_per_schema=3, seeds=(0,),
                lm_epochs=1, pretrain_epochs=1, warmup_epochs=1,
                parser_warmup_steps=50, parser_finetune_steps=50, dual_epochs=1,
                cotrain_iterations=1, ablate_aux_dual_samples=10)
    base.update(overrides)
    return pl.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_cfg(out)
    pl.stage_corpus(cfg)
    pl.stage_lms(cfg, seed=0)
    pl.stage_warmup(cfg, seed=0)
    pl.stage_parser(cfg, seed=0)
    pl.stage_dual(cfg, seed=0)
    return cfg


class TestConfig:
    def test_defaults_load_without_file(self):
        cfg = pl.load_config(None)
        assert cfg.n_schemas == 20 and cfg.dialogues_per_schema == 30
        assert cfg.labeled_fraction == 0.10

    def test_ini_file_overrides(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[corpus]\nn_schemas = 4\n\n[dual]\ndual_beam_k = 3\n")
        cfg = pl.load_config(path)
        assert cfg.n_schemas == 4 and cfg.dual_beam_k == 3

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[corpus]\nbananas = 4\n")
        with pytest.raises(pl.ConfigError):
            pl.load_config(path)

    def test_key_in_wrong_section_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[dual]\nn_schemas = 4\n")
        with pytest.raises(pl.ConfigError):
            pl.load_config(path)

    def test_env_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DUETSQL_SEED", "9")
        monkeypatch.setenv("DUETSQL_OUT", str(tmp_path / "env_out"))
        cfg = pl.load_config(None)
        assert cfg.seed == 9 and cfg.out_dir.endswith("env_out")

    def test_invalid_fraction_rejected(self, tmp_path):
        with pytest.raises(pl.ConfigError):
            pl._validate_config(tiny_cfg(tmp_path, labeled_fraction=0.0))
        with pytest.raises(pl.ConfigError):
            pl._validate_config(tiny_cfg(tmp_path, hidden_dim=30, num_heads=4))


class TestStages:
    def test_corpus_refuses_overwrite_without_force(self, trained):
        with pytest.raises(pl.DataError, match="--force"):
            pl.stage_corpus(trained)

    def test_corpus_rerun_with_force_is_byte_identical(self, trained):
        paths = pl.paths_for(trained)
        before = open(paths.corpus, "rb").read()
        schema_before = open(paths.schemas, "rb").read()
        pl.stage_corpus(trained, force=True)
        assert open(paths.corpus, "rb").read() == before
        assert open(paths.schemas, "rb").read() == schema_before

    def test_benchmark_splits_are_stable(self, trained):
        a = pl.load_benchmark(trained)
        b = pl.load_benchmark(trained)
        assert [d.schema_id for d in a.dev] == [d.schema_id for d in b.dev]
        assert len(a.labeled) + len(a.unlabeled) == len(a.train)
        assert all(t.gold_rewrite is None for d in a.unlabeled for t in d.turns)

    def test_checkpoint_round_trip_preserves_behaviour(self, trained):
        paths = pl.paths_for(trained)
        rewriter, _, _, manifest = pl.load_pair_checkpoint(paths.ckpt("warmup", 0))
        assert manifest["kind"] == "rewrite-pair"
        bench = pl.load_benchmark(trained)
        turn = bench.dev[0].turns[0]
        out1 = sm.rewrite_text(rewriter, [], turn.utterance)
        rewriter2, _, _, _ = pl.load_pair_checkpoint(paths.ckpt("warmup", 0))
        assert sm.rewrite_text(rewriter2, [], turn.utterance) == out1

    def test_checkpoint_bytes_stable(self, trained, tmp_path):
        paths = pl.paths_for(trained)
        rewriter, simplifier, registry, manifest = pl.load_pair_checkpoint(
            paths.ckpt("warmup", 0))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ck.save_checkpoint(p1, {"kind": "x", "vocab": manifest["vocab"]}, registry)
        ck.save_checkpoint(p2, {"kind": "x", "vocab": manifest["vocab"]}, registry)
        assert p1.read_bytes() == p2.read_bytes()

    def test_parser_checkpoint_rejects_grammar_mismatch(self, trained, tmp_path):
        paths = pl.paths_for(trained)
        manifest, tensors = ck.load_checkpoint(paths.ckpt("parser", 0))
        manifest["grammar_version"] = "0"
        bad = tmp_path / "bad.ckpt"
        ck.save_checkpoint(bad, manifest, tensors)
        with pytest.raises(ck.CheckpointError, match="grammar version"):
            pl.load_parser_checkpoint(bad)

    def test_dual_requires_warmup(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "fresh")
        pl.stage_corpus(cfg)
        with pytest.raises(pl.DependencyError):
            pl.stage_dual(cfg, seed=0)

    def test_lms_depend_on_corpus(self, tmp_path):
        cfg = tiny_cfg(tmp_path / "nocorpus")
        with pytest.raises(pl.DependencyError):
            pl.stage_lms(cfg, seed=0)

    def test_eval_reruns_identically(self, trained):
        a = pl.run_eval(trained, seed=0)
        b = pl.run_eval(trained, seed=0)
        assert a.scalars == b.scalars

    def test_infer_produces_rewrite_and_valid_sql(self, trained):
        bench = pl.load_benchmark(trained)
        d = bench.dev[0]
        rewritten, sql = pl.run_infer(trained, d.turns[1].utterance,
                                      [d.turns[0].utterance], d.schema_id)
        assert isinstance(rewritten, str) and rewritten
        schema = bench.schemas[d.schema_id]
        sc.validate_ast(sc.read_sql(sql, schema), schema)

    def test_analyze_partitions_errors(self, trained):
        report = pl.run_analyze(trained, seed=0)
        assert report.overall.phase1 + report.overall.phase2 == report.overall.errors
        eval_report = pl.run_eval(trained, seed=0)
        assert report.overall.error_rate == pytest.approx(
            1.0 - eval_report.scalars["question_match"], abs=1e-9)
        paths = pl.paths_for(trained)
        assert os.path.exists(paths.report("analysis_phenomena_seed0.csv"))


class TestCli:
    def test_dump_grammar(self, capsys):
        assert cli.main(["dump-grammar"]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "grammar version" in out and f"{sc.NUM_RULES} rules" in out.splitlines()[0]

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[corpus]\nnope = 1\n")
        assert cli.main(["corpus", "--config", str(bad)]) == cli.EXIT_CONFIG

    def test_dependency_error_exit_code(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("DUETSQL_OUT", str(tmp_path / "cli_dep"))
        monkeypatch.delenv("DUETSQL_SEED", raising=False)
        assert cli.main(["train", "dual"]) == cli.EXIT_DEPENDENCY

    def test_data_error_exit_code(self, tmp_path, monkeypatch, capsys):
        out = tmp_path / "cli_data"
        ini = tmp_path / "tiny.ini"
        ini.write_text("[corpus]\nn_schemas = 2\ndialogues_per_schema = 3\n"
                       "aux_n_schemas = 2\nparser_aux_per_schema = 4\n"
                       "rewrite_aux_dialogues_per_schema = 2\n"
                       f"\n[run]\nout_dir = {out}\n")
        assert cli.main(["corpus", "--config", str(ini)]) == cli.EXIT_OK
        assert cli.main(["corpus", "--config", str(ini)]) == cli.EXIT_DATA
        assert cli.main(["corpus", "--config", str(ini), "--force"]) == cli.EXIT_OK

    def test_infer_cli(self, trained, capsys):
        bench = pl.load_benchmark(trained)
        d = bench.dev[0]
        code = cli.main(["infer", "--question", d.turns[1].utterance,
                         "--history", d.turns[0].utterance,
                         "--schema", d.schema_id, "--out", trained.out_dir])
        assert code == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "rewrite:" in out and "sql:" in out and "SELECT" in out

    def test_unknown_schema_is_data_error(self, trained, capsys):
        code = cli.main(["infer", "--question", "what", "--schema", "nope",
                         "--out", trained.out_dir])
        assert code == cli.EXIT_DATA


class TestManifests:
    def test_run_manifest_written_with_hashes(self, trained):
        paths = pl.paths_for(trained)
        doc = json.load(open(paths.manifest("corpus")))
        assert doc["command"] == "corpus"
        assert "corpus.jsonl" in doc["artifacts"]
        assert all(len(h) == 64 for h in doc["artifacts"].values())
        assert doc["config"]["n_schemas"] == trained.n_schemas
