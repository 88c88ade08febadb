import json
import os

import numpy as np
import pytest

from sepkit.cli import EXIT_OK, EXIT_STARVED, EXIT_VALIDATION, main
from sepkit.config import (
    OUT_ROOT_ENV,
    RunConfig,
    config_from_dict,
    load_config,
    resolve_out_dir,
    save_config,
)
from sepkit.corpus import read_manifest
from sepkit.separator import init_params, load_checkpoint


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_defaults_carry_pipeline_constants():
    cfg = RunConfig()
    assert cfg.separator.loss_lambda == 0.9
    assert cfg.separator.silence_rate == 0.05
    assert tuple(cfg.separator.mode_proportions) == (0.25, 0.25, 0.5)
    assert cfg.engine.itt_db == 10.0
    assert cfg.engine.sst_db == 15.0
    assert cfg.engine.first_epochs == 80
    assert cfg.engine.later_epochs == 20


def test_config_roundtrip_and_unknown_key_rejection(tmp_path):
    cfg = RunConfig()
    cfg.separator.epochs = 3
    path = tmp_path / "c.json"
    save_config(cfg, path)
    save_config(cfg, tmp_path / "c2.json")
    assert path.read_bytes() == (tmp_path / "c2.json").read_bytes()
    back = load_config(path)
    assert back == cfg
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"separator": {"bogus_key": 1}})
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"bogus_top": {}})


def test_config_resolves_named_and_explicit_classes():
    cfg = RunConfig()
    assert len(cfg.corpus.resolve_classes()) == 6
    cfg.corpus.classes = "disjoint3"
    assert len(cfg.corpus.resolve_classes()) == 3
    cfg.corpus.classes = [
        {"id": 0, "name": "a", "kind": "band_noise", "band_hz": [300, 900]},
        {"id": 1, "name": "b", "kind": "tone", "band_hz": [1200, 2000],
         "params": {"freq": [1300, 1900]}},
    ]
    classes = cfg.corpus.resolve_classes()
    assert classes[1].params["freq"] == (1300, 1900)
    cfg.corpus.classes = "nope"
    with pytest.raises(ValueError):
        cfg.corpus.resolve_classes()


def test_out_root_env(tmp_path, monkeypatch):
    cfg = RunConfig()
    cfg.out_dir = "relative/run"
    monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path))
    assert resolve_out_dir(cfg) == tmp_path / "relative" / "run"
    cfg.out_dir = "/abs/run"
    assert str(resolve_out_dir(cfg)) == "/abs/run"
    monkeypatch.delenv(OUT_ROOT_ENV)
    cfg.out_dir = "plain"
    assert str(resolve_out_dir(cfg)) == "plain"


# ---------------------------------------------------------------------------
# CLI pipeline on a tiny corpus
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_cfg_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig()
    cfg.master_seed = 21
    cfg.out_dir = str(root / "run")
    cfg.corpus.classes = "disjoint3"
    cfg.corpus.duration_s = 0.5
    cfg.corpus.singles_per_class = 2
    cfg.corpus.n_train = 6
    cfg.corpus.n_val = 3
    cfg.corpus.n_eval3 = 2
    cfg.corpus.n_natural = 6
    cfg.corpus.m_range = (2, 2)
    cfg.separator.epochs = 2
    cfg.engine.iterations = 1
    cfg.engine.first_epochs = 1
    cfg.engine.later_epochs = 1
    path = root / "config.json"
    save_config(cfg, path)
    return path, root / "run"


@pytest.fixture(scope="module")
def synthed(tiny_cfg_path):
    cfg_path, run_dir = tiny_cfg_path
    assert main(["synth", "--config", str(cfg_path)]) == EXIT_OK
    return cfg_path, run_dir


@pytest.fixture(scope="module")
def trained(synthed):
    cfg_path, run_dir = synthed
    assert main(["train", "--config", str(cfg_path)]) == EXIT_OK
    return cfg_path, run_dir


def test_synth_counts_and_config_echo(synthed):
    cfg_path, run_dir = synthed
    assert (run_dir / "config.json").exists()
    assert len(read_manifest(run_dir / "corpus" / "train.jsonl")) == 6
    assert len(read_manifest(run_dir / "corpus" / "natural.jsonl")) == 6
    for rec in read_manifest(run_dir / "corpus" / "natural.jsonl"):
        assert 2 <= len(rec.labels) <= 3


def test_synth_rerun_is_byte_identical(synthed):
    cfg_path, run_dir = synthed
    before = (run_dir / "corpus" / "train.jsonl").read_bytes()
    wav = sorted((run_dir / "corpus" / "clips").glob("*.wav"))[0]
    wav_before = wav.read_bytes()
    assert main(["synth", "--config", str(cfg_path)]) == EXIT_OK
    assert (run_dir / "corpus" / "train.jsonl").read_bytes() == before
    assert wav.read_bytes() == wav_before


def test_train_writes_checkpoint_and_log(trained):
    _, run_dir = trained
    params, stft_cfg, n_classes, seed = load_checkpoint(run_dir / "checkpoint.json")
    assert n_classes == 3 and seed == 21
    log = (run_dir / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,mean_loss,val_sdri,val_sisdri"
    assert len(log) == 1 + 2  # header + one row per epoch


def test_train_zero_epochs_equals_initialization(synthed):
    cfg_path, run_dir = synthed
    assert main([
        "train", "--config", str(cfg_path), "--epochs", "0",
        "--checkpoint-name", "ckpt0.json", "--log-name", "log0.csv",
    ]) == EXIT_OK
    params, stft_cfg, n_classes, _ = load_checkpoint(run_dir / "ckpt0.json")
    fresh = init_params(stft_cfg.n_bins, n_classes, step_size=params.step_size)
    assert np.array_equal(params.weights, fresh.weights)
    assert np.array_equal(params.bias, fresh.bias)
    assert np.array_equal(params.mix_gate, fresh.mix_gate)


def test_engine_zero_iterations_is_checkpoint_passthrough(trained):
    cfg_path, run_dir = trained
    assert main(["engine", "--config", str(cfg_path), "--iterations", "0"]) == EXIT_OK
    a = json.loads((run_dir / "checkpoint.json").read_text())
    b = json.loads((run_dir / "checkpoint_engine.json").read_text())
    assert a["arrays"] == b["arrays"]
    assert not (run_dir / "reports" / "iterations.csv").exists()


def test_engine_runs_and_reports(trained):
    cfg_path, run_dir = trained
    code = main(["engine", "--config", str(cfg_path)])
    assert code in (EXIT_OK, EXIT_STARVED)
    rows = (run_dir / "reports" / "iterations.csv").read_text().splitlines()
    assert rows[0].startswith("iteration,clips_processed,accepted_itt,accepted_sst")
    assert len(rows) == 2  # one iteration
    assert (run_dir / "checkpoint_iter1.json").exists()
    assert (run_dir / "reports" / "timing.csv").exists()


def test_engine_starved_exit_code(trained, tmp_path):
    cfg_path, run_dir = trained
    # impossible thresholds starve every iteration
    code = main(["engine", "--config", str(cfg_path), "--itt-db", "200", "--sst-db", "300"])
    assert code == EXIT_STARVED


def test_eval_writes_csvs(trained):
    cfg_path, run_dir = trained
    assert main(["eval", "--config", str(cfg_path)]) == EXIT_OK
    sup = (run_dir / "eval" / "eval_supervised.csv").read_text().splitlines()
    assert sup[0] == "split,clip_id,label,query_mode,sdr_db,sdri_db,sisdr_db,sisdri_db"
    assert any("AGGREGATE" in line for line in sup)
    assert any(line.startswith("eval3,") for line in sup)
    sil = (run_dir / "eval" / "eval_silence.csv").read_text().splitlines()
    assert any("AGGREGATE" in line for line in sil)
    agg = (run_dir / "eval" / "eval_remix_aggregate.csv").read_text().splitlines()
    assert agg[0].startswith("mean_re_sdr_db,prop_re_sdr_gt_15db")
    assert len(agg) == 2


def test_eval_is_deterministic(trained):
    cfg_path, run_dir = trained
    before = (run_dir / "eval" / "eval_supervised.csv").read_bytes()
    assert main(["eval", "--config", str(cfg_path)]) == EXIT_OK
    assert (run_dir / "eval" / "eval_supervised.csv").read_bytes() == before


def test_report_renders_and_is_idempotent(trained):
    cfg_path, run_dir = trained
    assert main(["report", "--run-dir", str(run_dir)]) == EXIT_OK
    summary = (run_dir / "report" / "summary.txt").read_bytes()
    assert main(["report", "--run-dir", str(run_dir)]) == EXIT_OK
    assert (run_dir / "report" / "summary.txt").read_bytes() == summary
    assert (run_dir / "report" / "table_supervised.csv").exists()


def test_report_missing_eval_csv_names_file(tmp_path, capsys):
    (tmp_path / "empty_run").mkdir()
    code = main(["report", "--run-dir", str(tmp_path / "empty_run")])
    assert code == EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "eval_supervised.csv" in err


def test_validation_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad)]) == EXIT_VALIDATION
    assert main(["train", "--config", str(bad)]) == EXIT_VALIDATION
    # missing corpus
    cfg = RunConfig()
    cfg.out_dir = str(tmp_path / "norun")
    ok = tmp_path / "ok.json"
    save_config(cfg, ok)
    assert main(["train", "--config", str(ok)]) == EXIT_VALIDATION
    assert main(["engine", "--config", str(ok)]) == EXIT_VALIDATION
