import csv
import json
import os

import numpy as np
import pytest

from hpdt import cli, envs
from hpdt.checkpoint import load_checkpoint


def write_config(tmp_path, **overrides):
    cfg = cli.default_config()
    cfg.dataset.update({"n_train_tasks": 2, "n_test_tasks": 2, "episodes_per_task": 3,
                        "demos_per_task": 2, "horizon": 24})
    cfg.model.update({"embed_dim": 8, "n_layers": 1, "context_len": 5, "demo_len": 4,
                      "k": 2, "dropout": 0.0})
    cfg.train.update({"epochs": 1, "updates_per_epoch": 2, "batch_per_task": 2})
    cfg.eval.update({"episodes_per_task": 1})
    for section, values in overrides.items():
        getattr(cfg, section).update(values) if isinstance(values, dict) else setattr(cfg, section, values)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


class TestConfig:
    def test_unknown_top_level_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 0, "bogus": 1}))
        with pytest.raises(cli.ConfigError, match="bogus"):
            cli.load_config(path)

    def test_unknown_section_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"embed_dim": 8, "wrong_knob": 3}}))
        with pytest.raises(cli.ConfigError, match="wrong_knob"):
            cli.load_config(path)

    def test_roundtrip_lossless(self, tmp_path):
        path = write_config(tmp_path)
        cfg = cli.load_config(path)
        again = cli.ExperimentConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_invalid_json_reported(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(cli.ConfigError, match="invalid JSON"):
            cli.load_config(path)


class TestGenerateData:
    def test_same_seed_identical_files(self, tmp_path):
        cfg = write_config(tmp_path)
        d1, d2 = tmp_path / "d1", tmp_path / "d2"
        for d in (d1, d2):
            assert cli.main(["generate-data", "--config", str(cfg), "--data", str(d)]) == 0
        for split in ("train", "test"):
            a = (d1 / "pointdir" / f"{split}.jsonl").read_bytes()
            b = (d2 / "pointdir" / f"{split}.jsonl").read_bytes()
            assert a == b

    def test_refuses_overwrite_without_force(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        d = tmp_path / "d"
        assert cli.main(["generate-data", "--config", str(cfg), "--data", str(d)]) == 0
        assert cli.main(["generate-data", "--config", str(cfg), "--data", str(d)]) == 1
        assert "--force" in capsys.readouterr().err
        assert cli.main(["generate-data", "--config", str(cfg), "--data", str(d),
                         "--force"]) == 0

    def test_manifest_counts_match_config(self, tmp_path):
        cfg = write_config(tmp_path)
        d = tmp_path / "d"
        cli.main(["generate-data", "--config", str(cfg), "--data", str(d)])
        manifest = json.loads((d / "pointdir" / "manifest.json").read_text())
        assert manifest["n_train_tasks"] == 2
        assert manifest["n_test_tasks"] == 2
        assert manifest["episodes_per_task"] == 3
        assert "version" in manifest and "config" in manifest

    def test_env_var_data_root(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path)
        monkeypatch.setenv("HPDT_DATA_DIR", str(tmp_path / "from_env"))
        assert cli.main(["generate-data", "--config", str(cfg)]) == 0
        assert (tmp_path / "from_env" / "pointdir" / "train.jsonl").exists()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data plus one trained checkpoint, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli_ws")
    cfg_path = write_config(root)
    data_dir = root / "data"
    assert cli.main(["generate-data", "--config", str(cfg_path), "--data", str(data_dir)]) == 0
    out = root / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data_dir),
                     "--out", str(out)]) == 0
    return root, cfg_path, data_dir, out / "final.ckpt"


class TestTrain:
    def test_dry_run_prints_counts(self, workspace, capsys):
        root, cfg_path, data_dir, _ = workspace
        assert cli.main(["train", "--config", str(cfg_path), "--data", str(data_dir),
                         "--dry-run"]) == 0
        out = capsys.readouterr().out
        assert "total parameters:" in out
        assert "mode: full" in out

    def test_dry_run_parameter_count_difference(self, workspace, capsys):
        root, cfg_path, data_dir, _ = workspace

        def total(mode):
            cli.main(["train", "--config", str(cfg_path), "--data", str(data_dir),
                      "--dry-run", "--mode", mode])
            out = capsys.readouterr().out
            return int([l for l in out.splitlines() if "total parameters" in l][0].split(":")[1])

        h, t_max = 8, 24  # embed_dim, horizon from the test config
        assert total("wo-t") - total("full") == h * (t_max + 1) - 2 * h

    def test_training_writes_checkpoint_and_metrics(self, workspace):
        root, cfg_path, data_dir, ckpt_path = workspace
        assert ckpt_path.exists()
        metrics = ckpt_path.parent / "metrics.csv"
        assert metrics.exists()
        text = metrics.read_text()
        assert text.startswith("# version:")
        rows = read_rows(metrics)
        assert rows[0][:3] == ["epoch", "update", "loss"]

    def test_mode_flag_sets_checkpoint_mode(self, workspace, tmp_path):
        root, cfg_path, data_dir, _ = workspace
        out = tmp_path / "pdt_run"
        assert cli.main(["train", "--config", str(cfg_path), "--data", str(data_dir),
                         "--mode", "pdt", "--out", str(out)]) == 0
        ckpt = load_checkpoint(out / "final.ckpt")
        assert ckpt.config.mode == "pdt_baseline"

    def test_missing_dataset_is_reported(self, workspace, tmp_path, capsys):
        root, cfg_path, _, _ = workspace
        assert cli.main(["train", "--config", str(cfg_path), "--data",
                         str(tmp_path / "nope")]) == 1
        assert "generate-data" in capsys.readouterr().err


class TestEval:
    def test_single_episode_std_zero(self, workspace, tmp_path):
        root, cfg_path, data_dir, ckpt_path = workspace
        report = tmp_path / "report.csv"
        assert cli.main(["eval", "--checkpoint", str(ckpt_path), "--config", str(cfg_path),
                         "--data", str(data_dir), "--episodes", "1",
                         "--out", str(report)]) == 0
        rows = read_rows(report)
        header = rows[0]
        std_idx = header.index("std_return")
        for row in rows[1:]:
            assert float(row[std_idx]) == 0.0

    def test_aggregate_is_mean_of_task_means(self, workspace, tmp_path):
        root, cfg_path, data_dir, ckpt_path = workspace
        report = tmp_path / "report.csv"
        cli.main(["eval", "--checkpoint", str(ckpt_path), "--config", str(cfg_path),
                  "--data", str(data_dir), "--episodes", "2", "--out", str(report)])
        rows = read_rows(report)
        header, body = rows[0], rows[1:]
        mean_idx = header.index("mean_return")
        tasks = [float(r[mean_idx]) for r in body if r[0] != "__aggregate__"]
        agg = [float(r[mean_idx]) for r in body if r[0] == "__aggregate__"]
        assert agg[0] == pytest.approx(np.mean(tasks), abs=1e-12)

    def test_sweep_emits_rows_per_combination(self, workspace, tmp_path):
        root, cfg_path, data_dir, ckpt_path = workspace
        report = tmp_path / "sweep.csv"
        assert cli.main(["eval", "--checkpoint", str(ckpt_path), "--config", str(cfg_path),
                         "--data", str(data_dir), "--episodes", "1",
                         "--k", "1", "--k", "2", "--out", str(report)]) == 0
        rows = read_rows(report)
        header = rows[0]
        sweep_idx = header.index("sweep")
        labels = {r[sweep_idx] for r in rows[1:]}
        assert labels == {"k=1,m_prime=4", "k=2,m_prime=4"}

    def test_report_embeds_config_and_version(self, workspace, tmp_path):
        root, cfg_path, data_dir, ckpt_path = workspace
        report = tmp_path / "r.csv"
        cli.main(["eval", "--checkpoint", str(ckpt_path), "--config", str(cfg_path),
                  "--data", str(data_dir), "--episodes", "1", "--out", str(report)])
        text = report.read_text()
        assert text.startswith("# version: hpdt")
        assert "# config:" in text

    def test_projection_export(self, workspace, tmp_path):
        root, cfg_path, data_dir, ckpt_path = workspace
        report = tmp_path / "r.csv"
        assert cli.main(["eval", "--checkpoint", str(ckpt_path), "--config", str(cfg_path),
                         "--data", str(data_dir), "--episodes", "1", "--split", "train",
                         "--out", str(report), "--project-tokens"]) == 0
        proj = tmp_path / "r_tokens.csv"
        rows = read_rows(proj)
        assert rows[0] == ["task_id", "segment_index", "x", "y"]

    def test_dump_neighbors(self, workspace, tmp_path):
        root, cfg_path, data_dir, ckpt_path = workspace
        dump = tmp_path / "neighbors.jsonl"
        assert cli.main(["eval", "--checkpoint", str(ckpt_path), "--config", str(cfg_path),
                         "--data", str(data_dir), "--episodes", "1",
                         "--out", str(tmp_path / "r.csv"), "--dump-neighbors", str(dump)]) == 0
        lines = dump.read_text().splitlines()
        assert len(lines) == 2  # one per test task
        rec = json.loads(lines[0])
        assert rec["neighbors"] and all(len(s) == 2 for s in rec["neighbors"])


class TestRepro:
    def test_unknown_suite_rejected(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["repro", "bogus"])
        assert "invalid choice" in capsys.readouterr().err

    def test_baseline_compare_bitwise_reproducible(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HPDT_DATA_DIR", str(tmp_path / "data"))
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert cli.main(["repro", "baseline-compare", "--out", str(out),
                             "--epochs", "1", "--episodes", "1"]) == 0
            outs.append((out / "summary.csv").read_text())
        # strip the version comment (it can carry a -dirty suffix that may change)
        strip = lambda t: "\n".join(l for l in t.splitlines() if not l.startswith("# version"))
        assert strip(outs[0]) == strip(outs[1])

    def test_summary_contains_all_modes_and_seeds(self, tmp_path):
        out = tmp_path / "repro"
        assert cli.main(["repro", "baseline-compare", "--out", str(out),
                         "--epochs", "1", "--episodes", "1"]) == 0
        rows = read_rows(out / "summary.csv")
        body = [r for r in rows[1:] if r[3] not in ("mean±std",)]
        modes = {r[1] for r in body}
        seeds = {r[3] for r in body}
        assert modes == {"full", "pdt_baseline"}
        assert seeds == {"0", "1", "2"}
