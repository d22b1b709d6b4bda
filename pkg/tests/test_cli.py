import csv
import json

import pytest

from redsplan.cli import ConfigError, load_config, run_cli, substream


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_precedence(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 3\nn: 7\ngen-data:\n  horizon: 9\n")
        cfg = load_config("gen-data", str(p), {"n": "11"})
        assert (cfg["seed"], cfg["n"], cfg["horizon"]) == (3, 11, 9)

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("bogus: 1\n")
        with pytest.raises(ConfigError):
            load_config("gen-data", str(p), {})

    def test_bad_type(self):
        with pytest.raises(ConfigError):
            load_config("gen-data", None, {"n": "many"})

    def test_substreams(self):
        assert substream(1, "datagen") == substream(1, "datagen")
        assert substream(1, "datagen") != substream(2, "datagen")
        assert substream(1, "train/member-0") != substream(1, "train/member-1")


class TestCommands:
    def test_selftest(self, tmp_path):
        assert run_cli(["selftest", "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["passed"]

    def test_gen_data_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli(["gen-data", "--n", "100", "--seed", "7", "--out", str(out)]) == 0
        ma = (a / "dataset.jsonl.manifest.json").read_text()
        assert ma == (b / "dataset.jsonl.manifest.json").read_text()
        assert json.loads(ma)["count"] == 100
        for name in ("report.json", "samples.csv", "timings.csv"):
            assert (a / name).exists()

    def test_invalid_input(self, tmp_path, capsys):
        assert run_cli(["gen-data", "--n", "0", "--out", str(tmp_path)]) == 2
        assert run_cli(["train", "--out", str(tmp_path)]) == 2
        assert run_cli(["simulate", "--scenario", "rush", "--out", str(tmp_path)]) == 2
        assert run_cli(["nonsense"]) == 2
        assert not list(tmp_path.glob(".partial-*"))

    def test_runtime_failure(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        assert run_cli(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 1
        assert not list((tmp_path / "o").iterdir())

    def test_bench_columns(self, tmp_path):
        assert run_cli(["bench", "--n", "2", "--horizon", "10", "--n-obs", "2", "--n-e", "2",
                        "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "timings.csv")
        assert len(rows) == 2
        for col in ("t_MIQP", "t_NN", "t_QP", "t_FP", "t_s", "t_p"):
            assert col in rows[0]
        for r in rows:
            assert float(r["t_p"]) <= float(r["t_s"])

    def test_pipeline(self, tmp_path):
        data, models = tmp_path / "data", tmp_path / "models"
        assert run_cli(["gen-data", "--n", "30", "--horizon", "8", "--out", str(data)]) == 0
        assert run_cli(["train", "--data", str(data / "dataset.jsonl"), "--n-e", "2", "--epochs", "3",
                        "--hidden", "8", "--out", str(models)]) == 0
        paths = [str(models / "model_0.npz"), str(models / "model_1.npz")]
        ev = tmp_path / "eval"
        assert run_cli(["eval-open", "--data", str(data / "dataset.jsonl"), "--models", *paths,
                        "--out", str(ev)]) == 0
        rep = json.loads((ev / "report.json").read_text())
        assert rep["n_samples"] == 30 and len(rep["member_misclass"]) == 2
        sim = tmp_path / "sim"
        assert run_cli(["simulate", "--planner", "reds", "--models", *paths, "--horizon", "8",
                        "--episodes", "1", "--duration", "2", "--traj", "true", "--out", str(sim)]) == 0
        assert (sim / "traj_0.csv").exists()
        assert len(read_csv(sim / "samples.csv")) == 1
