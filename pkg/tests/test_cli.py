import csv
import glob
import json
import os

import numpy as np
import pytest

from adaptau.cli import main, parse_grid, read_config_file
from adaptau.dataset import parse_interactions, write_adjacency_list, zipf_interactions

FAST = ["--epochs", "2", "--dim", "8", "--negatives", "8", "--batch", "128", "--lr", "0.01"]


@pytest.fixture(scope="module")
def raw_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("raw") / "data.txt"
    write_adjacency_list(zipf_interactions(60, 100, mean_degree=12, seed=0), path)
    return path


@pytest.fixture(scope="module")
def prepared(raw_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    assert main(["prepare", "--dataset", str(raw_file), "--out", str(out), "--k-core", "2", "--seed", "0"]) == 0
    return out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def only_run(out, command):
    dirs = glob.glob(os.path.join(out, f"{command}-*"))
    assert len(dirs) == 1, dirs
    return dirs[0]


class TestConfigParsing:
    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\ntrain.lr = 0.5\nepochs=3  # trailing\n")
        assert read_config_file(cfg) == {"lr": "0.5", "epochs": "3"}

    def test_grid_forms(self):
        assert parse_grid("0.1:0.3:0.1") == pytest.approx([0.1, 0.2, 0.3])
        assert parse_grid("0.05,0.5") == [0.05, 0.5]
        assert len(parse_grid(None)) == 20

    def test_flags_override_file(self, prepared, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("train.tau = 0.7\nepochs = 1\ndim = 4\n")
        out = tmp_path / "runs"
        argv = ["train", "--dataset", str(prepared), "--config", str(cfg), "--out", str(out),
                "--strategy", "fixed-tau", "--tau", "0.2", "--negatives", "4"]
        assert main(argv) == 0
        snapshot = (open(os.path.join(only_run(out, "train"), "config.txt")).read())
        assert "tau = 0.2" in snapshot and "d = 4" in snapshot and "epochs = 1" in snapshot

    def test_unknown_key_is_usage_error(self, prepared, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("warp = 9\n")
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", str(prepared), "--config", str(cfg), "--out", str(tmp_path)])
        assert exc.value.code == 2


class TestPrepare:
    def test_outputs_and_stats(self, prepared):
        stats = dict(rows(prepared / "stats.csv")[1:])
        assert int(stats["n"]) > 0 and float(stats["density"]) > 0
        train = parse_interactions(prepared / "train.txt")
        assert len(train) > 0

    def test_byte_identical_rerun(self, raw_file, prepared, tmp_path):
        assert main(["prepare", "--dataset", str(raw_file), "--out", str(tmp_path), "--k-core", "2", "--seed", "0"]) == 0
        for name in ("train.txt", "test.txt", "stats.csv"):
            assert (tmp_path / name).read_bytes() == (prepared / name).read_bytes()

    def test_k_core_one_noop(self, raw_file, tmp_path):
        assert main(["prepare", "--dataset", str(raw_file), "--out", str(tmp_path), "--k-core", "1"]) == 0
        stats = dict(rows(tmp_path / "stats.csv")[1:])
        assert int(stats["interactions"]) == len(parse_interactions(raw_file))

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["prepare", "--dataset", str(tmp_path / "nope.txt"), "--out", str(tmp_path)])
        assert exc.value.code != 0

    def test_malformed_file_exit_1(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("0 1\nx y\n")
        assert main(["prepare", "--dataset", str(bad), "--out", str(tmp_path)]) == 1


class TestSynth:
    def test_zipf(self, tmp_path):
        assert main(["synth", "--kind", "zipf", "--out", str(tmp_path)]) == 0
        assert len(parse_interactions(tmp_path / "zipf.txt")) > 1000


class TestTrain:
    def test_adaptive_run_directory(self, prepared, tmp_path, capsys):
        argv = ["train", "--dataset", str(prepared), "--out", str(tmp_path), "--strategy", "adap-tau", *FAST]
        assert main(argv) == 0
        assert "tau0=" in capsys.readouterr().out
        run = only_run(tmp_path, "train")
        for name in ("config.txt", "history.csv", "temperature_log.csv", "user_tau.csv",
                     "checkpoint_final.bin", "metrics.csv", "group_recall.csv", "summary.json"):
            assert os.path.exists(os.path.join(run, name)), name
        assert len(rows(os.path.join(run, "temperature_log.csv"))) == 3
        assert rows(os.path.join(run, "user_tau.csv"))[0] == ["user", "group", "tau_u", "loss_u"]
        assert 0 <= json.load(open(os.path.join(run, "summary.json")))["recall_at_k"] <= 1

    def test_fixed_tau(self, prepared, tmp_path):
        argv = ["train", "--dataset", str(prepared), "--out", str(tmp_path), "--strategy", "fixed-tau", "--tau", "0.1", *FAST]
        assert main(argv) == 0
        taus = [float(r[2]) for r in rows(os.path.join(only_run(tmp_path, "train"), "user_tau.csv"))[1:]]
        np.testing.assert_allclose(taus, 0.1)

    def test_single_file_dataset(self, raw_file, tmp_path):
        assert main(["train", "--dataset", str(raw_file), "--out", str(tmp_path), *FAST]) == 0

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--dataset", str(tmp_path / "absent"), "--out", str(tmp_path), *FAST])
        assert exc.value.code != 0


class TestSweep:
    def test_three_point_grid(self, prepared, tmp_path):
        argv = ["sweep-tau", "--dataset", str(prepared), "--out", str(tmp_path), "--grid", "0.1,0.3,0.9", *FAST]
        assert main(argv) == 0
        run = only_run(tmp_path, "sweep-tau")
        sweep = rows(os.path.join(run, "sweep.csv"))
        assert len(sweep) == 4
        best = rows(os.path.join(run, "best.csv"))[1]
        best_row = max(sweep[1:], key=lambda r: float(r[1]))
        assert float(best[0]) == float(best_row[0])
        assert float(best[1]) == pytest.approx(float(best_row[1]))


class TestNoise:
    def test_uniform_report_schema(self, prepared, tmp_path):
        argv = ["noise", "--dataset", str(prepared), "--out", str(tmp_path), "--noise-mode", "uniform",
                "--ratios", "0.5", "--tau", "0.2", *FAST]
        assert main(argv) == 0
        report = rows(os.path.join(only_run(tmp_path, "noise"), "noise_report.csv"))
        assert report[0] == ["mode", "ratio", "strategy", "tau", "recall", "ndcg"]
        assert {r[2] for r in report[1:]} == {"fixed-tau", "adap-tau"}

    def test_zero_ratio_matches_train(self, prepared, tmp_path):
        common = ["--dataset", str(prepared), "--strategy", "adap-tau", "--seed", "3", *FAST]
        assert main(["noise", "--out", str(tmp_path / "n"), "--noise-mode", "uniform", "--ratios", "0", *common]) == 0
        assert main(["train", "--out", str(tmp_path / "t"), *common]) == 0
        report = rows(os.path.join(only_run(tmp_path / "n", "noise"), "noise_report.csv"))
        adaptive = [r for r in report[1:] if r[2] == "adap-tau"][0]
        metrics = dict(rows(os.path.join(only_run(tmp_path / "t", "train"), "metrics.csv"))[1:])
        assert float(adaptive[4]) == float(metrics["recall@20"])

    def test_grouped_writes_group_tau(self, prepared, tmp_path):
        argv = ["noise", "--dataset", str(prepared), "--out", str(tmp_path), "--noise-mode", "grouped",
                "--ratios", "0.1,0.2,0.3,0.4", *FAST]
        assert main(argv) == 0
        group_tau = rows(os.path.join(only_run(tmp_path, "noise"), "group_tau.csv"))
        assert len(group_tau) == 5


class TestDiagnose:
    def test_artifacts_and_exit_code(self, prepared, tmp_path):
        argv = ["diagnose", "--dataset", str(prepared), "--out", str(tmp_path), "--grid", "0.05,0.1,0.2,0.5,1.0", *FAST]
        assert main(argv) == 0
        run = only_run(tmp_path, "diagnose")
        tau0 = rows(os.path.join(run, "tau0.csv"))
        assert len(tau0) >= 2
        assert len(rows(os.path.join(run, "grad_sweep.csv"))) == 6
        oracles = rows(os.path.join(run, "oracles.csv"))
        assert all(r[4] == "pass" for r in oracles[1:])
        for name in ("condition_scan.csv", "magnitudes.csv", "config.txt"):
            assert os.path.exists(os.path.join(run, name))
