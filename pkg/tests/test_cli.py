import csv
import shutil

import numpy as np
import pytest

from conftest import scenario_path
from hmflow.cli import EXIT_CHECK, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main

SHORT = """k = 2
sector.ell = 0
sector.m = 1
initial.preset = bubble_plus_bump
initial.bump_amplitude = 0.2
grid.r_min = 1e-4
grid.r_max = 1e4
grid.n = 1024
time.t_end = 0.02
time.checkpoint_dt = 0.01
analysis.local_energy_cutoffs = 0.5:5
"""


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def short_config(tmp_path):
    path = tmp_path / "short.cfg"
    path.write_text(SHORT)
    return path


class TestUsage:
    def test_no_command(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == EXIT_USAGE

    def test_unknown_suite(self):
        with pytest.raises(SystemExit) as info:
            main(["verify", "--suite", "nope"])
        assert info.value.code == EXIT_USAGE

    def test_bad_config(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("k = 0\n")
        assert main(["simulate", str(path), str(tmp_path / "out")]) == EXIT_USAGE
        assert "line 1: k:" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["simulate", str(tmp_path / "none.cfg"), str(tmp_path / "out")]) == EXIT_USAGE

    def test_bad_k(self):
        assert main(["verify", "--suite", "energy", "--k", "0"]) == EXIT_USAGE


class TestVerify:
    def test_energy(self, capsys):
        assert main(["verify", "--suite", "energy", "--k", "1", "2", "3"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("PASS energy") == 5 and "FAIL" not in out

    def test_virial(self, capsys):
        assert main(["verify", "--suite", "virial"]) == EXIT_OK
        assert "FAIL" not in capsys.readouterr().out

    def test_expansion_k2(self, capsys):
        assert main(["verify", "--suite", "expansion", "--k", "2"]) == EXIT_OK


class TestSimulate:
    def test_short_run(self, short_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["simulate", str(short_config), str(out)]) == EXIT_OK
        text = capsys.readouterr().out
        assert "status: reached_t_end" in text and "local_energy_inequality[0.5:5]" in text
        for name in ("config.txt", "ledger.csv", "termination.txt", "analysis.csv", "collisions.txt", "summary.txt"):
            assert (out / name).exists()

    def test_summary_copies_files(self, short_config, tmp_path):
        out = tmp_path / "run"
        main(["simulate", str(short_config), str(out)])
        summary = (out / "summary.txt").read_text()
        last_E = read_rows(out / "ledger.csv")[-1]["E"]
        last_d = read_rows(out / "analysis.csv")[-1]["d"]
        assert f"final_energy: {last_E}\n" in summary
        assert f"final_d: {last_d}\n" in summary

    def test_deterministic(self, short_config, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["simulate", str(short_config), str(a)])
        main(["simulate", str(short_config), str(b)])
        for name in ("ledger.csv", "analysis.csv", "summary.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_solver_failure(self, tmp_path):
        path = tmp_path / "cap.cfg"
        path.write_text(SHORT + "time.max_steps = 2\n")
        assert main(["simulate", str(path), str(tmp_path / "out")]) == EXIT_FAILURE

    def test_stationary_scenario(self, regression_runs):
        path, summary = regression_runs["stationary_q"]
        assert summary.status == "stationary"
        assert summary.n_bubbles == "1"
        assert float(summary.final_d) <= 1e-3

    def test_blowup_scenario(self, regression_runs):
        path, summary = regression_runs["blowup_k1"]
        assert summary.status == "blowup_detected"
        assert summary.t_plus != "none"
        assert "t_plus: " + summary.t_plus in (path / "summary.txt").read_text()


class TestAnalyze:
    def test_stationary_d_constant(self, regression_runs):
        path, _ = regression_runs["stationary_q"]
        d = np.array([float(r["d"]) for r in read_rows(path / "analysis.csv")])
        assert np.ptp(d) <= 1e-3

    def test_idempotent(self, regression_runs, tmp_path):
        src, _ = regression_runs["stationary_q"]
        path = tmp_path / "copy"
        shutil.copytree(src, path)
        before = (path / "analysis.csv").read_bytes(), (path / "collisions.txt").read_bytes()
        assert main(["analyze", str(path)]) == EXIT_OK
        first = (path / "analysis.csv").read_bytes(), (path / "collisions.txt").read_bytes()
        assert main(["analyze", str(path)]) == EXIT_OK
        second = (path / "analysis.csv").read_bytes(), (path / "collisions.txt").read_bytes()
        assert before == first == second

    def test_collision_report(self, regression_runs):
        path, summary = regression_runs["collision_k2"]
        text = (path / "collisions.txt").read_text()
        assert "K: 1\n" in text
        assert int(summary.interval_count) >= 1

    def test_corrupt_checkpoint(self, regression_runs, tmp_path, capsys):
        src, _ = regression_runs["stationary_q"]
        path = tmp_path / "copy"
        shutil.copytree(src, path)
        victim = sorted((path / "checkpoints").iterdir())[-1]
        raw = victim.read_bytes()
        cut = raw.index(b"\n", len(raw) // 2) + 1
        victim.write_bytes(raw[:cut] + b"1.0 not-a-number\n" + raw[cut:])
        assert main(["analyze", str(path)]) == EXIT_FAILURE
        err = capsys.readouterr().err
        assert victim.name in err and f"byte offset {cut}" in err

    def test_missing_trajectory(self, tmp_path):
        assert main(["analyze", str(tmp_path)]) == EXIT_FAILURE

    def test_threshold_order(self, regression_runs, tmp_path):
        src, _ = regression_runs["stationary_q"]
        path = tmp_path / "copy"
        shutil.copytree(src, path)
        assert main(["analyze", str(path), "--eps", "0.5", "--eta", "0.1"]) == EXIT_USAGE


class TestSweep:
    def test_two_points_concurrently(self, short_config, tmp_path):
        out = tmp_path / "sweep"
        code = main(["sweep", str(short_config), str(out), "--set", "initial.bump_amplitude=0.1;0.2",
                     "--workers", "2"])
        assert code == EXIT_OK
        rows = read_rows(out / "sweep.csv")
        assert [r["initial.bump_amplitude"] for r in rows] == ["0.1", "0.2"]
        assert all(r["status"] == "reached_t_end" for r in rows)
        assert (out / "run_000" / "ledger.csv").exists() and (out / "run_001" / "ledger.csv").exists()

    def test_bad_override(self, short_config, tmp_path):
        assert main(["sweep", str(short_config), str(tmp_path / "s"), "--set", "k=0"]) == EXIT_USAGE

    def test_scenario_files_parse(self):
        from hmflow.cli import load_config

        for name in ("stationary_q", "blowup_k1", "global_k3", "collision_k2"):
            load_config(scenario_path(name))


def test_check_failure_exit_code(tmp_path, short_config, monkeypatch, capsys):
    # a zero ledger bound cannot be met by any discrete run
    monkeypatch.setattr("hmflow.cli.LEDGER_REL_TOL", 0.0)
    assert main(["simulate", str(short_config), str(tmp_path / "out")]) == EXIT_CHECK
    assert "FAIL energy_identity_residual" in capsys.readouterr().out
