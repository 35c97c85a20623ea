import json
import os

import numpy as np
import pytest

from ringcal.cli import main


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = run(["simulate", "--scenario", "recovery", "--steps", "220", "--seed", "3",
                "--out-dir", out])
    assert code == 0
    return out


class TestSimulateCommand:
    def test_outputs_exist(self, sim_dir):
        for name in (
            "trajectory.csv", "meta.txt", "states.csv", "collisions.csv",
            "speed_profile.csv", "wave_metrics.csv", "run_config.json", "truth.json",
        ):
            assert (sim_dir / name).exists()

    def test_reruns_byte_identical(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        for d in (d1, d2):
            assert run(["simulate", "--scenario", "sugiyama", "--steps", "120",
                        "--seed", "7", "--out-dir", d]) == 0
        for name in ("trajectory.csv", "states.csv", "speed_profile.csv", "wave_metrics.csv"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_unknown_scenario_exits_2(self, tmp_path):
        assert run(["simulate", "--scenario", "nosuch", "--out-dir", tmp_path]) == 2

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RINGCAL_SEED", "7")
        d1 = tmp_path / "env"
        assert run(["simulate", "--scenario", "sugiyama", "--steps", "60", "--out-dir", d1]) == 0
        d2 = tmp_path / "flag"
        monkeypatch.delenv("RINGCAL_SEED")
        assert run(["simulate", "--scenario", "sugiyama", "--steps", "60",
                    "--seed", "7", "--out-dir", d2]) == 0
        assert (d1 / "trajectory.csv").read_bytes() == (d2 / "trajectory.csv").read_bytes()


class TestRoundTrip:
    def test_smooth_then_calibrate(self, sim_dir, tmp_path):
        smooth_dir = tmp_path / "smooth"
        assert run(["smooth", "--traj", sim_dir / "trajectory.csv",
                    "--meta", sim_dir / "meta.txt", "--out-dir", smooth_dir]) == 0
        assert (smooth_dir / "smoothed.csv").exists()
        assert (smooth_dir / "perceived.csv").exists()

        cal_dir = tmp_path / "cal"
        code = run([
            "calibrate", "--traj", sim_dir / "trajectory.csv", "--meta", sim_dir / "meta.txt",
            "--out-dir", cal_dir, "--vehicles", "0,1", "--hops", "1",
            "--max-evals", "40", "--seed", "1", "--gamma-v", "0", "--gamma-kappa", "0",
        ])
        assert code == 0
        rows = (cal_dir / "results.csv").read_text().strip().splitlines()
        assert rows[0].startswith("vehicle_id,sigma_nu,sigma_a,v_star,kappa_v,objective")
        assert len(rows) == 3  # header + two vehicles
        assert (cal_dir / "filtered_0.csv").exists()
        report = json.loads((cal_dir / "report.json").read_text())
        assert set(report["per_vehicle"]) == {"0", "1"}

    def test_recover_scores_results(self, sim_dir, tmp_path):
        cal_dir = tmp_path / "cal2"
        assert run([
            "calibrate", "--traj", sim_dir / "trajectory.csv", "--meta", sim_dir / "meta.txt",
            "--out-dir", cal_dir, "--vehicles", "0", "--hops", "1",
            "--max-evals", "30", "--seed", "2",
        ]) == 0
        rec_dir = tmp_path / "rec"
        assert run(["recover", "--results", cal_dir / "results.csv",
                    "--truth", sim_dir / "truth.json", "--out-dir", rec_dir]) == 0
        lines = (rec_dir / "recovery.csv").read_text().strip().splitlines()
        assert lines[0] == "parameter,truth,mean_error,sd_error,mean_abs_error,biased"
        assert len(lines) == 5


class TestMetricsCommand:
    def test_free_flow_empty_wave_speed(self, tmp_path):
        sim = tmp_path / "free"
        assert run(["simulate", "--scenario", "tadaki", "--n", "6", "--steps", "400",
                    "--seed", "1", "--out-dir", sim]) == 0
        met = tmp_path / "met"
        assert run(["metrics", "--states", sim / "states.csv", "--meta", sim / "meta.txt",
                    "--out-dir", met, "--burn-in", "60"]) == 0
        lines = (met / "wave_metrics.csv").read_text().strip().splitlines()
        first_field = lines[1].split(",")[0]
        assert first_field == ""  # absent wave speed encoded as empty


class TestClusterCommand:
    def test_labels_from_results_csv(self, tmp_path):
        results = tmp_path / "results.csv"
        rng = np.random.default_rng(0)
        rows = ["vehicle_id,sigma_nu,sigma_a,v_star,kappa_v,objective,converged"]
        for i in range(22):
            blob = (0.4, 10.0, 0.2) if i < 11 else (1.2, 12.0, 0.6)
            rows.append(
                f"{i},0.26,{blob[0] + 0.01 * rng.normal():.4f},"
                f"{blob[1] + 0.01 * rng.normal():.4f},{blob[2] + 0.001 * rng.normal():.4f},0,1"
            )
        results.write_text("\n".join(rows) + "\n")
        out = tmp_path / "cluster"
        assert run(["cluster", "--results", results, "--out-dir", out, "--clusters", "2"]) == 0
        lines = (out / "labels.csv").read_text().strip().splitlines()
        assert len(lines) == 23
        labels = [int(l.split(",")[1]) for l in lines[1:]]
        assert len(set(labels[:11])) == 1 and len(set(labels[11:])) == 1


class TestScenarioSweep:
    def test_tadaki_sweep(self, tmp_path):
        out = tmp_path / "sweep"
        assert run(["scenario", "tadaki", "--n", "6..14", "--step", "8",
                    "--steps", "300", "--seed", "5", "--out-dir", out]) == 0
        fd = (out / "fundamental_diagram.csv").read_text().strip().splitlines()
        assert fd[0] == "density,mean_speed,flow,n_vehicles,v_range_mean"
        assert len(fd) == 3
        assert (out / "n006" / "states.csv").exists()

    def test_unknown_sweep_exits_2(self, tmp_path):
        assert run(["scenario", "nosuch", "--n", "4..6", "--out-dir", tmp_path]) == 2


class TestConfigFile:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"simulate": {"scenario": "sugiyama", "bogus": 1}}))
        assert run(["--config", cfg, "simulate", "--out-dir", tmp_path / "o"]) == 2

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"simulte": {}}))
        assert run(["--config", cfg, "simulate", "--out-dir", tmp_path / "o"]) == 2

    def test_config_supplies_defaults(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 7, "simulate": {"steps": 60, "scenario": "sugiyama"}}))
        d1 = tmp_path / "viacfg"
        assert run(["--config", cfg, "simulate", "--out-dir", d1]) == 0
        echo = json.loads((d1 / "run_config.json").read_text())
        assert echo["options"]["steps"] == 60
        assert echo["options"]["seed"] == 7

    def test_empty_trajectory_exits_2(self, tmp_path):
        traj = tmp_path / "t.csv"
        traj.write_text("")
        meta = tmp_path / "m.txt"
        meta.write_text("dt=0.333\ncircumference=230\nvehicle_lengths=4.0\n")
        assert run(["smooth", "--traj", traj, "--meta", meta, "--out-dir", tmp_path / "o"]) == 2
