import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lrloe import cli, dataio
from lrloe.train import Agent, TrainerConfig


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "agent.ckpt"
    dataio.save_checkpoint(Agent(TrainerConfig(hidden=(16, 12, 8))).to_bytes(), path)
    return path


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "lrloe", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "train", "infer", "compare", "report"):
        assert cmd in out.stdout


def test_simulate_static_and_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("simulate", "--profile", "constant", "--amp", "0", "--duration", "2", "--noise", "0,0,0", "--out", a) == 0
    traj = dataio.load_dataset(a)
    assert len(traj) == 200 and not traj.gyro.any()
    assert np.allclose(traj.q_true, [1.0, 0, 0, 0])
    assert run("simulate", "--profile", "constant", "--amp", "0", "--duration", "2", "--noise", "0,0,0", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_simulate_default_noise(tmp_path):
    out = tmp_path / "s.csv"
    assert run("simulate", "--profile", "constant", "--duration", "100", "--seed", "3", "--out", out) == 0
    g = dataio.load_dataset(out).gyro
    assert np.var(g) == pytest.approx(0.0003, rel=0.05)


def test_simulate_synthetic_recording(tmp_path):
    out = tmp_path / "rec.csv"
    assert run("simulate", "--profile", "synthetic-recording", "--duration", "5", "--out", out) == 0
    assert "synthetic" in out.read_text().splitlines()[0]


def test_usage_and_config_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("simulate")
    assert exc.value.code == cli.EXIT_USAGE
    assert run("simulate", "--profile", "wobbly", "--out", tmp_path / "x.csv") == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"trainer": {"no_such_key": 1}}))
    assert run("train", "--config", bad, "--steps", "10", "--out-dir", tmp_path / "t") == cli.EXIT_CONFIG
    assert "no_such_key" in capsys.readouterr().err


def test_config_from_environment(tmp_path, monkeypatch):
    bad = tmp_path / "env.json"
    bad.write_text("{broken")
    monkeypatch.setenv(cli.CONFIG_ENV, str(bad))
    assert run("train", "--steps", "10", "--out-dir", tmp_path / "t") == cli.EXIT_CONFIG


def test_missing_data_file(tmp_path, ckpt):
    assert run("infer", "--checkpoint", ckpt, "--data", tmp_path / "nope.csv", "--out", tmp_path / "o") == cli.EXIT_DATA
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"junk")
    assert run("infer", "--checkpoint", junk, "--runs", "1", "--out", tmp_path / "o") == cli.EXIT_DATA


def test_compare_unknown_method(tmp_path, capsys):
    assert run("compare", "--methods", "ekf,magic", "--runs", "1", "--out", tmp_path / "c") == cli.EXIT_USAGE
    assert "magic" in capsys.readouterr().err
    assert run("compare", "--methods", "lrloe", "--runs", "1", "--out", tmp_path / "c") == cli.EXIT_USAGE


def test_compare_schema_and_method_order(tmp_path, ckpt, capsys):
    out = tmp_path / "cmp"
    rc = run("compare", "--checkpoint", ckpt, "--methods", "openloop,cf,lrloe", "--runs", "3",
             "--profile", "simple", "--duration", "2", "--out", out)
    assert rc == 0
    rows = list(csv.DictReader((out / "comparison.csv").open()))
    assert [r["method"] for r in rows] == ["openloop", "cf", "lrloe"]
    assert list(rows[0])[:7] == ["method", "yaw_mean", "yaw_std", "pitch_mean", "pitch_std", "roll_mean", "roll_std"]
    assert "diverged" in rows[0]
    assert (out / "runs.csv").exists() and (out / "curves.csv").exists()
    again = tmp_path / "cmp2"
    run("compare", "--checkpoint", ckpt, "--methods", "openloop,cf,lrloe", "--runs", "3",
        "--profile", "simple", "--duration", "2", "--out", again)
    assert (out / "comparison.csv").read_bytes() == (again / "comparison.csv").read_bytes()


def test_compare_default_runs():
    args = cli.build_parser().parse_args(["compare", "--out", "x"])
    assert args.runs == 200


def test_infer_noise_free_perfect_start_is_near_zero(tmp_path, ckpt):
    data = tmp_path / "clean.csv"
    run("simulate", "--profile", "medium", "--duration", "3", "--noise", "0,0,0", "--out", data)
    out = tmp_path / "inf"
    assert run("infer", "--checkpoint", ckpt, "--data", data, "--init-std", "0", "--runs", "2", "--out", out) == 0
    rows = list(csv.DictReader((out / "mean_trace.csv").open()))
    assert len(rows) == 300
    assert max(float(r["mean_error_deg"]) for r in rows) < 1e-6
    traces = list(csv.DictReader((out / "traces.csv").open()))
    assert len(traces) == 600


def test_infer_measurement_start_without_truth(tmp_path, ckpt):
    data = tmp_path / "rec.csv"
    run("simulate", "--profile", "synthetic-recording", "--duration", "4", "--out", data)
    traj = dataio.load_dataset(data)
    imu = tmp_path / "imu.csv"
    dataio.save_dataset(dataio.Trajectory(traj.t, None, None, traj.gyro, traj.acc, traj.mag), imu)
    out = tmp_path / "o"
    assert run("infer", "--checkpoint", ckpt, "--data", imu, "--runs", "1", "--out", out) == cli.EXIT_DATA
    assert run("infer", "--checkpoint", ckpt, "--data", imu, "--init-from-measurement", "--runs", "1",
               "--out", out) == 0
    assert (out / "traces.csv").exists()


def test_deterministic_gain_is_the_small_noise_limit(ckpt):
    agent, _ = dataio.load_checkpoint(ckpt)
    s = np.array([0.01, -0.02, 0.005])
    det = agent.policy.deterministic(s)
    draws = agent.policy.sample(np.tile(s, (1000, 1)), np.random.default_rng(0)).action
    _, log_std = agent.policy.dist(s)
    se = agent.policy.k_max * np.exp(log_std) / np.sqrt(1000)
    assert np.all(np.abs(draws.mean(axis=0) - det) < 5 * se)


def test_report_without_inputs(tmp_path, capsys):
    assert run("report", "--out", tmp_path / "r") == cli.EXIT_DATA
    assert "no data" in capsys.readouterr().err
    empty = tmp_path / "log.csv"
    empty.write_text(",".join(dataio.LOG_COLUMNS) + "\n")
    assert run("report", "--training-log", empty, "--out", tmp_path / "r") == cli.EXIT_DATA


def test_report_exit_code_follows_constraint(tmp_path):
    log = tmp_path / "log.csv"
    good = [{"step": 1000 * i, "episode_cost": 0.1, "drift": -0.5, "lambda": 1.0, "alpha": 0.1, "validation": 0.1}
            for i in range(1, 5)]
    log.write_text(dataio.training_log_text(good))
    assert run("report", "--training-log", log, "--alpha2", "0.01", "--out", tmp_path / "r1") == 0
    assert run("report", "--training-log", log, "--alpha2", "0.9", "--out", tmp_path / "r2") == cli.EXIT_CONSTRAINT
    rows = list(csv.DictReader((tmp_path / "r1" / "multipliers.csv").open()))
    assert len(rows) == 4


def test_report_envelope_from_runs_dir(tmp_path):
    runs = tmp_path / "runs"
    runs.mkdir()
    t = np.arange(800)
    mean = 0.5 * 0.9**t + 0.001
    lines = ["method,step,mean_sq_error,stderr"] + [f"x,{k},{float(m)!r},0.0" for k, m in enumerate(mean)]
    (runs / "curves.csv").write_text("\n".join(lines) + "\n")
    assert run("report", "--runs-dir", runs, "--out", tmp_path / "r") == 0
    row = next(csv.DictReader((tmp_path / "r" / "envelope.csv").open()))
    assert float(row["phi"]) == pytest.approx(0.9, rel=0.05)
    assert float(row["p"]) == pytest.approx(0.001, rel=0.05)
    assert row["satisfied"] == "1"


def test_report_from_checkpoint(tmp_path, ckpt):
    rc = run("report", "--checkpoint", ckpt, "--runs", "10", "--duration", "2", "--out", tmp_path / "r")
    assert rc in (0, cli.EXIT_CONSTRAINT)
    keys = [r["key"] for r in csv.DictReader((tmp_path / "r" / "summary.csv").open())]
    assert {"rollout_drift", "eta", "phi", "p"} <= set(keys)


def test_train_smoke_writes_loadable_checkpoint(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trainer": {"eval_every": 2500, "warmup_steps": 500, "critic_lead": 500}}))
    out = tmp_path / "train"
    assert run("train", "--config", cfg, "--steps", "5000", "--seeds", "1", "--out-dir", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    agent, meta = dataio.load_checkpoint(out / manifest["selected"])
    assert agent.cfg.total_steps == 5000 and agent.cfg.horizon == 1000
    assert dataio.load_config(out / "config.json").batch == 256
    lg = dataio.read_training_log(out / "train_log_0.csv")
    assert len(lg["step"]) == 5
