import json

import numpy as np
import pytest

from lrloe import dataio
from lrloe.nn import CheckpointError
from lrloe.sensors import NoiseConfig, WorldConfig, get_profile, simulate
from lrloe.train import Agent, TrainerConfig

WORLD = WorldConfig()


@pytest.fixture
def traj():
    return simulate(get_profile("medium", duration=3.0), WORLD, NoiseConfig(rng_seed=1))


def test_round_trip_is_bit_exact(tmp_path, traj):
    path = tmp_path / "d.csv"
    dataio.save_dataset(traj, path, comment="two\nlines")
    back = dataio.load_dataset(path)
    for f in ("t", "q_true", "gyro", "acc", "mag"):
        assert np.array_equal(getattr(back, f), getattr(traj, f))
    assert back.T == 0.01


def test_imu_only_file(tmp_path, traj):
    imu = dataio.Trajectory(traj.t, None, None, traj.gyro, traj.acc, traj.mag)
    path = tmp_path / "imu.csv"
    dataio.save_dataset(imu, path)
    back = dataio.load_dataset(path)
    assert back.q_true is None
    assert np.array_equal(back.gyro, traj.gyro)


def lines_of(traj):
    return dataio.dataset_text(traj).splitlines()


def write(tmp_path, lines):
    path = tmp_path / "bad.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda row: row.rsplit(",", 1)[0], "row 6: expected 14 columns"),
        (lambda row: row.replace(row.split(",")[2], "abc", 1), "row 6: non-numeric"),
        (lambda row: row.replace(row.split(",")[2], "nan", 1), "row 6: NaN"),
    ],
)
def test_malformed_row_is_named(tmp_path, traj, mutate, message):
    lines = lines_of(traj)
    lines[5] = mutate(lines[5])
    with pytest.raises(dataio.DatasetError, match=message):
        dataio.load_dataset(write(tmp_path, lines))


def test_non_monotonic_time_is_named(tmp_path, traj):
    lines = lines_of(traj)
    lines[7], lines[8] = lines[8], lines[7]
    with pytest.raises(dataio.DatasetError, match="row 9: time is not strictly increasing"):
        dataio.load_dataset(write(tmp_path, lines))


def test_non_unit_quaternion_is_named(tmp_path, traj):
    lines = lines_of(traj)
    cells = lines[3].split(",")
    cells[10] = "0.5"
    cells[11:] = ["0", "0", "0"]
    lines[3] = ",".join(cells)
    with pytest.raises(dataio.DatasetError, match="row 4: quaternion"):
        dataio.load_dataset(write(tmp_path, lines))


def test_bad_header_and_grid(tmp_path, traj):
    lines = lines_of(traj)
    with pytest.raises(dataio.DatasetError, match="header"):
        dataio.load_dataset(write(tmp_path, ["a,b,c"] + lines[1:]))
    cells = lines[10].split(",")
    cells[0] = repr(float(cells[0]) + 0.004)
    with pytest.raises(dataio.DatasetError, match="row 11: sample grid"):
        dataio.load_dataset(write(tmp_path, lines[:10] + [",".join(cells)] + lines[11:]))


def test_sample_period_inferred_and_checked(tmp_path):
    slow = simulate(get_profile("simple", duration=1.0), WorldConfig(T=0.02), NoiseConfig())
    path = tmp_path / "slow.csv"
    dataio.save_dataset(slow, path)
    with pytest.raises(dataio.DatasetError, match="sample period"):
        dataio.load_dataset(path)
    assert dataio.load_dataset(path, expected_T=0.02).T == 0.02


def test_synthetic_file_infers_100hz(tmp_path):
    traj = dataio.synthetic_dataset(seed=0, duration=5.0)
    path = tmp_path / "syn.csv"
    dataio.save_dataset(traj, path, comment=dataio.SYNTHETIC_NOTE)
    assert dataio.load_dataset(path).T == 0.01
    assert path.read_text().startswith("# synthetic")


def test_split_windows(traj):
    sp = dataio.SplitSpec.halves(len(traj))
    assert sp.episode_len == 1000
    train, infer = sp.train(traj), sp.infer(traj)
    assert len(train) + len(infer) == len(traj)
    assert train.t[-1] < infer.t[0]
    with pytest.raises(ValueError):
        dataio.SplitSpec(0, 10, 5)
    with pytest.raises(ValueError):
        dataio.SplitSpec(0, 10, 10 ** 6).train(traj)


def test_full_window_episode_is_deterministic(traj):
    sp = dataio.SplitSpec(50, 150, 300, 100)
    ep = dataio.sample_episode(traj, sp, None, np.random.default_rng(0))
    assert np.array_equal(ep.t, traj.t[50:150])
    with pytest.raises(ValueError):
        dataio.sample_episode(traj, sp, 101, np.random.default_rng(0))


def test_episodes_never_cross_into_inference_window():
    traj = dataio.synthetic_dataset(seed=1, duration=30.0)
    sp = dataio.SplitSpec.halves(len(traj))
    rng = np.random.default_rng(1)
    starts = set()
    for _ in range(10_000):
        ep = dataio.sample_episode(traj, sp, 1000, rng)
        assert len(ep) == 1000
        assert ep.t[-1] < traj.t[sp.train_stop]
        starts.add(ep.t[0])
    assert len(starts) == sp.train_stop - 1000 + 1


def test_config_round_trip(tmp_path):
    cfg = TrainerConfig(seed=7, hidden=(32, 16, 8), entropy_target=-40.0)
    path = tmp_path / "c.json"
    dataio.save_config(cfg, path)
    assert dataio.load_config(path) == cfg
    obj = json.loads(path.read_text())
    assert set(obj["trainer"]) == set(TrainerConfig().to_dict())


def test_config_defaults_and_overrides():
    cfg = dataio.parse_config({"trainer": {"batch": 64}}, {"seed": 3})
    assert (cfg.batch, cfg.seed, cfg.horizon, cfg.lr_actor) == (64, 3, 1000, 1e-4)


@pytest.mark.parametrize(
    "obj",
    [{"trainer": {"batchsize": 3}}, {"extra": 1}, {"version": 99}, {"trainer": {"gamma": 2.0}}, []],
)
def test_config_rejects_bad_input(obj):
    with pytest.raises(dataio.ConfigError):
        dataio.parse_config(obj)


def test_config_rejects_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(dataio.ConfigError):
        dataio.load_config(path)


def test_checkpoint_single_bit_corruption(tmp_path):
    agent = Agent(TrainerConfig(hidden=(16, 12, 8)))
    path = tmp_path / "a.ckpt"
    dataio.save_checkpoint(agent.to_bytes(), path)
    back, _ = dataio.load_checkpoint(path)
    assert all(np.array_equal(a, b) for a, b in zip(agent.snapshot(), back.snapshot()))
    data = path.read_bytes()
    rng = np.random.default_rng(2)
    for pos in rng.choice(len(data), 25, replace=False):
        bad = bytearray(data)
        bad[pos] ^= 1 << int(rng.integers(8))
        path.write_bytes(bytes(bad))
        with pytest.raises(CheckpointError):
            dataio.load_checkpoint(path)


def test_training_log_round_trip(tmp_path):
    recs = [
        {"step": 1000, "episode_cost": 0.1, "drift": float("nan"), "lambda": 1.0, "alpha": 1e-3, "validation": 0.5},
        {"step": 2000, "episode_cost": 0.05, "drift": -0.2, "lambda": 0.9, "alpha": 2e-3, "validation": 0.25},
    ]
    path = tmp_path / "log.csv"
    path.write_text(dataio.training_log_text(recs))
    lg = dataio.read_training_log(path)
    assert np.array_equal(lg["step"], [1000, 2000])
    assert np.isnan(lg["drift"][0]) and lg["drift"][1] == -0.2
    path.write_text(",".join(dataio.LOG_COLUMNS) + "\n")
    with pytest.raises(dataio.DatasetError, match="no data"):
        dataio.read_training_log(path)
