"""Command-line interface: ``lrloe {simulate,train,infer,compare,report}``.

Exit codes: 0 success, 2 usage error, 3 bad config, 4 bad or missing data,
5 divergence during training or filtering, 6 drift constraint violated.
The default config file is taken from ``$LRLOE_CONFIG`` when ``--config``
is not given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, quat
from .diagnostics import fit_envelope
from .nn import CheckpointError
from .sensors import (
    INFERENCE_GYRO_VAR,
    TRAIN_ACC_VAR,
    TRAIN_GYRO_VAR,
    TRAIN_MAG_VAR,
    NoiseConfig,
    ProfileSpec,
    WorldConfig,
    get_profile,
    simulate,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGENCE = 5
EXIT_CONSTRAINT = 6

CONFIG_ENV = "LRLOE_CONFIG"

log = logging.getLogger("lrloe")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} values, got {len(vals)}")
    return vals


def _noise(text: str) -> list[float]:
    return _floats(text, 3)


def _noise_config(vals, seed: int = 0) -> NoiseConfig:
    try:
        return NoiseConfig(*vals, rng_seed=seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _profile(args) -> ProfileSpec:
    if args.profile == "constant":
        amp = args.amp if args.amp is not None else [0.0]
        if len(amp) == 1:
            amp = amp * 3
        if len(amp) != 3:
            raise CliError(EXIT_CONFIG, "--amp takes one or three values")
        return ProfileSpec("constant", amplitudes=(tuple(amp),), duration=args.duration or 10.0, name="constant")
    try:
        return get_profile(args.profile, args.duration)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _load_data(path):
    try:
        return dataio.load_dataset(path)
    except (OSError, dataio.DatasetError) as exc:
        raise CliError(EXIT_DATA, str(exc)) from None


def _load_checkpoint_bytes(path) -> bytes:
    try:
        data = Path(path).read_bytes()
        from .train import Agent

        Agent.from_bytes(data)
    except (OSError, CheckpointError, ValueError, KeyError) as exc:
        raise CliError(EXIT_DATA, f"cannot load checkpoint {path}: {exc}") from None
    return data


def _trainer_config(args):
    overrides = {}
    if getattr(args, "steps", None) is not None:
        overrides["total_steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    path = args.config or os.environ.get(CONFIG_ENV)
    try:
        if path:
            return dataio.load_config(path, overrides)
        return dataio.parse_config({}, overrides)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except dataio.ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _write(path: Path, text: str) -> None:
    dataio._atomic_write(path, text.encode())


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.profile == "synthetic-recording":
        traj = dataio.synthetic_dataset(args.seed, args.duration or 100.0, _noise_config(args.noise))
        dataio.save_dataset(traj, args.out, comment=dataio.SYNTHETIC_NOTE)
        return EXIT_OK
    spec = _profile(args)
    traj = simulate(spec, WorldConfig(), _noise_config(args.noise, args.seed))
    dataio.save_dataset(traj, args.out, comment=f"simulated profile {spec.name or spec.kind}, seed {args.seed}")
    return EXIT_OK


# -- train -------------------------------------------------------------------------


def cmd_train(args) -> int:
    from . import train as tr

    cfg = _trainer_config(args)
    if args.profile:
        cfg = tr.TrainerConfig(**{**cfg.to_dict(), "profile": args.profile})
    data = None
    if args.data:
        traj = _load_data(args.data)
        if traj.q_true is None:
            raise CliError(EXIT_DATA, "training data needs ground-truth quaternion columns")
        data = tr.RecordedData(dataio.SplitSpec.halves(len(traj), cfg.horizon).train(traj))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_config(cfg, out / "config.json")
    seeds = [cfg.seed + i for i in range(args.seeds)]
    results = {}
    for s in seeds:
        c = tr.TrainerConfig(**{**cfg.to_dict(), "seed": s})
        try:
            res = tr.train(c, WorldConfig(), data, progress=args.verbose)
        except tr.TrainingDivergence as exc:
            raise CliError(EXIT_DIVERGENCE, f"seed {s}: {exc}") from None
        dataio.save_checkpoint(res.checkpoint, out / f"seed_{s}.ckpt")
        _write(out / f"train_log_{s}.csv", dataio.training_log_text(res.log))
        results[s] = res.best_validation
    best = min(results, key=lambda s: results[s])
    manifest = {
        "selected": f"seed_{best}.ckpt",
        "validation": {f"seed_{s}.ckpt": v for s, v in results.items()},
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"selected seed_{best}.ckpt (validation cost {results[best]:.6g})")
    return EXIT_OK


# -- infer / compare ------------------------------------------------------------------


def _scenario(args, default_std: float):
    noise = _noise_config(args.noise)
    if args.data:
        traj = _load_data(args.data)
        if args.window == "second-half":
            traj = dataio.SplitSpec.halves(len(traj)).infer(traj)
        std = None if args.init_from_measurement else (default_std if args.init_std is None else args.init_std)
        if std is not None and traj.q_true is None:
            raise CliError(EXIT_DATA, "data has no ground truth; use --init-from-measurement")
        name = Path(args.data).stem
        return evaluation.ReplayScenario(traj, noise, std, args.seed, name=name)
    std = default_std if args.init_std is None else args.init_std
    return evaluation.SimScenario(_profile(args), noise, std, args.seed)


def _evaluate(specs, scenario, runs, jobs, keep=False):
    try:
        return evaluation.evaluate(specs, scenario, runs, jobs, keep_estimates=keep)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None


def _write_report(report, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "comparison.csv", report.to_csv())
    _write(out / "runs.csv", report.runs_csv())
    lines = ["method,step,mean_sq_error,stderr"]
    for name, (mean, se) in report.curves.items():
        lines += [f"{name},{k},{dataio._fmt(m)},{dataio._fmt(s)}" for k, (m, s) in enumerate(zip(mean, se))]
    _write(out / "curves.csv", "\n".join(lines) + "\n")


def cmd_infer(args) -> int:
    ckpt = _load_checkpoint_bytes(args.checkpoint)
    scenario = _scenario(args, 0.1)
    spec = evaluation.MethodSpec("lrloe", policy=ckpt, deterministic=not args.stochastic)
    report, est = _evaluate([spec], scenario, args.runs, args.jobs, keep=True)
    q = est["lrloe"]
    out = Path(args.out)
    _write_report(report, out)
    gyro, meas, q_true, _ = scenario.draw([0])
    T = scenario.world.T
    rows = ["run,step,t,qw,qx,qy,qz,error_deg"]
    err = None if q_true is None else np.degrees(quat.geodesic(q_true[0], q))
    for r in range(q.shape[0]):
        for k in range(q.shape[1]):
            e = "" if err is None else dataio._fmt(err[r, k])
            rows.append(f"{r},{k},{dataio._fmt(k * T)}," + ",".join(dataio._fmt(v) for v in q[r, k]) + f",{e}")
    _write(out / "traces.csv", "\n".join(rows) + "\n")
    mean = evaluation.mean_trace(q)
    rows = ["step,t,qw,qx,qy,qz,mean_error_deg,std_error_deg"]
    for k in range(q.shape[1]):
        tail = ",," if err is None else f",{dataio._fmt(err[:, k].mean())},{dataio._fmt(err[:, k].std())}"
        rows.append(f"{k},{dataio._fmt(k * T)}," + ",".join(dataio._fmt(v) for v in mean[k]) + tail)
    _write(out / "mean_trace.csv", "\n".join(rows) + "\n")
    return EXIT_OK


def cmd_compare(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in evaluation.METHODS]
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown method(s) {', '.join(unknown)}; choose from {', '.join(evaluation.METHODS)}")
    ckpt = None
    if "lrloe" in methods:
        if not args.checkpoint:
            raise CliError(EXIT_USAGE, "method lrloe needs --checkpoint")
        ckpt = _load_checkpoint_bytes(args.checkpoint)
    scenario = _scenario(args, 0.1)
    std = scenario.init_std if scenario.init_std is not None else 0.1
    specs = [evaluation.MethodSpec(m, policy=ckpt if m == "lrloe" else None, init_std=std) for m in methods]
    report, _ = _evaluate(specs, scenario, args.runs, args.jobs)
    if not report.methods:
        raise CliError(EXIT_DATA, "comparison needs ground truth")
    _write_report(report, Path(args.out))
    sys.stdout.write(report.to_csv())
    return EXIT_OK


# -- report ---------------------------------------------------------------------------


def _kv_csv(pairs) -> str:
    return "key,value\n" + "".join(f"{k},{v}\n" for k, v in pairs)


def cmd_report(args) -> int:
    if not (args.training_log or args.runs_dir or args.checkpoint):
        raise CliError(EXIT_DATA, "no data: give --training-log, --runs-dir or --checkpoint")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    violated = False
    summary = [("alpha2", args.alpha2)]
    if args.training_log:
        try:
            lg = dataio.read_training_log(args.training_log)
        except (OSError, dataio.DatasetError) as exc:
            raise CliError(EXIT_DATA, str(exc)) from None
        rows = ["step,lambda,alpha,drift,episode_cost,validation"]
        for i in range(len(lg["step"])):
            rows.append(",".join(dataio._fmt(lg[c][i]) for c in ("step", "lambda", "alpha", "drift", "episode_cost", "validation")))
        _write(out / "multipliers.csv", "\n".join(rows) + "\n")
        d = lg["drift"][np.isfinite(lg["drift"])]
        tail = d[-max(1, len(d) // 10) :] if len(d) else d
        drift = float(np.mean(tail)) if len(tail) else float("nan")
        summary.append(("training_drift", drift))
        violated |= not drift <= -args.alpha2
    if args.runs_dir:
        curves = Path(args.runs_dir) / "curves.csv"
        try:
            with open(curves, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise CliError(EXIT_DATA, str(exc)) from None
        if not rows:
            raise CliError(EXIT_DATA, f"{curves}: no data")
        by = {}
        try:
            for r in rows:
                by.setdefault(r["method"], []).append((float(r["mean_sq_error"]), float(r["stderr"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(EXIT_DATA, f"{curves}: malformed row ({exc})") from None
        lines = ["method,eta,phi,p,coverage,converged,satisfied"]
        for name, vals in by.items():
            arr = np.array(vals)
            env = fit_envelope(arr[:, 0], arr[:, 1])
            lines.append(f"{name},{env.eta!r},{env.phi!r},{env.p!r},{env.coverage!r},{int(env.converged)},{int(env.satisfied)}")
        _write(out / "envelope.csv", "\n".join(lines) + "\n")
    if args.checkpoint:
        from .train import Agent, PolicyGain, drift_diagnostic, rollout

        agent, _ = Agent.from_bytes(_load_checkpoint_bytes(args.checkpoint))
        scenario = evaluation.SimScenario(_profile(args), _noise_config(args.noise), 0.1, args.seed)
        gyro, meas, q_true, q0 = scenario.draw(range(args.runs))
        trajs = [_as_traj(scenario, gyro[i], meas[i], q_true[i]) for i in range(args.runs)]
        ro = rollout(PolicyGain(agent.policy), trajs, q0, scenario.world)
        rep = drift_diagnostic(agent.critic, ro, args.alpha2)
        env = rep.envelope
        summary += [
            ("rollout_drift", rep.drift),
            ("max_alpha2", rep.max_alpha2),
            ("eta", env.eta),
            ("phi", env.phi),
            ("p", env.p),
            ("coverage", env.coverage),
            ("envelope_satisfied", int(env.satisfied)),
        ]
        violated |= not rep.satisfied
    _write(out / "summary.csv", _kv_csv(summary))
    sys.stdout.write(_kv_csv(summary))
    return EXIT_CONSTRAINT if violated else EXIT_OK


def _as_traj(scenario, gyro, meas, q_true):
    from .sensors import Trajectory

    n = gyro.shape[0]
    return Trajectory(np.arange(n) * scenario.world.T, q_true, None, gyro, meas[:, :3], meas[:, 3:], scenario.world.T)


# -- parser -----------------------------------------------------------------------------


def _add_source(p, runs_default: int):
    p.add_argument("--profile", default="simple", help="simulated profile name (ignored with --data)")
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--amp", type=_floats, default=None, help="rate for the constant profile")
    p.add_argument("--data", default=None, help="dataset CSV to replay instead of simulating")
    p.add_argument("--window", choices=("full", "second-half"), default="full")
    p.add_argument("--init-std", type=float, default=None)
    p.add_argument("--init-from-measurement", action="store_true")
    p.add_argument("--noise", type=_noise, default=[INFERENCE_GYRO_VAR, TRAIN_ACC_VAR, TRAIN_MAG_VAR],
                   help="gyro,acc,mag noise variances")
    p.add_argument("--runs", type=int, default=runs_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lrloe", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset CSV")
    p.add_argument("--profile", default="simple")
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--amp", type=_floats, default=None)
    p.add_argument("--noise", type=_noise, default=[TRAIN_GYRO_VAR, TRAIN_ACC_VAR, TRAIN_MAG_VAR])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one or more policies")
    p.add_argument("--config", default=None)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--data", default=None)
    g.add_argument("--profile", default=None)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="first seed (overrides the config)")
    p.add_argument("--steps", type=int, default=None, help="environment steps (overrides the config)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a trained policy and write quaternion traces")
    p.add_argument("--checkpoint", required=True)
    _add_source(p, 50)
    p.add_argument("--stochastic", action="store_true", help="sample gains instead of using the mean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("compare", help="Monte-Carlo comparison of estimators")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--methods", default="lrloe,ekf,ukf,cf,openloop")
    _add_source(p, 200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="drift and boundedness diagnostics")
    p.add_argument("--training-log", default=None)
    p.add_argument("--runs-dir", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--profile", default="simple")
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--amp", type=_floats, default=None)
    p.add_argument("--noise", type=_noise, default=[INFERENCE_GYRO_VAR, TRAIN_ACC_VAR, TRAIN_MAG_VAR])
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha2", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"lrloe {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
