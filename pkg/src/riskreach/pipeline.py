"""Run-directory stages: train, evaluate, verify, report.

Layout of a run directory::

    <run>/manifest.cfg        resolved RunConfig (feed back with --config)
    <run>/scenario.cfg        resolved scenario
    <run>/seed_<k>/           actor.txt, critic1.txt, critic2.txt,
                              cost_trunk.txt, cost_head.txt, tracker.txt,
                              history.csv, evaluation.csv, trajectories.csv,
                              verification.csv, verification_summary.csv
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nn
from .config import RunConfig, load_run_config, run_config_text
from .navsim import OBS_DIM, RobotPose, ScenarioConfig, generate_arena, load_scenario, scenario_to_text
from .reach import ReachabilityError, action_reachable_set
from .safety import safety_rate, verify_state
from .trainer import TrainingDiverged, augment, evaluate_policy, history_to_csv, save_agent, train

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class UnverifiableRun(PipelineError):
    pass


def _f(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_f(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path, required=()):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise PipelineError(f"{path}: missing columns {missing}")
        return header, list(reader)


def seed_dirs(run_dir) -> list[Path]:
    dirs = sorted(Path(run_dir).glob("seed_*"), key=lambda p: int(p.name.split("_", 1)[1]))
    if not dirs:
        raise PipelineError(f"{run_dir}: no seed_* checkpoints")
    return dirs


def load_run(run_dir) -> tuple[RunConfig, ScenarioConfig]:
    run_dir = Path(run_dir)
    manifest = run_dir / "manifest.cfg"
    if not manifest.exists():
        raise PipelineError(f"{run_dir}: missing manifest.cfg")
    cfg = load_run_config(manifest)
    return cfg, load_scenario(run_dir / "scenario.cfg")


def write_tracker(path, u, lam, epoch, u0):
    Path(path).write_text(f"u={u!r}\nlambda={lam!r}\nepoch={epoch}\nu0={u0!r}\n", encoding="utf-8")


def read_tracker(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def train_run(cfg: RunConfig, run_dir, checkpoint_every: int = 10) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    scenario = cfg.scenario_config()
    (run_dir / "scenario.cfg").write_text(scenario_to_text(scenario), encoding="utf-8")
    manifest_cfg = replace(cfg, scenario=str((run_dir / "scenario.cfg").resolve()))
    (run_dir / "manifest.cfg").write_text(run_config_text(manifest_cfg), encoding="utf-8")
    for seed in cfg.seeds:
        out = run_dir / f"seed_{seed}"
        out.mkdir(exist_ok=True)

        last = []

        def checkpoint(result, out=out, force=False):
            last[:] = [result]
            epoch = len(result.history)
            if force or epoch == cfg.train.epochs or (checkpoint_every and epoch % checkpoint_every == 0):
                save_agent(result.agent, out)
                write_tracker(out / "tracker.txt", result.tracker.u, result.multiplier.value, epoch, result.u0)
                (out / "history.csv").write_text(history_to_csv(result.history), encoding="utf-8")

        log.info("training seed %s -> %s", seed, out)
        try:
            train(cfg.train, scenario, seed, on_epoch=checkpoint)
        except TrainingDiverged:
            if last:
                checkpoint(last[0], force=True)
            raise
    return run_dir


TRAJ_COLUMNS = (["episode", "step", "outcome", "x", "y", "theta", "budget"]
                + [f"obs{i}" for i in range(OBS_DIM)])
EVAL_COLUMNS = ["episode", "outcome", "steps", "reward", "cost"]


def evaluate_run(run_dir) -> list[Path]:
    cfg, scenario = load_run(run_dir)
    written = []
    for sd in seed_dirs(run_dir):
        actor_path = sd / "actor.txt"
        if not actor_path.exists():
            raise PipelineError(f"{sd}: missing checkpoint actor.txt")
        actor = nn.load(actor_path)
        u = read_tracker(sd / "tracker.txt")["u"]
        episodes = evaluate_policy(actor, scenario, u, cfg.train.gamma)
        eval_rows, traj_rows = [], []
        for i, ep in enumerate(episodes):
            eval_rows.append([i, ep.status, len(ep.rewards), ep.total_reward, ep.total_cost])
            for t in range(len(ep.actions)):
                x, y, th = ep.poses[t]
                traj_rows.append([i, t, ep.status, x, y, th, ep.budgets[t], *ep.obs[t]])
        write_csv(sd / "evaluation.csv", EVAL_COLUMNS, eval_rows)
        write_csv(sd / "trajectories.csv", TRAJ_COLUMNS, traj_rows)
        written.append(sd / "evaluation.csv")
    return written


VERIFY_COLUMNS = ["episode", "step", "outcome", "safe", "safe_danger", "verified", "min_clearance",
                  "v_lo", "v_hi", "w_lo", "w_hi", "width_v", "width_w", "rem_v", "rem_w"]
SUMMARY_COLUMNS = ["metric", "value"]


def verify_states(actor, scenario: ScenarioConfig, rows, u, epsilon, threshold, substeps):
    """Reachable box and swept-motion verdicts for recorded trajectory rows."""
    low = np.array([0.0, -scenario.w_max])
    high = np.array([scenario.v_max, scenario.w_max])
    arenas = {}
    out = []
    for idx, row in enumerate(rows):
        ep = int(row["episode"])
        if ep not in arenas:
            sx, sy, sth, gx, gy = scenario.eval_pairs[ep]
            arenas[ep] = generate_arena(scenario.eval_map_seed + ep, scenario, (sx, sy, sth), (gx, gy))[0]
        arena = arenas[ep]
        obs = np.array([float(row[f"obs{i}"]) for i in range(OBS_DIM)])
        pose = RobotPose(float(row["x"]), float(row["y"]), float(row["theta"]))
        try:
            box = action_reachable_set(actor, augment(obs, u), epsilon, action_low=low, action_high=high)
        except ReachabilityError:
            box = None
        v = verify_state(pose, box, arena, scenario.dt, substeps, threshold, idx)
        vd = verify_state(pose, box, arena, scenario.dt, substeps, scenario.d_danger, idx)
        out.append((row, box, v, vd))
    return out


def _rate(verdicts):
    return safety_rate(verdicts) if verdicts else float("nan")


def verify_run(run_dir, epsilon: float | None = None, threshold: float | None = None) -> dict:
    """Verify every recorded evaluation state. Returns per-seed summaries."""
    cfg, scenario = load_run(run_dir)
    eps = cfg.epsilon if epsilon is None else epsilon
    if eps < 0:
        raise PipelineError("epsilon must be nonnegative")
    if threshold is None:
        threshold = cfg.safety_threshold if cfg.safety_threshold >= 0 else scenario.d_col
    summaries = {}
    for sd in seed_dirs(run_dir):
        traj = sd / "trajectories.csv"
        if not traj.exists():
            raise PipelineError(f"{sd}: run `evaluate` first (no trajectories.csv)")
        _, rows = read_csv(traj, TRAJ_COLUMNS)
        if not rows:
            raise PipelineError(f"{sd}: empty trajectories")
        actor = nn.load(sd / "actor.txt")
        u = read_tracker(sd / "tracker.txt")["u"]
        results = verify_states(actor, scenario, rows, u, eps, threshold, cfg.sweep_substeps)
        out_rows = []
        for row, box, v, vd in results:
            if box is None:
                bounds = [math.nan] * 8
            else:
                bounds = [box.lo[0], box.hi[0], box.lo[1], box.hi[1], *box.width, *box.remainder_width]
            out_rows.append([row["episode"], row["step"], row["outcome"], int(v.safe), int(vd.safe),
                             int(v.verified), v.min_clearance, *bounds])
        write_csv(sd / "verification.csv", VERIFY_COLUMNS, out_rows)
        verdicts = [v for _, _, v, _ in results]
        danger = [vd for _, _, _, vd in results]
        succ = [v for r, _, v, _ in results if r["outcome"] == "goal"]
        coll = [v for r, _, v, _ in results if r["outcome"] == "collision"]
        boxes = [b for _, b, _, _ in results if b is not None]
        unverified = sum(1 for v in verdicts if not v.verified) / len(verdicts)
        summary = {
            "epsilon": eps,
            "threshold": threshold,
            "states": len(verdicts),
            "unverified_fraction": unverified,
            "safety_overall": _rate(verdicts),
            "safety_succ": _rate(succ),
            "safety_coll": _rate(coll),
            "safety_overall_danger": _rate(danger),
            "width_v": float(np.mean([b.width[0] for b in boxes])) if boxes else math.nan,
            "width_w": float(np.mean([b.width[1] for b in boxes])) if boxes else math.nan,
            "unverifiable": int(unverified > 0.5),
        }
        write_csv(sd / "verification_summary.csv", SUMMARY_COLUMNS, summary.items())
        summaries[sd.name] = summary
    if any(s["unverifiable"] for s in summaries.values()):
        raise UnverifiableRun(f"{run_dir}: reachability failed on more than half of the states")
    return summaries


def evaluation_metrics(seed_dir) -> dict:
    _, rows = read_csv(Path(seed_dir) / "evaluation.csv", EVAL_COLUMNS)
    n = len(rows)
    outcomes = [r["outcome"] for r in rows]
    return {
        "success_rate": outcomes.count("goal") / n,
        "collision_rate": outcomes.count("collision") / n,
        "timeout_rate": outcomes.count("timeout") / n,
        "avg_cost": float(np.mean([float(r["cost"]) for r in rows])),
    }


def seed_metrics(seed_dir) -> dict:
    seed_dir = Path(seed_dir)
    metrics = evaluation_metrics(seed_dir)
    summary = seed_dir / "verification_summary.csv"
    if summary.exists():
        _, rows = read_csv(summary, SUMMARY_COLUMNS)
        for r in rows:
            if r["metric"] in ("safety_overall", "safety_succ", "safety_coll", "safety_overall_danger",
                               "width_v", "width_w"):
                metrics[r["metric"]] = float(r["value"])
    tracker = seed_dir / "tracker.txt"
    if tracker.exists():
        t = read_tracker(tracker)
        metrics["final_u"] = t["u"]
        metrics["final_lambda"] = t["lambda"]
    return metrics


def _mean_std(values):
    arr = np.array(values, dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return math.nan, math.nan
    return float(finite.mean()), float(finite.std())


def aggregate_run(run_dir) -> tuple[list, dict]:
    per_seed = [seed_metrics(sd) for sd in seed_dirs(run_dir)]
    keys = list(per_seed[0])
    for m in per_seed[1:]:
        if list(m) != keys:
            raise PipelineError(f"{run_dir}: seeds report different metrics")
    return keys, {k: _mean_std([m[k] for m in per_seed]) for k in keys}


def learning_curves(run_dir):
    """Per-epoch mean and std across seeds of every history column."""
    tables = []
    header = None
    for sd in seed_dirs(run_dir):
        h, rows = read_csv(sd / "history.csv", ["epoch"])
        if header is not None and h != header:
            raise PipelineError(f"{sd}: history columns differ from other seeds")
        header = h
        tables.append(rows)
    n_epochs = min(len(t) for t in tables)
    cols = [c for c in header if c != "epoch"]
    out = []
    for i in range(n_epochs):
        row = [i + 1]
        for c in cols:
            row.extend(_mean_std([float(t[i][c]) for t in tables]))
        out.append(row)
    return ["epoch"] + [f"{c}_{s}" for c in cols for s in ("mean", "std")], out


def report_runs(run_dirs, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names, aggregates = [], []
    keys = None
    for rd in run_dirs:
        k, agg = aggregate_run(rd)
        if keys is not None and k != keys:
            missing = sorted(set(keys) ^ set(k))
            raise PipelineError(f"inconsistent metric columns across runs: {missing}")
        keys = k
        names.append(Path(rd).name)
        aggregates.append(agg)
    header = ["run"] + [f"{k}_{s}" for k in keys for s in ("mean", "std")]
    rows = [[name] + [v for k in keys for v in agg[k]] for name, agg in zip(names, aggregates)]
    write_csv(out_dir / "comparison.csv", header, rows)
    width = max(len("run"), *(len(n) for n in names))
    lines = ["run".ljust(width) + "".join(f"  {k:>24}" for k in keys)]
    for name, agg in zip(names, aggregates):
        cells = "".join(f"  {agg[k][0]:>12.4f} +/- {agg[k][1]:<7.4f}" for k in keys)
        lines.append(name.ljust(width) + cells)
    (out_dir / "comparison.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, rd in zip(names, run_dirs):
        h, rows = learning_curves(rd)
        write_csv(out_dir / f"learning_curves_{name}.csv", h, rows)
    return out_dir
