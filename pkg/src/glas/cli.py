"""Command line entry point: ``glas <command> [flags]``.

Every command writes its outputs plus ``run_config.json`` into ``--out-dir``.
Re-running ``glas <command> --config DIR/run_config.json --jobs 1`` reproduces
the outputs byte for byte. Values from ``--config`` override flags; only
``--out-dir`` and ``--jobs`` given on the command line win over the file.

Exit codes::

    0  success
    2  usage error (bad flags)
    3  missing input file
    4  input format or version mismatch
    5  instance infeasible or unsolved
    6  training diverged
    1  any other failure

On failure one machine-readable line is written to stderr::

    GLAS-ERROR {"code": "missing_file", "exit": 3, "message": "..."}
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .expert import (
    DT_SAMPLE,
    Dataset,
    DatasetFormatError,
    PlanningError,
    extract_demos,
    plan_global,
    read_dataset,
    solved_instances,
    write_dataset,
)
from .observation import ObsCaps, observe_all
from .policy import MODES, WeightsFormatError, init_weights, load_weights, save_weights
from .safety import SafetyParams, SafetyViolation, default_params, barrier_terms, safety_blend
from .sim import (
    DT,
    GOAL_TOL,
    VEL_TOL,
    BarrierPolicy,
    NetworkPolicy,
    SuiteRow,
    aggregate,
    rollout,
    write_metrics_csv,
    write_trajectory_csv,
)
from .training import TrainConfig, TrainingDiverged, train, write_loss_csv
from .world import DYNAMICS, SINGLE, EnvInstance, InstanceInfeasible, load_env, make_random_env, save_env

log = logging.getLogger("glas")

RUN_CONFIG = "run_config.json"
RUN_CONFIG_VERSION = 1
PLAN_CSV_VERSION = "# glas-plan v1"
FIELD_CSV_VERSION = "# glas-field v1"
SUMMARY_CSV_VERSION = "# glas-summary v1"
PAIRS_CSV_VERSION = "# glas-effort-pairs v1"
T_FINAL_FACTOR = 4.0

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT, EXIT_UNSOLVED, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: str, exit_code: int, message: str):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _error_line(code: str, exit_code: int, message: str) -> str:
    return "GLAS-ERROR " + json.dumps({"code": code, "exit": exit_code, "message": message})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(_error_line("usage", EXIT_USAGE, message), file=sys.stderr)
        sys.exit(EXIT_USAGE)


@dataclass
class RunConfig:
    """Everything needed to repeat a command; written next to its outputs."""

    command: str
    args: dict
    safety: dict | None = None
    caps: dict | None = None
    train: dict | None = None
    sim: dict | None = None
    paths: dict = field(default_factory=dict)
    version: int = RUN_CONFIG_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError("format", EXIT_FORMAT, f"{path}: cannot parse run config ({exc})") from exc
        if doc.get("version") != RUN_CONFIG_VERSION:
            raise CliError("format", EXIT_FORMAT, f"{path}: unsupported run config version {doc.get('version')}")
        return cls(**doc)


# --------------------------------------------------------------------------
# flag groups


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _add_common(p):
    p.add_argument("--out-dir", default=".", help="directory for outputs and run_config.json")
    p.add_argument("--config", help="run_config.json of an earlier run; its values override flags")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores; 1 = reproducible)")
    p.add_argument("--verbose", action="store_true")


def _add_safety(p):
    g = p.add_argument_group("safety")
    g.add_argument("--dynamics", choices=DYNAMICS, default=SINGLE)
    g.add_argument("--r-sense-m", type=float, default=None)
    g.add_argument("--r-safe-m", type=float, default=None)
    g.add_argument("--delta-r-m", type=float, default=None)
    g.add_argument("--k-p", type=float, default=None, help="position gain")
    g.add_argument("--k-v", type=float, default=None, help="velocity gain (double integrator)")
    g.add_argument("--k-c", type=float, default=None, help="Lyapunov decay rate")
    g.add_argument("--epsilon", type=float, default=None)
    g.add_argument("--pi-max", type=float, default=None, help="policy output cap (m/s or m/s^2)")
    g.add_argument("--u-max", type=float, default=None, help="actuation limit (m/s or m/s^2)")
    g.add_argument("--clamp-u", action="store_true", help="clamp |u| to u-max (voids the safety guarantee)")
    g.add_argument("--max-neighbors", type=int, default=6)
    g.add_argument("--max-obstacles", type=int, default=6)


def _add_sim(p):
    g = p.add_argument_group("simulation")
    g.add_argument("--dt-s", type=float, default=DT)
    g.add_argument("--t-final-s", type=float, default=None,
                   help=f"horizon; default {T_FINAL_FACTOR:g} x the expert plan duration")
    g.add_argument("--goal-tol-m", type=float, default=GOAL_TOL)
    g.add_argument("--vel-tol-mps", type=float, default=VEL_TOL)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glas", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-env", help="random environment instance (JSON)")
    _add_common(p)
    p.add_argument("--robots", type=int)
    p.add_argument("--obst", type=float, default=0.1, help="obstacle fraction of grid cells")
    p.add_argument("--side-m", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dynamics", choices=DYNAMICS, default=SINGLE)
    p.add_argument("--clearance-m", type=float, default=None, help="start/goal spacing (default r_safe + delta_r)")

    p = sub.add_parser("plan", help="expert plan for an environment (CSV)")
    _add_common(p)
    _add_safety(p)
    p.add_argument("--env")
    p.add_argument("--dt-sample-s", type=float, default=DT_SAMPLE)

    p = sub.add_parser("build-dataset", help="demonstration dataset from expert plans")
    _add_common(p)
    _add_safety(p)
    p.add_argument("--robots", type=_ints, default=[4, 8])
    p.add_argument("--obst", type=_floats, default=[0.1])
    p.add_argument("--instances", type=int, default=100, help="solved instances per (robots, obst) case")
    p.add_argument("--side-m", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt-sample-s", type=float, default=DT_SAMPLE)

    p = sub.add_parser("train", help="imitation learning of the policy")
    _add_common(p)
    _add_safety(p)
    p.add_argument("--dataset")
    p.add_argument("--mode", choices=MODES, default=MODES[0])
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr0)
    p.add_argument("--plateau-patience", type=int, default=TrainConfig.plateau_patience)
    p.add_argument("--plateau-factor", type=float, default=TrainConfig.plateau_factor)
    p.add_argument("--val-frac", type=float, default=TrainConfig.validation_fraction)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--latent", type=int, default=16)

    p = sub.add_parser("rollout", help="closed-loop rollout of one policy on one environment")
    _add_common(p)
    _add_safety(p)
    _add_sim(p)
    p.add_argument("--env")
    p.add_argument("--policy", default="barrier", help="'barrier' or a weights file")

    p = sub.add_parser("eval", help="success / effort suite over random instances")
    _add_common(p)
    _add_safety(p)
    _add_sim(p)
    p.add_argument("--policies", default="barrier", help="comma list of policy names")
    p.add_argument("--weights", action="append", default=[], metavar="NAME=PATH",
                   help="weights file for a named policy (repeatable)")
    p.add_argument("--robots", type=_ints, default=[2, 4, 8])
    p.add_argument("--obst", type=_floats, default=[0.1, 0.2])
    p.add_argument("--per-case", type=int, default=10)
    p.add_argument("--side-m", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wall-time", action="store_true", help="record wall_ms (makes outputs non-reproducible)")

    p = sub.add_parser("plot-field", help="action vector field of a policy (CSV)")
    _add_common(p)
    _add_safety(p)
    p.add_argument("--env")
    p.add_argument("--policy", default="barrier", help="'barrier' or a weights file")
    p.add_argument("--grid", type=int, default=32, help="points per axis")
    p.add_argument("--robot", type=int, default=0, help="robot whose goal the field steers to")
    return parser


# --------------------------------------------------------------------------
# helpers


def _safety_from(a) -> SafetyParams:
    names = {"r_sense_m": "r_sense", "r_safe_m": "r_safe", "delta_r_m": "delta_r", "k_p": "k_p", "k_v": "k_v",
             "k_c": "k_c", "epsilon": "epsilon", "pi_max": "pi_max", "u_max": "u_max"}
    over = {v: getattr(a, k) for k, v in names.items() if getattr(a, k, None) is not None}
    try:
        return default_params(a.dynamics, clamp_u=bool(a.clamp_u), **over)
    except ValueError as exc:
        raise CliError("usage", EXIT_USAGE, str(exc)) from exc


def _caps_from(a) -> ObsCaps:
    return ObsCaps(a.max_neighbors, a.max_obstacles)


def _jobs(a) -> int:
    return max(1, a.jobs if a.jobs else (os.cpu_count() or 1))


def _pmap(fn, items, jobs):
    """Ordered map, optionally across processes."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _require(path) -> Path:
    if path is None:
        raise CliError("usage", EXIT_USAGE, "missing input path flag")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file {p} not found")
    return p


def _load_env(path) -> EnvInstance:
    try:
        return load_env(path)
    except ValueError as exc:
        raise CliError("format", EXIT_FORMAT, str(exc)) from exc


def _resolve_policy(spec: str, params: SafetyParams, name: str | None = None):
    if spec == "barrier":
        return BarrierPolicy()
    w = load_weights(_require(spec), dynamics=params.dynamics)
    return NetworkPolicy(w, name or Path(spec).stem)


def _sim_dict(a) -> dict:
    return {"dt_s": a.dt_s, "t_final_s": a.t_final_s, "t_final_factor": T_FINAL_FACTOR,
            "goal_tol_m": a.goal_tol_m, "vel_tol_mps": a.vel_tol_mps}


def _case_seed(seed: int, n: int, frac: float) -> int:
    return seed * 1_000_003 + n * 10_007 + int(round(frac * 1000)) * 101


# --------------------------------------------------------------------------
# commands


def cmd_gen_env(a, out: Path) -> RunConfig:
    clearance = a.clearance_m
    if clearance is None:
        base = default_params(a.dynamics)
        clearance = base.r_safe + base.delta_r
    env = make_random_env(a.robots, a.obst, side=a.side_m, seed=a.seed, dynamics=a.dynamics, clearance=clearance)
    save_env(env, out / "env.json")
    return RunConfig("gen-env", {}, paths={"env": "env.json"})


def cmd_plan(a, out: Path) -> RunConfig:
    params = _safety_from(a)
    env = _load_env(_require(a.env))
    traj = plan_global(env, dt_sample=a.dt_sample_s, u_max=params.u_max, r_safe=params.r_safe, delta_r=params.delta_r)
    ts, states, acts = traj.samples()
    with open(out / "plan.csv", "w", newline="", encoding="utf-8") as f:
        f.write(PLAN_CSV_VERSION + "\n")
        f.write(f"# duration_s={traj.duration!r} time_scale={traj.time_scale!r}\n")
        w = csv.writer(f)
        w.writerow(["robot", "t", "x", "y", "vx", "vy", "ux", "uy"])
        vel = np.stack([p.velocity(ts) for p in traj.paths], axis=1) if traj.n_robots else acts
        for i in range(traj.n_robots):
            for k in range(len(ts)):
                w.writerow([i, repr(float(ts[k])), repr(float(states[k, i, 0])), repr(float(states[k, i, 1])),
                            repr(float(vel[k, i, 0])), repr(float(vel[k, i, 1])),
                            repr(float(acts[k, i, 0])), repr(float(acts[k, i, 1]))])
    return RunConfig("plan", {}, safety=params.to_dict(), paths={"env": a.env, "plan": "plan.csv"})


def _demos_for_case(job):
    n, frac, count, seed0, side, dynamics, params_d, caps_d, dt_sample = job
    params = SafetyParams.from_dict(params_d)
    caps = ObsCaps(**caps_d)
    recs, seeds = [], []
    for seed, env, traj in solved_instances(n, frac, count, seed0, side=side, dynamics=dynamics,
                                            u_max=params.u_max, dt_sample=dt_sample):
        recs.extend(extract_demos(traj, env, params, caps))
        seeds.append(seed)
    return Dataset.from_records(recs, dynamics), seeds


def _split_counts(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (k < extra) for k in range(parts)]


def cmd_build_dataset(a, out: Path) -> RunConfig:
    params = _safety_from(a)
    caps = _caps_from(a)
    jobs = _jobs(a)
    tasks = []
    # each case is cut into fixed chunks of seeds so that results do not depend on --jobs
    chunk = 50
    for n in a.robots:
        for frac in a.obst:
            base = _case_seed(a.seed, n, frac)
            for k, cnt in enumerate(_split_counts(a.instances, max(1, -(-a.instances // chunk)))):
                tasks.append((n, frac, cnt, base + k * 100_000, a.side_m, a.dynamics, params.to_dict(),
                              asdict(caps), a.dt_sample_s))
    results = _pmap(_demos_for_case, tasks, jobs)
    ds = Dataset(a.dynamics)
    with open(out / "instances.csv", "w", newline="", encoding="utf-8") as f:
        f.write("# glas-instances v1\n")
        w = csv.writer(f)
        w.writerow(["n_robots", "obstacle_frac", "seed"])
        for task, (part, seeds) in zip(tasks, results):
            ds = ds.merge(part)
            for s in seeds:
                w.writerow([task[0], repr(task[1]), s])
    count = write_dataset(ds, out / "dataset.bin")
    log.info("wrote %d records", count)
    return RunConfig("build-dataset", {}, safety=params.to_dict(), caps=asdict(caps),
                     paths={"dataset": "dataset.bin", "instances": "instances.csv"})


def cmd_train(a, out: Path) -> RunConfig:
    params = _safety_from(a)
    ds = read_dataset(_require(a.dataset))
    if ds.dynamics != params.dynamics:
        raise CliError("format", EXIT_FORMAT, f"dataset is for the {ds.dynamics} integrator, run uses {params.dynamics}")
    cfg = TrainConfig(mode=a.mode, batch_size=a.batch_size, epochs=a.epochs, lr0=a.lr,
                      plateau_patience=a.plateau_patience, plateau_factor=a.plateau_factor,
                      seed=a.seed, validation_fraction=a.val_frac)
    init = init_weights(a.seed, params.dynamics, a.hidden, a.latent)
    res = train(ds, cfg, params, init,
                progress=lambda r: log.info("epoch %d train %.6g val %.6g lr %.3g", r["epoch"], r["train_loss"],
                                            r["val_loss"], r["lr"]))
    save_weights(res.weights, out / "weights.json")
    write_loss_csv(res.history, out / "loss.csv")
    return RunConfig("train", {}, safety=params.to_dict(), train=cfg.to_dict(),
                     paths={"dataset": a.dataset, "weights": "weights.json", "loss": "loss.csv"})


def _t_final(a, env: EnvInstance, params: SafetyParams) -> float:
    if a.t_final_s is not None:
        return a.t_final_s
    traj = plan_global(env, u_max=params.u_max, r_safe=params.r_safe, delta_r=params.delta_r)
    return T_FINAL_FACTOR * traj.duration


def cmd_rollout(a, out: Path) -> RunConfig:
    params = _safety_from(a)
    env = _load_env(_require(a.env))
    if env.dynamics != params.dynamics:
        raise CliError("format", EXIT_FORMAT, f"environment is for the {env.dynamics} integrator")
    pol = _resolve_policy(a.policy, params)
    tf = _t_final(a, env, params)
    res = rollout(env, pol, params, dt=a.dt_s, t_f=tf, caps=_caps_from(a), goal_tol=a.goal_tol_m,
                  vel_tol=a.vel_tol_mps)
    write_trajectory_csv(res, out / "trajectory.csv")
    row = SuiteRow(getattr(pol, "name", a.policy), 0, env.n_robots, float(len(env.obstacles)), res.r_s, res.r_p,
                   float("nan"), res.success)
    write_metrics_csv([row], out / "metrics.csv", include_wall=False,
                      extra_comment=f"t_final_s={tf!r} goal_tol_m={a.goal_tol_m!r} vel_tol_mps={a.vel_tol_mps!r}")
    return RunConfig("rollout", {}, safety=params.to_dict(), caps=asdict(_caps_from(a)), sim=_sim_dict(a),
                     paths={"env": a.env, "policy": a.policy, "trajectory": "trajectory.csv", "metrics": "metrics.csv"})


def _eval_instance(job):
    env_d, tf, policies, params_d, caps_d, sim, wall = job
    import time

    env = EnvInstance.from_dict(env_d)
    params = SafetyParams.from_dict(params_d)
    caps = ObsCaps(**caps_d)
    out = []
    for name, spec in policies:
        pol = _resolve_policy(spec, params, name)
        t0 = time.perf_counter()
        res = rollout(env, pol, params, dt=sim["dt_s"], t_f=tf, caps=caps, goal_tol=sim["goal_tol_m"],
                      vel_tol=sim["vel_tol_mps"])
        ms = (time.perf_counter() - t0) * 1e3 if wall else float("nan")
        out.append((name, res.r_s, res.r_p, ms, res.success.tolist()))
    return out


def _named_weights(a) -> dict[str, str]:
    out = {}
    for item in a.weights:
        if "=" not in item:
            raise CliError("usage", EXIT_USAGE, f"--weights expects NAME=PATH, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def cmd_eval(a, out: Path) -> RunConfig:
    params = _safety_from(a)
    caps = _caps_from(a)
    names = [x for x in a.policies.split(",") if x]
    table = _named_weights(a)
    policies = []
    for name in names:
        spec = "barrier" if name == "barrier" and name not in table else table.get(name)
        if spec is None:
            raise CliError("usage", EXIT_USAGE, f"no --weights given for policy {name!r}")
        _resolve_policy(spec, params, name)  # fail early on missing or mismatched files
        policies.append((name, spec))
    jobs_list, meta = [], []
    for n in a.robots:
        for frac in a.obst:
            for seed, env, traj in solved_instances(n, frac, a.per_case, _case_seed(a.seed, n, frac), side=a.side_m,
                                                    dynamics=params.dynamics, u_max=params.u_max):
                tf = a.t_final_s if a.t_final_s is not None else T_FINAL_FACTOR * traj.duration
                jobs_list.append((env.to_dict(), tf, policies, params.to_dict(), asdict(caps), _sim_dict(a), a.wall_time))
                meta.append((seed, n, frac, tf))
    results = _pmap(_eval_instance, jobs_list, _jobs(a))
    rows = []
    for k, ((seed, n, frac, tf), res) in enumerate(zip(meta, results)):
        for name, r_s, r_p, ms, succ in res:
            rows.append(SuiteRow(name, seed, n, frac, r_s, r_p, ms, np.asarray(succ)))
    horizon = f"t_final_s={a.t_final_s!r}" if a.t_final_s is not None else f"t_final={T_FINAL_FACTOR:g}x expert duration"
    write_metrics_csv(rows, out / "metrics.csv", include_wall=a.wall_time,
                      extra_comment=f"goal_tol_m={a.goal_tol_m!r} vel_tol_mps={a.vel_tol_mps!r} dt_s={a.dt_s!r} {horizon}")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as f:
        f.write(SUMMARY_CSV_VERSION + "\n")
        w = csv.writer(f)
        w.writerow(["policy", "n_robots", "obstacle_frac", "cases", "success_frac", "mean_r_p"])
        for s in aggregate(rows):
            w.writerow([s["policy"], s["n_robots"], repr(s["obstacle_frac"]), s["cases"], repr(s["success_frac"]),
                        repr(s["mean_r_p"])])
    _write_pairs(rows, names, out / "effort_pairs.csv")
    return RunConfig("eval", {}, safety=params.to_dict(), caps=asdict(caps), sim=_sim_dict(a),
                     paths={"weights": table, "metrics": "metrics.csv", "summary": "summary.csv",
                            "effort_pairs": "effort_pairs.csv"})


def _write_pairs(rows, names, path):
    """Per-instance effort of every policy pair on instances fully solved by both."""
    by = {(r.policy, r.instance, r.n_robots, r.obstacle_frac): r for r in rows}
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(PAIRS_CSV_VERSION + "\n")
        w = csv.writer(f)
        w.writerow(["policy_a", "policy_b", "instance", "n_robots", "obstacle_frac", "r_p_a", "r_p_b"])
        for i, pa in enumerate(names):
            for pb in names[i + 1:]:
                for (pol, inst, n, frac), ra in by.items():
                    if pol != pa:
                        continue
                    rb = by.get((pb, inst, n, frac))
                    if rb is not None and ra.r_s == n and rb.r_s == n:
                        w.writerow([pa, pb, inst, n, repr(frac), repr(ra.r_p), repr(rb.r_p)])


def field_rows(env: EnvInstance, policy, params: SafetyParams, caps: ObsCaps, grid: int, robot: int = 0):
    """Blended action of a lone virtual robot at every grid point, steering to ``robot``'s goal.

    Yields ``(x, y, ux, uy, blocked)``; ``blocked`` marks points inside an
    obstacle or within ``r_safe`` of one, whose action is NaN.
    """
    if not 0 <= robot < env.n_robots:
        raise CliError("usage", EXIT_USAGE, f"robot index {robot} out of range")
    xmin, ymin, xmax, ymax = env.bounds
    xs = xmin + (np.arange(grid) + 0.5) * (xmax - xmin) / grid
    ys = ymin + (np.arange(grid) + 0.5) * (ymax - ymin) / grid
    goal = env.goals[robot]
    for x in xs:
        for y in ys:
            state = np.zeros_like(goal)
            state[:2] = (x, y)
            lone = EnvInstance(env.bounds, env.obstacles, state[None], goal[None], env.dynamics)
            bobs = observe_all(state[None], lone, params, caps)
            if not bobs.raw_min_h[0] > 0:
                yield float(x), float(y), float("nan"), float("nan"), 1
                continue
            pi = np.asarray(policy(bobs, state[None], lone, params), dtype=np.float64).reshape(1, 2)
            vel = state[None, 2:4] if state.size == 4 else None
            terms = barrier_terms(bobs.neighbors[..., :2], bobs.neighbor_mask, bobs.obstacles, bobs.obstacle_mask,
                                  params, vel)
            u = safety_blend(pi, terms, bobs.raw_min_h, params, vel)["u"][0]
            yield float(x), float(y), float(u[0]), float(u[1]), 0


def cmd_plot_field(a, out: Path) -> RunConfig:
    params = _safety_from(a)
    env = _load_env(_require(a.env))
    if env.dynamics != params.dynamics:
        raise CliError("format", EXIT_FORMAT, f"environment is for the {env.dynamics} integrator")
    if a.grid < 1:
        raise CliError("usage", EXIT_USAGE, "--grid must be at least 1")
    pol = _resolve_policy(a.policy, params)
    with open(out / "field.csv", "w", newline="", encoding="utf-8") as f:
        f.write(FIELD_CSV_VERSION + "\n")
        w = csv.writer(f)
        w.writerow(["x", "y", "ux", "uy", "blocked"])
        for x, y, ux, uy, blocked in field_rows(env, pol, params, _caps_from(a), a.grid, a.robot):
            w.writerow([repr(x), repr(y), repr(ux), repr(uy), blocked])
    return RunConfig("plot-field", {}, safety=params.to_dict(), caps=asdict(_caps_from(a)),
                     paths={"env": a.env, "policy": a.policy, "field": "field.csv"})


COMMANDS = {
    "gen-env": cmd_gen_env,
    "plan": cmd_plan,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "plot-field": cmd_plot_field,
}

_REQUIRED = {"gen-env": ("robots",), "plan": ("env",), "train": ("dataset",), "rollout": ("env",),
             "plot-field": ("env",)}
_NOT_REPLAYED = {"config", "out_dir", "jobs", "verbose", "command"}


def _apply_config(a, parser_defaults: dict):
    cfg = RunConfig.load(a.config)
    if cfg.command != a.command:
        raise CliError("format", EXIT_FORMAT, f"config is for '{cfg.command}', not '{a.command}'")
    for k, v in cfg.args.items():
        if k in _NOT_REPLAYED:
            continue
        if k not in parser_defaults:
            raise CliError("format", EXIT_FORMAT, f"config key {k!r} is not a flag of '{a.command}'")
        setattr(a, k, v)
    return a


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if a.config:
            a = _apply_config(a, vars(parser.parse_args([a.command])))
        for flag in _REQUIRED.get(a.command, ()):
            if getattr(a, flag) is None:
                raise CliError("usage", EXIT_USAGE, f"--{flag.replace('_', '-')} is required")
        out = Path(a.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg = COMMANDS[a.command](a, out)
        cfg.args = {k: v for k, v in sorted(vars(a).items()) if k not in _NOT_REPLAYED}
        (out / RUN_CONFIG).write_text(cfg.to_json(), encoding="utf-8")
        return EXIT_OK
    except CliError as e:
        print(_error_line(e.code, e.exit_code, str(e)), file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(_error_line("missing_file", EXIT_MISSING, str(e)), file=sys.stderr)
        return EXIT_MISSING
    except (WeightsFormatError, DatasetFormatError) as e:
        print(_error_line("format", EXIT_FORMAT, str(e)), file=sys.stderr)
        return EXIT_FORMAT
    except (InstanceInfeasible, PlanningError) as e:
        print(_error_line("unsolved", EXIT_UNSOLVED, str(e)), file=sys.stderr)
        return EXIT_UNSOLVED
    except TrainingDiverged as e:
        print(_error_line("diverged", EXIT_DIVERGED, str(e)), file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, SafetyViolation) as e:
        print(_error_line("invalid", EXIT_OTHER, str(e)), file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
