"""Command line front end: config handling, multi-seed experiments and all file I/O.

Subcommands::

    mfql train        --config exp.ini [--problem hara] [--regime mfg] ...
    mfql benchmark    --config exp.ini
    mfql compare      TRAIN_DIR BENCHMARK_DIR
    mfql fixed-point  --config exp.ini

The config is an INI file. Every key is optional except ``problem`` (which can
also be given on the command line); see ``DEFAULTS`` for the schema.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import benchmarks
from .core import DiscreteSpace, RateSchedule
from .deterministic import damped_iteration
from .env import TRADER_GRIDS, HaraEnvironment, HaraParams, TraderEnvironment, TraderParams
from .qlearning import MeanFieldQLearner

log = logging.getLogger("mfql")

SCHEMA_VERSION = 1
PROBLEMS = ("hara", "trader")
REGIMES = ("mfg", "mfc")

# (omega_q, omega_nu) per problem and regime
RATES = {
    ("hara", "mfg"): (0.55, 0.85),
    ("hara", "mfc"): (0.7, 0.05),
    ("trader", "mfg"): (0.55, 0.85),
    ("trader", "mfc"): (0.65, 0.15),
}
EPSILON = {"hara": 0.15, "trader": 0.1}
# Episode budgets per run, picked to fit the acceptance checks on a single core.
EPISODES = {"hara": 1_000_000, "trader": 1_000_000}

DEFAULTS = {
    "experiment": {
        "problem": None, "regime": "mfg", "runs": 10, "episodes": None, "seed": 0,
        "workers": None, "log_every": None, "early_stopping": False,
        "occupancy_threshold": 100, "fixed_point_iters": 1000, "fixed_point_tol": 1e-8,
        "fixed_point_damping": True,
    },
    "learner": {
        "omega_q": None, "omega_nu": None, "epsilon": None, "discount": 1.0,
        "tol_nu": 1e-6, "tol_q": 1e-6, "mode": "action",
    },
    "hara": {
        "c": 3.0, "discount": 0.95, "gamma": 0.2, "noise_values": (0.9, 1.3),
        "noise_probs": (0.75, 0.25), "initial_low": 0.0, "initial_high": 1.0,
        "n_steps": 2, "state_lower": 0.0, "state_upper": 4.0, "state_step": 0.05,
        "action_lower": 0.0, "action_upper": 4.0, "action_step": 0.05,
    },
    "trader": {
        "c_alpha": 1.0, "c_x": 2.0, "gamma": 1.75, "c_g": 0.3, "sigma": 0.5, "horizon": 1.0,
        "n_steps": 16, "initial_mean": 0.5, "initial_sd": 0.3,
        "state_lower": None, "state_upper": None, "state_step": None,
        "action_lower": None, "action_upper": None, "action_step": None,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _parse(section, key, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if key in ("runs", "episodes", "workers", "log_every"):
            return int(raw)
        if key in ("omega_q", "omega_nu", "epsilon") or section == "trader":
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


@dataclass
class ExperimentConfig:
    problem: str
    regime: str = "mfg"
    runs: int = 10
    episodes: int = 0
    seed: int = 0
    workers: int = 1
    log_every: int = 1
    early_stopping: bool = False
    occupancy_threshold: int = 100
    fixed_point_iters: int = 1000
    fixed_point_tol: float = 1e-8
    fixed_point_damping: bool = True
    learner: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": {k: getattr(self, k) for k in DEFAULTS["experiment"]},
            "learner": dict(self.learner),
            self.problem: {k: list(v) if isinstance(v, tuple) else v for k, v in self.env.items()},
        }

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.runs)]


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI file (if any), apply command-line overrides and fill in the
    problem defaults. Manifests written by ``train`` load the same way."""
    values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        if path.suffix == ".json":
            data = json.loads(path.read_text())
            for sec, keys in data.items():
                if sec in values:
                    for k, v in keys.items():
                        values[sec][k] = tuple(v) if isinstance(v, list) else v
        else:
            parser = configparser.ConfigParser()
            try:
                parser.read(path)
            except configparser.Error as exc:
                raise ConfigError(f"malformed config: {exc}") from None
            for sec in parser.sections():
                if sec not in values:
                    raise ConfigError(f"unknown section [{sec}]")
                for k, raw in parser.items(sec):
                    if k not in values[sec]:
                        raise ConfigError(f"[{sec}] {k}: unknown key")
                    values[sec][k] = _parse(sec, k, raw, DEFAULTS[sec][k])
    for k, v in (overrides or {}).items():
        if v is not None:
            values["experiment"][k] = v

    exp = values["experiment"]
    problem = exp["problem"]
    if problem is None:
        raise ConfigError("problem: required field missing (hara or trader)")
    if problem not in PROBLEMS:
        raise ConfigError(f"problem: must be one of {PROBLEMS}, got {problem!r}")
    regime = exp["regime"]
    if regime not in REGIMES:
        raise ConfigError(f"regime: must be one of {REGIMES}, got {regime!r}")

    learner = dict(values["learner"])
    wq, wn = RATES[(problem, regime)]
    learner["omega_q"] = wq if learner["omega_q"] is None else float(learner["omega_q"])
    learner["omega_nu"] = wn if learner["omega_nu"] is None else float(learner["omega_nu"])
    if learner["epsilon"] is None:
        learner["epsilon"] = EPSILON[problem]
    try:
        RateSchedule(learner["omega_q"], learner["omega_nu"])
    except ValueError as exc:
        raise ConfigError(f"omega_q/omega_nu: {exc}") from None
    if not 0 <= learner["epsilon"] <= 1:
        raise ConfigError("epsilon: must lie in [0, 1]")

    env = dict(values[problem])
    if problem == "trader":
        step = np.sqrt(env["horizon"] / env["n_steps"])
        for axis, key in (("state", "states"), ("action", "actions")):
            lo, hi = TRADER_GRIDS[regime][key]
            env[f"{axis}_lower"] = lo if env[f"{axis}_lower"] is None else env[f"{axis}_lower"]
            env[f"{axis}_upper"] = hi if env[f"{axis}_upper"] is None else env[f"{axis}_upper"]
            env[f"{axis}_step"] = float(step) if env[f"{axis}_step"] is None else env[f"{axis}_step"]

    episodes = EPISODES[problem] if exp["episodes"] is None else int(exp["episodes"])
    runs = int(exp["runs"])
    if runs < 1:
        raise ConfigError("runs: must be >= 1")
    if episodes < 0:
        raise ConfigError("episodes: must be >= 0")
    workers = exp["workers"] or min(runs, os.cpu_count() or 1)
    if workers < 1:
        raise ConfigError("workers: must be >= 1")
    log_every = exp["log_every"] or max(episodes // 1000, 1)
    if log_every < 1:
        raise ConfigError("log_every: must be >= 1")
    cfg = ExperimentConfig(
        problem=problem, regime=regime, runs=runs, episodes=episodes, seed=int(exp["seed"]),
        workers=int(workers), log_every=int(log_every),
        early_stopping=bool(exp["early_stopping"]),
        occupancy_threshold=int(exp["occupancy_threshold"]),
        fixed_point_iters=int(exp["fixed_point_iters"]),
        fixed_point_tol=float(exp["fixed_point_tol"]),
        fixed_point_damping=bool(exp["fixed_point_damping"]),
        learner=learner, env=env,
    )
    build_environment(cfg)  # surfaces parameter errors early
    return cfg


def build_environment(cfg: ExperimentConfig):
    e = cfg.env
    try:
        states = DiscreteSpace(e["state_lower"], e["state_upper"], e["state_step"])
        actions = DiscreteSpace(e["action_lower"], e["action_upper"], e["action_step"])
        if cfg.problem == "hara":
            params = HaraParams(e["c"], e["discount"], e["gamma"], tuple(e["noise_values"]),
                                tuple(e["noise_probs"]), e["initial_low"], e["initial_high"])
            return HaraEnvironment(params, int(e["n_steps"]), states, actions)
        params = TraderParams(e["c_alpha"], e["c_x"], e["gamma"], e["c_g"], e["sigma"], e["horizon"])
        return TraderEnvironment(params, int(e["n_steps"]), states, actions, cfg.regime,
                                 e["initial_mean"], e["initial_sd"])
    except ValueError as exc:
        raise ConfigError(f"[{cfg.problem}] {exc}") from None


def benchmark_solution(cfg: ExperimentConfig, env=None):
    """Continuous reference solution for the configured problem and regime."""
    env = env or build_environment(cfg)
    if cfg.problem == "trader":
        solve = benchmarks.trader_mfg_solve if cfg.regime == "mfg" else benchmarks.trader_mfc_solve
        return solve(env.params, env.initial_mean, env.time_grid.points)
    if cfg.regime == "mfc":
        raise benchmarks.SolverError("no closed-form MFC benchmark for the hara problem")
    p = env.params
    return benchmarks.hara_mfg_solve(p, 0.5 * (p.initial_low + p.initial_high), env.n_steps)


# -- I/O helpers ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], np.array(rows[1:], dtype=float).reshape(-1, len(rows[0]))


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- train ----------------------------------------------------------------------

@dataclass
class RunReport:
    seed: int
    control: np.ndarray
    occupancy: np.ndarray
    episodes: np.ndarray
    mean_actions: np.ndarray
    nu_norms: np.ndarray
    q_norms: np.ndarray
    n_episodes: int
    converged: bool
    wall_clock: float


def run_one(cfg: ExperimentConfig, seed: int) -> RunReport:
    env = build_environment(cfg)
    t0 = time.perf_counter()
    est = MeanFieldQLearner(
        omega_q=cfg.learner["omega_q"], omega_nu=cfg.learner["omega_nu"],
        epsilon=cfg.learner["epsilon"], discount=cfg.learner["discount"],
        tol_nu=cfg.learner["tol_nu"], tol_q=cfg.learner["tol_q"],
        max_episodes=cfg.episodes, mode=cfg.learner["mode"], random_state=seed,
        log_every=cfg.log_every, early_stopping=cfg.early_stopping,
    ).fit(env)
    tr = est.trace_
    return RunReport(seed, est.control_, est.occupancy_, tr.episodes, tr.mean_actions,
                     tr.nu_norms, tr.q_norms, est.n_episodes_, est.converged_,
                     time.perf_counter() - t0)


def _control_rows(env, learned, bench):
    for n in range(learned.shape[0]):
        for i, x in enumerate(env.states.values):
            yield n, x, learned[n, i], bench[n, i]


def _meanfield_rows(episodes, means):
    for e, row in zip(episodes, means):
        for n, m in enumerate(row):
            yield e, n, m


def run_experiment(cfg: ExperimentConfig, out: Path) -> list[RunReport]:
    out.mkdir(parents=True, exist_ok=True)
    env = build_environment(cfg)
    try:
        bench = benchmark_solution(cfg, env).control_table(env.states.values)
    except benchmarks.SolverError:
        bench = np.full((env.n_steps + 1, len(env.states)), np.nan)
    if cfg.workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            reports = list(pool.map(run_one, [cfg] * cfg.runs, cfg.seeds))
    else:
        reports = [run_one(cfg, s) for s in cfg.seeds]

    for i, r in enumerate(reports):
        log.info("run %d seed %d: %d episodes in %.2fs", i, r.seed, r.n_episodes, r.wall_clock)
        write_csv(out / f"controls_{i}.csv", ["n", "x", "learned_action", "benchmark_action"],
                  _control_rows(env, r.control, bench))
        write_csv(out / f"meanfield_{i}.csv", ["episode", "n", "mean_action"],
                  _meanfield_rows(r.episodes, r.mean_actions))
        write_csv(out / f"norms_{i}.csv", ["episode", "n", "nu_norm", "q_norm"],
                  ((e, n, a, b) for e, ra, rb in zip(r.episodes, r.nu_norms, r.q_norms)
                   for n, (a, b) in enumerate(zip(ra, rb))))
        write_csv(out / f"occupancy_{i}.csv", ["n", "x", "visits"],
                  ((n, x, r.occupancy[n, j]) for n in range(r.occupancy.shape[0])
                   for j, x in enumerate(env.states.values)))

    control = np.mean([r.control for r in reports], axis=0)
    occupancy = np.mean([r.occupancy for r in reports], axis=0)
    write_csv(out / "controls_avg.csv", ["n", "x", "learned_action", "benchmark_action"],
              _control_rows(env, control, bench))
    write_csv(out / "occupancy_avg.csv", ["n", "x", "visits"],
              ((n, x, occupancy[n, j]) for n in range(occupancy.shape[0])
               for j, x in enumerate(env.states.values)))
    # runs stopped early have shorter traces; average over the common prefix
    k = min(len(r.episodes) for r in reports)
    means = np.mean([r.mean_actions[:k] for r in reports], axis=0)
    write_csv(out / "meanfield_avg.csv", ["episode", "n", "mean_action"],
              _meanfield_rows(reports[0].episodes[:k], means))

    manifest = cfg.to_dict()
    manifest["grids"] = {
        "states": [env.states.lower, env.states.upper, env.states.step],
        "actions": [env.actions.lower, env.actions.upper, env.actions.step],
    }
    manifest["runs"] = [
        {"index": i, "seed": r.seed, "episodes": r.n_episodes, "converged": bool(r.converged),
         "final_nu_norm": [float(v) for v in r.nu_norms[-1]] if len(r.nu_norms) else [],
         "final_q_norm": [float(v) for v in r.q_norms[-1]] if len(r.q_norms) else []}
        for i, r in enumerate(reports)
    ]
    write_json(out / "manifest.json", manifest)
    return reports


# -- benchmark --------------------------------------------------------------------

def write_benchmark(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    env = build_environment(cfg)
    sol = benchmark_solution(cfg, env)
    xs = env.states.values
    table = sol.control_table(xs)
    times = env.time_grid.points if cfg.problem == "trader" else np.arange(env.n_steps + 1)
    projected = benchmarks.project_table(table, env.actions)
    for name, tab in (("benchmark_controls.csv", table),
                      ("benchmark_controls_projected.csv", projected)):
        write_csv(out / name, ["t", "x", "control"],
                  ((t, x, tab[n, i]) for n, t in enumerate(times) for i, x in enumerate(xs)))
    write_csv(out / "benchmark_meanfield.csv", ["t", "mean_control"],
              zip(times, sol.mean_control()))
    if cfg.problem == "trader":
        write_csv(out / "benchmark_coefficients.csv",
                  ["t", "eta", "mean_slope", "mean_state", "offset"],
                  zip(sol.t, sol.eta, sol.slope_bar, sol.x_bar, sol.offset))
    else:
        write_csv(out / "benchmark_coefficients.csv", ["t", "mean_investment", "D"],
                  ((t, sol.z[t] if t < len(sol.z) else 0.0, sol.D[t]) for t in range(len(sol.D))))
        if not sol.converged:
            raise benchmarks.SolverError(
                f"fixed point not converged after {sol.n_iter} iterations "
                f"(residual {sol.residual:.3g})")
    manifest = cfg.to_dict()
    manifest["grids"] = {
        "states": [env.states.lower, env.states.upper, env.states.step],
        "actions": [env.actions.lower, env.actions.upper, env.actions.step],
    }
    write_json(out / "benchmark_manifest.json", manifest)
    return sol


# -- compare ----------------------------------------------------------------------

class GridMismatchError(ValueError):
    pass


def compare(train_dir: Path, bench_dir: Path, threshold: float = 100.0):
    """Per-slice distances between averaged learned and benchmark controls.

    Returns rows ``(n, linf_steps, l1_steps, n_states, mean_field_error)``.
    """
    manifest = json.loads((train_dir / "manifest.json").read_text())
    step = manifest["grids"]["actions"][2]
    _, learned = read_csv(train_dir / "controls_avg.csv")
    _, occ = read_csv(train_dir / "occupancy_avg.csv")
    _, bench = read_csv(bench_dir / "benchmark_controls.csv")
    n_times = int(learned[:, 0].max()) + 1
    lx = learned[learned[:, 0] == 0, 1]
    bt = np.unique(bench[:, 0])
    bx = bench[bench[:, 0] == bt[0], 1]
    if len(bt) != n_times or len(bx) != len(lx) or not np.allclose(bx, lx):
        raise GridMismatchError(
            f"grid mismatch: learned has {n_times} times x states {lx.tolist()}, "
            f"benchmark has {len(bt)} times x states {bx.tolist()}")
    l_tab = learned[:, 2].reshape(n_times, -1)
    b_tab = bench[:, 2].reshape(n_times, -1)
    o_tab = occ[:, 2].reshape(n_times, -1)

    _, lmf = read_csv(train_dir / "meanfield_avg.csv")
    _, bmf = read_csv(bench_dir / "benchmark_meanfield.csv")
    if len(lmf):
        last = lmf[lmf[:, 0] == lmf[:, 0].max()]
        final = last[np.argsort(last[:, 1]), 2]
    else:
        final = np.full(n_times, np.nan)
    rows = []
    for n in range(n_times):
        sel = o_tab[n] >= threshold
        d = np.abs(l_tab[n, sel] - b_tab[n, sel]) / step
        rows.append((n, d.max() if d.size else 0.0, d.sum(), int(sel.sum()),
                     abs(final[n] - bmf[n, 1])))
    return rows


# -- fixed point ------------------------------------------------------------------

def run_fixed_point(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    env = build_environment(cfg)
    schedule = None
    if cfg.fixed_point_damping:
        schedule = RateSchedule(cfg.learner["omega_q"], cfg.learner["omega_nu"])
    res = damped_iteration(env.to_model(), schedule, cfg.fixed_point_iters, cfg.fixed_point_tol)
    write_csv(out / "fixed_point_trace.csv", ["iteration", "q_residual", "nu_residual"],
              ((int(k), a, b) for k, a, b in res.trace))
    control = env.actions.values[res.policy]
    write_csv(out / "fixed_point_controls.csv", ["n", "x", "action"],
              ((n, x, control[n, i]) for n in range(control.shape[0])
               for i, x in enumerate(env.states.values)))
    last = res.trace[-1] if len(res.trace) else (0, np.nan, np.nan)
    write_json(out / "fixed_point_status.json", {
        "schema_version": SCHEMA_VERSION, "converged": bool(res.converged),
        "iterations": int(len(res.trace)), "q_residual": float(last[1]),
        "nu_residual": float(last[2]), "config": cfg.to_dict(),
    })
    return res


# -- entry point ------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", type=Path, help="INI config file (or a train manifest.json)")
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--episodes", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--log-every", type=int, dest="log_every")
    p.add_argument("--out", type=Path, default=Path("out"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfql", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "multi-seed Q-learning runs"),
                        ("benchmark", "reference solutions"),
                        ("fixed-point", "model-based damped iteration")):
        _add_common(sub.add_parser(name, help=help_))
    cp = sub.add_parser("compare", help="learned vs benchmark controls")
    cp.add_argument("train_dir", type=Path)
    cp.add_argument("benchmark_dir", type=Path)
    cp.add_argument("--occupancy", type=float, default=None,
                    help="minimum mean visit count (default: the train manifest's threshold)")
    cp.add_argument("--out", type=Path, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command == "compare":
            threshold = args.occupancy
            if threshold is None:
                manifest = json.loads((args.train_dir / "manifest.json").read_text())
                threshold = manifest["experiment"]["occupancy_threshold"]
            rows = compare(args.train_dir, args.benchmark_dir, threshold)
            out = args.out or args.train_dir
            out.mkdir(parents=True, exist_ok=True)
            header = ["n", "linf_steps", "l1_steps", "n_states", "mean_field_error"]
            write_csv(out / "comparison.csv", header, rows)
            print(",".join(header))
            for r in rows:
                print(",".join(_fmt(v) for v in r))
            return 0
        overrides = {k: getattr(args, k) for k in
                     ("problem", "regime", "episodes", "runs", "seed", "workers", "log_every")}
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            run_experiment(cfg, args.out)
        elif args.command == "benchmark":
            write_benchmark(cfg, args.out)
        else:
            res = run_fixed_point(cfg, args.out)
            if not res.converged:
                print("fixed-point iteration did not converge", file=sys.stderr)
                return 2
        return 0
    except (ConfigError, GridMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except benchmarks.SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
