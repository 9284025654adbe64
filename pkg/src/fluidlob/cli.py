"""Command-line front door: config ingestion, experiment orchestration, and
deterministic CSV/JSON emission.

Exit status: 0 on pass, 1 on validation errors (bad config or parameters,
with a pointer to the failing schema key), 2 on experiment failure such as
non-convergence.  All files are written atomically (temp file + rename) and
floats are formatted to 12 significant digits so reruns are byte-identical.
The FLUIDLOB_THREADS environment variable caps parallel replication trials.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AssumptionError, BracketError, ConfigError, IntegrationError
from .fluid import FluidTrajectory, IntegratorConfig, integrate
from .model import ModelConfig, check_assumptions, load_config
from .sim import ConvergenceTable, SimConfig, SimPath, replicate, simulate
from .stability import (
    global_stability_experiment,
    local_stability_experiment,
    solve_equilibrium,
    spectrum,
)

__all__ = ["ExperimentSpec", "run", "emit_plotdata", "main"]

COMMANDS = (
    "check",
    "equilibrium",
    "spectrum",
    "fluid",
    "simulate",
    "converge",
    "stability-local",
    "stability-global",
)


@dataclass
class ExperimentSpec:
    """One experiment: a command, a model config file, and its parameters."""

    command: str
    model_config_path: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"command: unknown '{self.command}' (one of {COMMANDS})")
        if not Path(self.model_config_path).is_file():
            raise ConfigError(f"model_config_path: no such file '{self.model_config_path}'")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2) + "\n")


def _csv_text(header: list[str], rows, meta: dict | None = None) -> str:
    lines = []
    if meta:
        for key in sorted(meta):
            lines.append(f"# {key}={_fmt(meta[key])}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    return "\n".join(lines) + "\n"


def emit_plotdata(obj, out) -> Path:
    """Write a trajectory, simulated path, or convergence table as CSV.

    Column layouts: trajectory t,q1..qN,W; simulated path
    t,q1..qN,ad1..adN,ao1..aoN,d1..dN,routed0 (seed and n recorded as '# key=value'
    metadata lines); convergence table n,rep,sup_distance.  Formatting is fixed
    at 12 significant digits, so identical inputs produce byte-identical files.
    """
    out = Path(out)
    if isinstance(obj, FluidTrajectory):
        n = obj.states.shape[1]
        header = ["t"] + [f"q{i + 1}" for i in range(n)] + ["W"]
        rows = (
            [obj.times[k], *obj.states[k], obj.workload[k]] for k in range(len(obj.times))
        )
        _atomic_write(out, _csv_text(header, rows))
    elif isinstance(obj, SimPath):
        n = obj.q_scaled.shape[1]
        header = (
            ["t"]
            + [f"q{i + 1}" for i in range(n)]
            + [f"ad{i + 1}" for i in range(n)]
            + [f"ao{i + 1}" for i in range(n)]
            + [f"d{i + 1}" for i in range(n)]
            + ["routed0"]
        )
        rows = (
            [
                obj.times[k],
                *obj.q_scaled[k],
                *obj.arrivals_dedicated[k],
                *obj.arrivals_optimized[k],
                *obj.served[k],
                obj.routed_zero[k],
            ]
            for k in range(len(obj.times))
        )
        _atomic_write(out, _csv_text(header, rows, meta={"seed": obj.seed, "n": obj.n}))
    elif isinstance(obj, ConvergenceTable):
        _atomic_write(
            out,
            _csv_text(["n", "rep", "sup_distance"], obj.rows, meta={"seed_base": obj.seed_base}),
        )
    else:
        raise TypeError(f"cannot emit plot data for {type(obj).__name__}")
    return out


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",") if x != ""])
    except ValueError:
        raise ConfigError(f"vector parameter: cannot parse '{text}'") from None


def _threads() -> int:
    raw = os.environ.get("FLUIDLOB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _icfg(cfg: ModelConfig, params: dict) -> IntegratorConfig | None:
    if params.get("dt") is None:
        return None
    return IntegratorConfig(dt=float(params["dt"]), refine_check=bool(params.get("refine", False)))


def _q0(cfg: ModelConfig, params: dict) -> np.ndarray:
    if params.get("q0") is None:
        return np.ones(cfg.n_exchanges)
    q0 = _parse_vector(params["q0"])
    if len(q0) != cfg.n_exchanges:
        raise ConfigError(f"q0: expected {cfg.n_exchanges} entries, got {len(q0)}")
    return q0


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate_params(command: str, params: dict) -> None:
    if "horizon" in params:
        _require(float(params["horizon"]) >= 0, "T: must be nonnegative")
    if command in ("fluid", "stability-local", "stability-global"):
        _require(float(params.get("horizon", 1)) > 0, "T: must be positive")
    if "n" in params:
        _require(int(params["n"]) >= 1, "n: must be a positive integer")
    if "reps" in params:
        _require(int(params["reps"]) >= 1, "reps: must be at least 1")
    if "directions" in params:
        _require(int(params["directions"]) >= 1, "directions: must be at least 1")
    if "n_inits" in params:
        _require(int(params["n_inits"]) >= 1, "inits: must be at least 1")
    if "box" in params:
        _require(float(params["box"]) > 0, "box: must be positive")
    if "epsilon" in params:
        _require(float(params["epsilon"]) >= 0, "epsilon: must be nonnegative")
    if "dt" in params and params["dt"] is not None:
        _require(float(params["dt"]) > 0, "dt: must be positive")
    if "deltas" in params:
        _require(
            all(float(x) >= 0 for x in str(params["deltas"]).split(",")),
            "deltas: must be nonnegative",
        )
    if "n_values" in params:
        _require(
            all(int(x) >= 1 for x in str(params["n_values"]).split(",")),
            "n: scaling levels must be positive integers",
        )


def run(spec: ExperimentSpec) -> int:
    """Execute one experiment, write its artifacts, and print a summary line."""
    cfg = load_config(spec.model_config_path)
    params = spec.params
    _validate_params(spec.command, params)
    outdir = Path(params.get("outdir", "out"))
    name = Path(spec.model_config_path).stem

    if spec.command == "check":
        report = check_assumptions(cfg, _q0(cfg, params))
        path = outdir / f"check_{name}.json"
        _write_json(path, report.to_dict())
        print(
            f"check {name}: cond_i={report.cond_i_holds} cond_ii={report.cond_ii_holds} "
            f"cond_iv={report.cond_iv_holds} kappa={report.kappa} -> {path}"
        )
        return 0

    if spec.command == "equilibrium":
        eq = solve_equilibrium(cfg)
        path = outdir / f"equilibrium_{name}.json"
        _write_json(path, eq.to_dict())
        print(f"equilibrium {name}: w_star={eq.w_star:.6f} residual={eq.residual:.2e} -> {path}")
        return 0

    if spec.command == "spectrum":
        eq = solve_equilibrium(cfg)
        rep = spectrum(cfg, eq.q_star)
        path = outdir / f"spectrum_{name}.json"
        _write_json(path, rep.to_dict())
        print(
            f"spectrum {name}: verdict={rep.verdict} max_real={rep.max_real_part:.3e} "
            f"det_err={rep.det_identity_max_rel_err:.2e} -> {path}"
        )
        return 0 if rep.verdict == "stable" else 2

    if spec.command == "fluid":
        q0 = _q0(cfg, params)
        traj = integrate(cfg, q0, float(params["horizon"]), _icfg(cfg, params))
        path = emit_plotdata(traj, outdir / f"fluid_{name}.csv")
        print(
            f"fluid {name}: T={params['horizon']} terminal={np.round(traj.states[-1], 6).tolist()} "
            f"min_W={traj.min_workload:.6f} (kappa={traj.kappa:.6f}) -> {path}"
        )
        return 0

    if spec.command == "simulate":
        sim = SimConfig(
            n=int(params["n"]),
            horizon=float(params["horizon"]),
            sample_dt=float(params.get("sample_dt", max(float(params["horizon"]) / 200, 1e-9))),
            seed=int(params.get("seed", 0)),
            q0_scaled=_q0(cfg, params),
            epsilon=float(params.get("epsilon", 0.0)),
        )
        path_obj = simulate(cfg, sim)
        path = emit_plotdata(path_obj, outdir / f"sim_{name}_n{sim.n}_seed{sim.seed}.csv")
        print(
            f"simulate {name}: n={sim.n} T={sim.horizon} seed={sim.seed} "
            f"terminal={np.round(path_obj.q_scaled[-1], 6).tolist()} -> {path}"
        )
        return 0

    if spec.command == "converge":
        n_values = [int(x) for x in str(params["n_values"]).split(",")]
        sim = SimConfig(
            n=n_values[0],
            horizon=float(params["horizon"]),
            sample_dt=float(params.get("sample_dt", max(float(params["horizon"]) / 200, 1e-9))),
            seed=int(params.get("seed", 0)),
            q0_scaled=_q0(cfg, params),
            epsilon=float(params.get("epsilon", 0.0)),
        )
        table = replicate(cfg, sim, n_values, int(params["reps"]), max_workers=_threads())
        path = emit_plotdata(table, outdir / f"converge_{name}.csv")
        medians = [med for (_, med, _) in table.summary]
        decreasing = all(a > b for a, b in zip(medians, medians[1:]))
        print(
            f"converge {name}: n={n_values} medians={[round(m, 5) for m in medians]} "
            f"decreasing={decreasing} -> {path}"
        )
        return 0 if decreasing else 2

    if spec.command == "stability-local":
        eq = solve_equilibrium(cfg)
        report = local_stability_experiment(
            cfg,
            eq,
            deltas=[float(x) for x in str(params["deltas"]).split(",")],
            horizon=float(params["horizon"]),
            directions=int(params.get("directions", 16)),
            seed=int(params.get("seed", 0)),
            icfg=_icfg(cfg, params),
        )
        _write_json(outdir / f"stability_local_{name}.json", report.to_dict())
        csv_path = outdir / f"stability_local_{name}.csv"
        _atomic_write(
            csv_path,
            _csv_text(
                ["delta", "direction", "terminal_distance", "min_workload", "kappa", "ok"],
                (
                    [t.delta, t.direction, t.terminal_distance, t.min_workload, t.kappa, int(t.ok)]
                    for t in report.trials
                ),
                meta={"seed": report.seed},
            ),
        )
        worst = max((t.terminal_distance for t in report.trials), default=float("nan"))
        print(f"stability-local {name}: passed={report.passed} worst={worst:.3e} -> {csv_path}")
        return 0 if report.passed else 2

    if spec.command == "stability-global":
        report = global_stability_experiment(
            cfg,
            n_inits=int(params.get("n_inits", 50)),
            box=float(params.get("box", 5.0)),
            horizon=float(params["horizon"]),
            seed=int(params.get("seed", 0)),
            icfg=_icfg(cfg, params),
        )
        _write_json(outdir / f"stability_global_{name}.json", report.to_dict())
        csv_path = outdir / f"stability_global_{name}.csv"
        _atomic_write(
            csv_path,
            _csv_text(
                ["trial", "terminal_distance", "workload_monotone", "tube_entry_time", "ok"],
                (
                    [
                        k,
                        t.terminal_distance,
                        int(t.workload_monotone),
                        t.tube_entry_time if t.tube_entry_time is not None else float("nan"),
                        int(t.ok),
                    ]
                    for k, t in enumerate(report.trials)
                ),
                meta={"seed": report.seed},
            ),
        )
        worst = max((t.terminal_distance for t in report.trials), default=float("nan"))
        print(f"stability-global {name}: passed={report.passed} worst={worst:.3e} -> {csv_path}")
        return 0 if report.passed else 2

    raise ConfigError(f"command: unknown '{spec.command}'")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fluidlob",
        description="Order-routing queueing model: simulation, fluid limit, and stability studies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **flags):
        p = sub.add_parser(name)
        p.add_argument("config", help="model config JSON file")
        p.add_argument("-o", "--outdir", default="out", help="output directory (default: out)")
        for flag, kw in flags.items():
            p.add_argument(flag, **kw)
        return p

    add("check", **{"--q0": dict(default=None, help="initial queues, comma separated")})
    add("equilibrium")
    add("spectrum")
    add(
        "fluid",
        **{
            "--q0": dict(default=None),
            "--T": dict(dest="horizon", required=True, type=float),
            "--dt": dict(type=float, default=None),
            "--refine": dict(action="store_true"),
        },
    )
    add(
        "simulate",
        **{
            "--q0": dict(default=None),
            "--T": dict(dest="horizon", required=True, type=float),
            "--n": dict(required=True, type=int),
            "--seed": dict(type=int, default=0),
            "--sample-dt": dict(dest="sample_dt", type=float, default=None),
            "--epsilon": dict(type=float, default=0.0),
        },
    )
    add(
        "converge",
        **{
            "--q0": dict(default=None),
            "--T": dict(dest="horizon", required=True, type=float),
            "--n": dict(dest="n_values", required=True, help="comma-separated scaling levels"),
            "--reps": dict(required=True, type=int),
            "--seed": dict(type=int, default=0),
            "--sample-dt": dict(dest="sample_dt", type=float, default=None),
        },
    )
    add(
        "stability-local",
        **{
            "--deltas": dict(required=True, help="comma-separated perturbation radii"),
            "--T": dict(dest="horizon", required=True, type=float),
            "--directions": dict(type=int, default=16),
            "--seed": dict(type=int, default=0),
            "--dt": dict(type=float, default=None),
        },
    )
    add(
        "stability-global",
        **{
            "--inits": dict(dest="n_inits", type=int, default=50),
            "--box": dict(type=float, default=5.0),
            "--T": dict(dest="horizon", required=True, type=float),
            "--seed": dict(type=int, default=0),
            "--dt": dict(type=float, default=None),
        },
    )
    return parser


def main(argv=None) -> int:
    args = vars(_build_parser().parse_args(argv))
    command = args.pop("command")
    config = args.pop("config")
    params = {k: v for k, v in args.items() if v is not None}
    try:
        spec = ExperimentSpec(command=command, model_config_path=config, params=params)
        return run(spec)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AssumptionError, BracketError, IntegrationError, ValueError) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
