"""``seqctl`` command-line interface.

Every command reads one JSON run configuration (``--config``)::

    {
      "model": {...},
      "loss": {"lambda": [[...]], "cost_weights": [...]}   or   "bayes": {...},
      "grid": {"lo": -25, "hi": 25, "m": 1001},
      "solver": {"tol": 1e-6, "max_iter": 1000},
      "policy": {"horizon_cap": 10000},
      "eval": {"backend": "exact", "reps": 100000, "seed": 1},
      "calibrate": {"mode": "problem1", "targets": [[0, 0.05], [0.05, 0]]},
      "out": "run"
    }

Exit codes: 0 success, 2 configuration or input error, 3 value iteration
did not converge, 4 policy/model fingerprint mismatch.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .calibrate import CalibrationTask, calibrate
from .criteria import BayesSpec, LossSpec, loss_from_config
from .evaluate import EvalReport, exact_eval, mc_eval
from .exceptions import (
    AbsoluteContinuityError,
    CalibrationError,
    ConfigError,
    ConvergenceWarning,
    FingerprintError,
)
from .model import ControlledModel, DiscreteModel, LikelihoodState, gaussian_demo, model_from_config
from .policy import DEFAULT_HORIZON_CAP, ForcedControlPolicy, Policy, decide, next_control, should_stop
from .value import GridSpec, ValueTable, solve_rho, trivial_verdict

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_FINGERPRINT = 4

POLICY_FILE = "policy.json"
TABLE_FILE = "value_table.json"


@dataclass
class RunConfig:
    model: ControlledModel
    spec: LossSpec
    bayes: BayesSpec | None
    grid: GridSpec
    solver_tol: float = 1e-6
    solver_max_iter: int = 1000
    horizon_cap: int = DEFAULT_HORIZON_CAP
    backend: str | None = None
    reps: int = 10_000
    seed: int = 0
    calibrate: dict = field(default_factory=dict)
    out: str = "seqctl_out"
    source: str = "<config>"

    @classmethod
    def from_dict(cls, cfg: dict, source: str = "<config>") -> "RunConfig":
        def fail(where, exc):
            raise ConfigError(f"{source}: {where}: {exc}") from exc

        if not isinstance(cfg, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        if "model" not in cfg:
            raise ConfigError(f"{source}: missing 'model' block")
        try:
            model = model_from_config(cfg["model"])
        except (ConfigError, ValueError, KeyError, TypeError) as exc:
            fail("model", exc)
        problems = model.validate()
        if problems:
            raise ConfigError(f"{source}: model: " + "; ".join(problems))
        try:
            spec, bayes = loss_from_config(cfg)
        except (ConfigError, ValueError, TypeError) as exc:
            fail("loss/bayes", exc)
        if spec.k != model.k:
            raise ConfigError(f"{source}: loss is for k={spec.k} but the model has k={model.k}")
        try:
            grid = GridSpec.from_config(cfg.get("grid", {}), model.k)
            solver = cfg.get("solver", {})
            ev = cfg.get("eval", {})
            backend = ev.get("backend")
            if backend not in (None, "exact", "monte_carlo"):
                raise ConfigError(f"unknown backend {backend!r}")
            return cls(
                model, spec, bayes, grid,
                solver_tol=float(solver.get("tol", 1e-6)),
                solver_max_iter=int(solver.get("max_iter", 1000)),
                horizon_cap=int(cfg.get("policy", {}).get("horizon_cap", DEFAULT_HORIZON_CAP)),
                backend=backend,
                reps=int(ev.get("reps", 10_000)),
                seed=int(ev.get("seed", 0)),
                calibrate=dict(cfg.get("calibrate", {})),
                out=str(cfg.get("out", "seqctl_out")),
                source=source,
            )
        except (ConfigError, ValueError, TypeError) as exc:
            fail("grid/solver/policy/eval", exc)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(cfg, path)


def _dump_json(path: str, data: dict) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_report(out: str, report: EvalReport, stem: str = "report") -> None:
    with open(os.path.join(out, f"{stem}.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out, f"{stem}.csv"), "w") as fh:
        fh.write(report.to_csv())


def _out_dir(args, rc: RunConfig | None) -> str:
    out = args.out or (rc.out if rc is not None else "seqctl_out")
    os.makedirs(out, exist_ok=True)
    return out


def _solve(rc: RunConfig) -> tuple[ValueTable, bool]:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        table = solve_rho(rc.model, rc.spec, rc.grid, rc.solver_tol, rc.solver_max_iter)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return table, table.converged


def _save_policy(out: str, policy: Policy) -> None:
    policy.table.save(os.path.join(out, TABLE_FILE))
    policy.save(os.path.join(out, POLICY_FILE), TABLE_FILE)


def cmd_solve(args) -> int:
    rc = RunConfig.load(args.config)
    out = _out_dir(args, rc)
    table, converged = _solve(rc)
    policy = Policy(rc.model, rc.spec, table, rc.horizon_cap)
    _save_policy(out, policy)
    verdict = trivial_verdict(rc.model, rc.spec, table)
    print(f"l_0 = {verdict.l0:.6g}")
    print(f"stage_cost(1) + R(1) = {verdict.sampling_bound:.6g}")
    print(verdict.describe())
    print(f"initial control: {policy.initial_control}")
    print(f"iterations: {table.iterations}, residual: {table.residual:.6g}")
    print(f"wrote {os.path.join(out, POLICY_FILE)} and {os.path.join(out, TABLE_FILE)}")
    return EXIT_OK if converged else EXIT_CONVERGENCE


def _load_policy(args, rc: RunConfig) -> Policy:
    path = args.policy or os.path.join(rc.out, POLICY_FILE)
    try:
        return Policy.load(path, rc.model, rc.spec)
    except OSError as exc:
        raise ConfigError(f"cannot read policy {path}: {exc}") from exc


def _evaluate(args, monte_carlo: bool) -> int:
    rc = RunConfig.load(args.config)
    policy = _load_policy(args, rc)
    out = _out_dir(args, rc)
    reps = args.reps if args.reps is not None else rc.reps
    seed = args.seed if args.seed is not None else rc.seed
    use_mc = monte_carlo or rc.backend == "monte_carlo" or not isinstance(rc.model, DiscreteModel)
    if use_mc:
        report = mc_eval(rc.model, policy, reps, seed, rc.spec, rc.bayes)
    else:
        report = exact_eval(rc.model, policy, rc.spec, rc.bayes)
    print(report.format_table())
    _write_report(out, report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    return _evaluate(args, monte_carlo=False)


def cmd_simulate(args) -> int:
    return _evaluate(args, monte_carlo=True)


def cmd_calibrate(args) -> int:
    rc = RunConfig.load(args.config)
    block = dict(rc.calibrate)
    if "targets" not in block:
        raise ConfigError(f"{rc.source}: calibrate: missing 'targets'")
    backend = block.pop("backend", rc.backend or ("exact" if isinstance(rc.model, DiscreteModel)
                                                   else "monte_carlo"))
    try:
        task = CalibrationTask(
            mode=block.pop("mode", "problem1"),
            targets=block.pop("targets"),
            initial=block.pop("initial", 10.0),
            rtol=float(block.pop("rtol", 0.1)),
            max_iter=int(block.pop("max_iter", 60)),
            backend=backend,
            reps=args.reps if args.reps is not None else rc.reps,
            seed=args.seed if args.seed is not None else rc.seed,
            gamma=float(block.pop("gamma", 0.8)),
            cost_weights=rc.spec.cost_weights,
            grid=rc.grid,
            solver_tol=rc.solver_tol,
            solver_max_iter=rc.solver_max_iter,
            horizon_cap=rc.horizon_cap,
        )
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"{rc.source}: calibrate: {exc}") from exc
    if block:
        raise ConfigError(f"{rc.source}: calibrate: unknown keys {sorted(block)}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = calibrate(rc.model, task)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = _out_dir(args, rc)
    _dump_json(os.path.join(out, "loss.json"), {"loss": result.spec.to_config()})
    _save_policy(out, result.policy)
    _write_report(out, result.report)
    with open(os.path.join(out, "trace.csv"), "w") as fh:
        fh.write(result.trace_csv())
    print(f"status: {result.status} after {len(result.trace)} iterations")
    print("lambda = " + json.dumps([[float(f"{v:.6g}") for v in row] for row in result.spec.lam]))
    print(result.report.format_table())
    print(f"within tolerance band: {result.within_band}; "
          f"meets error constraints: {result.meets_constraints}")
    return EXIT_OK


def _parse_observation(model: ControlledModel, text: str):
    if isinstance(model, DiscreteModel):
        for y in model.outcomes:
            if str(y) == text:
                return y
        raise ValueError(f"unknown outcome {text!r}; expected one of "
                         + ", ".join(str(y) for y in model.outcomes))
    return float(text)


def _fmt_vec(v) -> str:
    return "(" + ", ".join(f"{x:.6g}" for x in np.atleast_1d(v)) + ")"


def run_session(policy: Policy, lines, write=print) -> int | None:
    """Drive ``policy`` with observations from ``lines``.

    Returns the accepted hypothesis (numbered from 1), or ``None`` if the
    input ends or ``quit`` is entered first.
    """
    model, spec = policy.model, policy.spec
    z = LikelihoodState.initial(model.k)
    control = next_control(policy, z)
    write(f"initial control: {control}")
    for raw in lines:
        text = raw.strip()
        if not text:
            continue
        if text == "quit":
            write("session aborted; no decision")
            return None
        try:
            y = _parse_observation(model, text)
        except ValueError as exc:
            write(f"cannot parse observation: {exc}; try again")
            continue
        log_z = np.asarray(z.log_z) + model.log_lr_increment(control, y)
        z = LikelihoodState(tuple(float(v) for v in log_z), z.n + 1)
        R, _ = policy.continuation(log_z)
        write(f"n = {z.n}  x = {control}  y = {y}  z = {_fmt_vec(z.z)}  "
              f"g(z) = {float(spec.g(log_z)):.6g}  stage + R(z) = {float(spec.stage(log_z) + R):.6g}")
        if should_stop(policy, z):
            accepted = decide(policy, z)
            write(f"stop: accept H_{accepted} after {z.n} observations")
            return accepted
        control = next_control(policy, z)
        write(f"next control: {control}")
    write("input ended before a decision")
    return None


def cmd_apply(args) -> int:
    rc = RunConfig.load(args.config)
    policy = _load_policy(args, rc)
    try:
        run_session(policy, sys.stdin)
    except AbsoluteContinuityError as exc:
        print(f"session error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


@dataclass
class DemoResult:
    policy: Policy
    interval: tuple[float, float]
    single_interval: bool
    continuation_controls: dict
    report: EvalReport


# Only H_1 sampling is charged, so from large z the optimal test keeps sampling
# until the H_1 drift could bring it back; for lambda = 100 the upper threshold
# lies near log z = 193, beyond the default +25.  The demo grid extends past it
# at the default spacing of 0.05.
DEMO_GRID = GridSpec.default(2, -25.0, 250.0, 5501)


def demo_gaussian(reps: int = 100_000, seed: int = 1, lam: float = 100.0,
                  grid: GridSpec = DEMO_GRID) -> DemoResult:
    """Two normal means (1 and 2) with controls x in {1, 2} and lambda_12 = lambda_21 = ``lam``."""
    model = gaussian_demo()
    spec = LossSpec.symmetric(2, lam)
    table = solve_rho(model, spec, grid)
    policy = Policy(model, spec, table)
    nodes = table.grid.nodes()
    stop, ctrl = policy.rules(nodes)
    cont = np.flatnonzero(~stop)
    single = bool(cont.size and np.all(np.diff(cont) == 1))
    interval = (float(np.exp(nodes[cont[0], 0])), float(np.exp(nodes[cont[-1], 0]))) if cont.size \
        else (float("nan"), float("nan"))
    used = {model.controls[c]: int(np.count_nonzero(ctrl[cont] == c)) for c in range(len(model.controls))}
    report = mc_eval(model, policy, reps, seed, spec)
    return DemoResult(policy, interval, single, used, report)


def cmd_demo_gaussian(args) -> int:
    reps = args.reps if args.reps is not None else 100_000
    seed = args.seed if args.seed is not None else 1
    res = demo_gaussian(reps, seed)
    a, b = res.interval
    shape = "a single interval" if res.single_interval else "not a single interval"
    print(f"continuation region on the grid: z in [{a:.6g}, {b:.6g}] ({shape})")
    total = sum(res.continuation_controls.values())
    for x, count in res.continuation_controls.items():
        print(f"control x = {x}: {count} of {total} continuation nodes")
    print(f"initial control: {res.policy.initial_control}")
    print(res.report.format_table())
    if args.out:
        out = _out_dir(args, None)
        _save_policy(out, res.policy)
        _write_report(out, res.report)
    return EXIT_OK


def cmd_validate(args) -> int:
    rc = RunConfig.load(args.config)
    print(f"{rc.source}: ok (k = {rc.model.k}, {len(rc.model.controls)} controls, "
          f"grid {'x'.join(str(m) for m in rc.grid.shape())})")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "apply": cmd_apply,
    "demo-gaussian": cmd_demo_gaussian,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqctl", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"seqctl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name not in ("demo-gaussian",))
        p.add_argument("--policy")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--reps", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FingerprintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (ConfigError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
