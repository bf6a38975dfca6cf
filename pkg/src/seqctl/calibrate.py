"""Calibration of Lagrange multipliers to prescribed error levels.

Problem I fixes a target for every off-diagonal error probability
``alpha_ij``; Problem II fixes the total error ``beta_i`` under each
hypothesis and ties the multipliers to one value per row.  Each outer
iteration solves for the optimal test at the current multipliers, evaluates
it, and rescales every free multiplier by ``(achieved / target) ** gamma``.

Error probabilities can respond steeply to the multipliers, so two safeguards
keep the update stable: a multiplier changes by at most a factor of two per
iteration, and its exponent ``gamma`` is halved each time its error crosses
the target.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .criteria import LossSpec
from .evaluate import EvalReport, exact_eval, mc_eval
from .exceptions import CalibrationError, CalibrationWarning, ConfigError
from .model import ControlledModel, DiscreteModel
from .policy import DEFAULT_HORIZON_CAP, Policy
from .value import GridSpec, solve_rho

PROBLEM_I = "problem1"
PROBLEM_II = "problem2"

# achieved/target ratios are clipped to this range before damping, so an
# error that happens to be (numerically) zero cannot collapse a multiplier
RATIO_CLIP = (1e-3, 1e3)
# per-iteration bound on a multiplier's change
STEP_CLIP = (0.5, 2.0)
MIN_GAMMA = 1e-3


@dataclass
class CalibrationTask:
    """Targets and settings for :func:`calibrate`.

    ``targets`` is a ``k x k`` matrix of ``alpha_ij`` targets (diagonal
    ignored) for Problem I, or a length-``k`` vector of ``beta_i`` targets
    for Problem II.
    """

    mode: str
    targets: np.ndarray
    initial: object = 10.0
    rtol: float = 0.1
    max_iter: int = 60
    backend: str = "exact"
    reps: int = 10_000
    seed: int = 0
    gamma: float = 0.8
    cost_weights: np.ndarray | None = None
    grid: GridSpec | None = None
    solver_tol: float = 1e-6
    solver_max_iter: int = 1000
    horizon_cap: int = DEFAULT_HORIZON_CAP

    def __post_init__(self):
        if self.mode not in (PROBLEM_I, PROBLEM_II):
            raise ConfigError(f"mode must be {PROBLEM_I!r} or {PROBLEM_II!r}, got {self.mode!r}")
        t = np.array(self.targets, dtype=float)
        if self.mode == PROBLEM_I:
            if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] < 2:
                raise ConfigError("Problem I targets must be a k x k matrix")
            free = t[~np.eye(t.shape[0], dtype=bool)]
        else:
            if t.ndim != 1 or t.size < 2:
                raise ConfigError("Problem II targets must be a vector of length k")
            free = t
        if np.any(~(free > 0) | ~(free < 1)):
            raise ConfigError("error targets must lie in (0, 1)")
        if self.mode == PROBLEM_I:
            np.fill_diagonal(t, 0.0)
        self.targets = t
        if not self.rtol > 0:
            raise ConfigError("rtol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.backend not in ("exact", "monte_carlo"):
            raise ConfigError("backend must be 'exact' or 'monte_carlo'")

    @property
    def k(self) -> int:
        return self.targets.shape[0]

    def initial_spec(self) -> LossSpec:
        k = self.k
        init = np.asarray(self.initial, dtype=float)
        if self.mode == PROBLEM_I:
            lam = init * (1 - np.eye(k)) if init.ndim == 0 else init
            return LossSpec(lam, self.cost_weights)
        rows = np.full(k, float(init)) if init.ndim == 0 else init
        return LossSpec.problem2(rows, self.cost_weights)

    def achieved(self, report: EvalReport) -> np.ndarray:
        """Achieved errors in the shape of ``targets``."""
        if self.mode == PROBLEM_I:
            a = report.alpha.copy()
            np.fill_diagonal(a, 0.0)
            return a
        return report.beta.copy()

    def free_mask(self) -> np.ndarray:
        if self.mode == PROBLEM_I:
            return ~np.eye(self.k, dtype=bool)
        return np.ones(self.k, dtype=bool)


@dataclass
class TraceEntry:
    iteration: int
    lam: np.ndarray
    achieved: np.ndarray
    asn: np.ndarray
    lagrangian: float


@dataclass
class CalibrationResult:
    """Returned state of a calibration run.

    ``within_band`` is true when every achieved error is within ``rtol`` of
    its target; ``meets_constraints`` when every achieved error is at most its
    target (the constraint form of the problem).
    """

    spec: LossSpec
    policy: Policy
    report: EvalReport
    trace: list = field(default_factory=list)
    within_band: bool = False
    meets_constraints: bool = False
    status: str = "converged"

    def __iter__(self):
        return iter((self.spec, self.policy, self.report, self.trace))

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(trace: list) -> str:
    """One row per outer iteration: multipliers, achieved errors, ASN, Lagrangian."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not trace:
        return ""
    first = trace[0]
    k = first.lam.shape[0]
    pairs = [(i, j) for i in range(k) for j in range(k) if i != j]
    header = ["iteration"] + [f"lambda_{i + 1}{j + 1}" for i, j in pairs]
    if first.achieved.ndim == 2:
        header += [f"alpha_{i + 1}{j + 1}" for i, j in pairs]
    else:
        header += [f"beta_{i + 1}" for i in range(k)]
    header += [f"asn_{i + 1}" for i in range(k)] + ["lagrangian"]
    w.writerow(header)
    for e in trace:
        row = [e.iteration] + [repr(float(e.lam[i, j])) for i, j in pairs]
        if e.achieved.ndim == 2:
            row += [repr(float(e.achieved[i, j])) for i, j in pairs]
        else:
            row += [repr(float(v)) for v in e.achieved]
        row += [repr(float(v)) for v in e.asn] + [repr(float(e.lagrangian))]
        w.writerow(row)
    return buf.getvalue()


def solve_and_evaluate(model: ControlledModel, spec: LossSpec, task: CalibrationTask):
    """Optimal policy for ``spec`` and its operating characteristics under ``task``'s backend."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = solve_rho(model, spec, task.grid, task.solver_tol, task.solver_max_iter)
    policy = Policy(model, spec, table, task.horizon_cap)
    if task.backend == "exact":
        if not isinstance(model, DiscreteModel):
            raise ConfigError("the exact backend needs a discrete model")
        report = exact_eval(model, policy, spec)
    else:
        report = mc_eval(model, policy, task.reps, task.seed, spec)
    return policy, report


def _relative_miss(task: CalibrationTask, achieved: np.ndarray) -> float:
    free = task.free_mask()
    t = task.targets[free]
    return float(np.max(np.abs(achieved[free] - t) / t))


def _update(task: CalibrationTask, spec: LossSpec, achieved: np.ndarray,
            gamma: np.ndarray) -> LossSpec:
    free = task.free_mask()
    ratio = np.ones_like(task.targets)
    ratio[free] = np.clip(achieved[free] / task.targets[free], *RATIO_CLIP)
    factor = np.clip(ratio ** gamma, *STEP_CLIP)
    if task.mode == PROBLEM_I:
        return LossSpec(spec.lam * np.where(free, factor, 1.0), spec.cost_weights)
    rows = spec.lam.max(axis=1) * factor
    return LossSpec.problem2(rows, spec.cost_weights)


def calibrate(model: ControlledModel, task: CalibrationTask) -> CalibrationResult:
    """Search multipliers whose optimal test meets ``task``'s error targets.

    Stops as soon as every achieved error is within ``rtol`` of its target.
    If the multipliers revisit an earlier value (a cycle) the best iterate so
    far is returned with a :class:`CalibrationWarning`; if iterations run out
    the last iterate is returned with the same warning.  The result unpacks
    as ``(spec, policy, report, trace)``.
    """
    if model.k != task.k:
        raise ConfigError(f"targets are for k={task.k} but the model has k={model.k}")
    if not model.is_identifiable():
        raise CalibrationError(
            "the hypotheses induce identical observation laws under every control; "
            "no multipliers can separate them"
        )
    spec = task.initial_spec()
    trace: list = []
    seen: dict = {}
    best = None
    gamma = np.full(task.targets.shape, float(task.gamma))
    prev_side = None
    for it in range(1, task.max_iter + 1):
        policy, report = solve_and_evaluate(model, spec, task)
        achieved = task.achieved(report)
        trace.append(TraceEntry(it, spec.lam.copy(), achieved, report.asn.copy(), report.lagrangian))
        miss = _relative_miss(task, achieved)
        if best is None or miss < best[0]:
            best = (miss, spec, policy, report)
        if miss <= task.rtol:
            return _result(task, spec, policy, report, trace, "converged")
        key = tuple(np.round(np.log(spec.lam[spec.lam > 0]), 9))
        if key in seen:
            warnings.warn(
                f"calibration multipliers cycled (iteration {it} repeats {seen[key]}); "
                "returning the best iterate",
                CalibrationWarning,
                stacklevel=2,
            )
            _, spec, policy, report = best
            return _result(task, spec, policy, report, trace, "cycle")
        seen[key] = it
        # halve the damping exponent of a multiplier whose error crossed its target
        side = np.sign(achieved - task.targets)
        if prev_side is not None:
            crossed = side * prev_side < 0
            gamma = np.where(crossed, np.maximum(gamma / 2, MIN_GAMMA), gamma)
        prev_side = side
        if it < task.max_iter:
            spec = _update(task, spec, achieved, gamma)
    warnings.warn(
        f"calibration did not reach rtol={task.rtol} in {task.max_iter} iterations "
        f"(relative miss {_relative_miss(task, task.achieved(report)):.3g})",
        CalibrationWarning,
        stacklevel=2,
    )
    return _result(task, spec, policy, report, trace, "max_iter")


def _result(task, spec, policy, report, trace, status) -> CalibrationResult:
    achieved = task.achieved(report)
    free = task.free_mask()
    return CalibrationResult(
        spec, policy, report, trace,
        within_band=_relative_miss(task, achieved) <= task.rtol,
        meets_constraints=bool(np.all(achieved[free] <= task.targets[free])),
        status=status,
    )


@dataclass
class ProbeRow:
    factor: float
    lam_ij: float
    alpha_ij: float
    report: EvalReport


def error_monotonicity_probe(model: ControlledModel, spec: LossSpec, index: tuple,
                             factors, task: CalibrationTask | None = None) -> list:
    """Achieved ``alpha_ij`` as ``lambda_ij`` alone is scaled by each factor.

    ``index`` is ``(i, j)`` with hypotheses numbered from 1.  ``task`` only
    supplies solver and backend settings (grid, tolerances, reps, seed).
    """
    i, j = index[0] - 1, index[1] - 1
    if i == j or not (0 <= i < spec.k and 0 <= j < spec.k):
        raise ConfigError(f"index {index} is not an off-diagonal pair")
    factors = [float(f) for f in factors]
    if any(f <= 0 for f in factors):
        raise ConfigError("probe factors must be positive")
    if task is None:
        targets = np.full((spec.k, spec.k), 0.5)
        task = CalibrationTask(PROBLEM_I, targets, backend="exact"
                               if isinstance(model, DiscreteModel) else "monte_carlo")
    rows = []
    for f in factors:
        lam = spec.lam.copy()
        lam[i, j] *= f
        scaled = LossSpec(lam, spec.cost_weights)
        _, report = solve_and_evaluate(model, scaled, task)
        rows.append(ProbeRow(f, float(lam[i, j]), float(report.alpha[i, j]), report))
    return rows
