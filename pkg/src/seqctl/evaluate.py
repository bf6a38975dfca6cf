"""Operating characteristics of sequential strategies.

``exact_eval`` propagates the probability mass of every reachable likelihood
state forward under each hypothesis (discrete models).  ``mc_eval``
simulates trajectories.  ``dp_oracle`` is the literal backward induction over
all observation paths with no grid, used to check the value module, and
``dominance_scan`` compares a policy with its one-step perturbations.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .criteria import LossSpec, bayes_risk
from .exceptions import BudgetError
from .model import ControlledModel, DiscreteModel
from .policy import cell_labels, state_keys

DEFAULT_BUDGET = 10_000_000


@dataclass
class EvalReport:
    """``alpha[i, j]`` is the probability of accepting ``H_{j+1}`` under ``H_{i+1}``."""

    alpha: np.ndarray
    asn: np.ndarray
    lagrangian: float
    truncation_mass: np.ndarray
    method: str
    reps: int | None = None
    seed: int | None = None
    alpha_se: np.ndarray | None = None
    asn_se: np.ndarray | None = None
    bayes_risk: float | None = None
    pruned_mass: np.ndarray | None = None
    max_depth: int = 0

    def __post_init__(self):
        if self.pruned_mass is None:
            self.pruned_mass = np.zeros(self.alpha.shape[0])

    @property
    def beta(self) -> np.ndarray:
        return self.alpha.sum(axis=1) - np.diag(self.alpha)

    @property
    def k(self) -> int:
        return self.alpha.shape[0]

    def weighted_asn(self, cost_weights) -> float:
        return float(np.dot(cost_weights, self.asn))

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "asn": self.asn.tolist(),
            "lagrangian": float(self.lagrangian),
            "truncation_mass": self.truncation_mass.tolist(),
            "pruned_mass": self.pruned_mass.tolist(),
            "bayes_risk": None if self.bayes_risk is None else float(self.bayes_risk),
            "max_depth": int(self.max_depth),
        }
        if self.method == "monte_carlo":
            out.update(reps=self.reps, seed=self.seed,
                       standard_errors={"alpha": self.alpha_se.tolist(), "asn": self.asn_se.tolist()})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["hypothesis", "asn", "beta", "truncation_mass", "pruned_mass"]
        header += [f"alpha_{j + 1}" for j in range(self.k)]
        if self.method == "monte_carlo":
            header += ["asn_se"] + [f"alpha_{j + 1}_se" for j in range(self.k)]
        w.writerow(header)
        for i in range(self.k):
            row = [i + 1, repr(float(self.asn[i])), repr(float(self.beta[i])),
                   repr(float(self.truncation_mass[i])), repr(float(self.pruned_mass[i]))]
            row += [repr(float(v)) for v in self.alpha[i]]
            if self.method == "monte_carlo":
                row += [repr(float(self.asn_se[i]))] + [repr(float(v)) for v in self.alpha_se[i]]
            w.writerow(row)
        return buf.getvalue()

    def format_table(self) -> str:
        lines = [f"method: {self.method}" + (f" (reps={self.reps}, seed={self.seed})"
                                              if self.method == "monte_carlo" else "")]
        head = f"{'H':>3} {'ASN':>12} {'beta':>12} " + " ".join(f"{'accept H' + str(j + 1):>12}"
                                                               for j in range(self.k))
        lines.append(head)
        for i in range(self.k):
            lines.append(f"{i + 1:>3} {self.asn[i]:>12.6g} {self.beta[i]:>12.6g} "
                         + " ".join(f"{v:>12.6g}" for v in self.alpha[i]))
        lines.append(f"Lagrangian L = {self.lagrangian:.6g}")
        if self.bayes_risk is not None:
            lines.append(f"Bayes risk = {self.bayes_risk:.6g}")
        if np.any(self.truncation_mass > 0):
            lines.append("truncation mass = " + ", ".join(f"{v:.6g}" for v in self.truncation_mass))
        if np.any(self.pruned_mass > 0):
            lines.append("pruned mass = " + ", ".join(f"{v:.6g}" for v in self.pruned_mass))
        return "\n".join(lines)


def lagrangian(spec: LossSpec, alpha, asn) -> float:
    """``sum_i c_i N_i + sum_{i != j} lambda_ij alpha_ij``."""
    return float(np.dot(spec.cost_weights, asn) + (spec.lam * np.asarray(alpha)).sum())


def _forward(model: ControlledModel, strategy, prune_mass: float, budget: int, visit=None):
    """Propagate per-hypothesis path mass through the strategy's state tree.

    Returns ``(alpha, asn, truncated, pruned, depth)``.  ``visit(n, log_z, mass,
    stop, ctrl)`` is called for every level after the stop rule is applied.
    """
    k = model.k
    d = k - 1
    alpha = np.zeros((k, k))
    asn = np.zeros(k)
    truncated = np.zeros(k)
    pruned = np.zeros(k)
    cap = strategy.horizon_cap
    log_z = np.zeros((1, d))
    mass = np.ones((1, k))
    ctrl = np.array([strategy.initial_control_index])
    if visit is not None:
        visit(0, log_z, mass, np.array([False]), ctrl)
    n = 0
    processed = 0
    while log_z.shape[0] > 0:
        new_z, new_m = [], []
        for c in np.unique(ctrl):
            sel = ctrl == c
            probs, log_inc = model.branch_probs(int(c))
            new_z.append((log_z[sel, None, :] + log_inc[None, :, :]).reshape(-1, d))
            new_m.append((mass[sel, None, :] * probs.T[None, :, :]).reshape(-1, k))
        cand_z = np.concatenate(new_z)
        cand_m = np.concatenate(new_m)
        live = cand_m.max(axis=1) > 0
        cand_z, cand_m = cand_z[live], cand_m[live]
        _, first, inverse = np.unique(state_keys(cand_z), axis=0, return_index=True,
                                      return_inverse=True)
        log_z = cand_z[first]
        mass = np.zeros((first.size, k))
        np.add.at(mass, inverse.ravel(), cand_m)
        n += 1
        small = mass.max(axis=1) < prune_mass
        if np.any(small):
            pruned += mass[small].sum(axis=0)
            asn += n * mass[small].sum(axis=0)
            log_z, mass = log_z[~small], mass[~small]
        processed += log_z.shape[0]
        if processed > budget:
            raise BudgetError(
                f"exact evaluation visited more than {budget} states; use Monte Carlo instead"
            )
        if log_z.shape[0] == 0:
            break
        stop, ctrl = strategy.rules(log_z)
        if visit is not None:
            visit(n, log_z, mass, stop, ctrl)
        if n >= cap:
            forced = ~stop
            truncated += mass[forced].sum(axis=0)
            asn += n * mass[forced].sum(axis=0)
        if np.any(stop):
            dec = strategy.decide_index(log_z[stop])
            stopped = mass[stop]
            for j in range(k):
                alpha[:, j] += stopped[dec == j].sum(axis=0)
            asn += n * stopped.sum(axis=0)
        if n >= cap:
            break
        keep = ~stop
        log_z, mass, ctrl = log_z[keep], mass[keep], ctrl[keep]
    return alpha, asn, truncated, pruned, n


def exact_eval(model: DiscreteModel, policy, spec: LossSpec | None = None, bayes=None,
               prune_mass: float = 1e-15, budget: int = DEFAULT_BUDGET) -> EvalReport:
    """Exact error matrix, ASN and Lagrangian of ``policy`` on a discrete model.

    States whose likelihood ratios coincide (to 1e-9 in log scale) are merged.
    Mass left undecided at the horizon cap is ``truncation_mass``; states whose
    reach probability is below ``prune_mass`` under every hypothesis are
    dropped into ``pruned_mass``.  Neither is assigned a decision.
    """
    if not isinstance(model, DiscreteModel):
        raise TypeError("exact evaluation needs a discrete model; use mc_eval")
    spec = spec or policy.spec
    alpha, asn, truncated, pruned, depth = _forward(model, policy, prune_mass, budget)
    rep = EvalReport(alpha, asn, lagrangian(spec, alpha, asn), truncated, "exact",
                     pruned_mass=pruned, max_depth=depth)
    if bayes is not None:
        rep.bayes_risk = bayes_risk(bayes, alpha, asn)
    return rep


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SEQCTL_THREADS", "1")))
    except ValueError:
        return 1


def _simulate(model, policy, i: int, reps: int, seed: int):
    """Trajectories under hypothesis ``i`` (0-based).

    Step ``n`` draws from a Philox generator keyed by ``(seed, i, n)`` and
    replication ``r`` takes the ``r``-th uniform of that stream.  A
    replication's path therefore depends only on ``(seed, i, r)``: not on
    ``reps``, on other replications, or on the thread layout.
    """
    d = model.k - 1
    log_z = np.zeros((reps, d))
    steps = np.zeros(reps, dtype=np.int64)
    decision = np.full(reps, -1)
    active = np.arange(reps)
    ctrl = np.full(reps, policy.initial_control_index)
    n = 0
    while active.size:
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i, n))))
        u = gen.random(int(active[-1]) + 1)[active]
        # random() can return exactly 0, where a normal quantile is infinite
        u = np.maximum(u, np.finfo(float).tiny)
        _, inc = model.sample(i + 1, ctrl, u)
        log_z[active] += inc
        n += 1
        steps[active] = n
        stop, ctrl = policy.rules(log_z[active])
        if np.any(stop):
            decision[active[stop]] = policy.decide_index(log_z[active[stop]])
        active = active[~stop]
        ctrl = ctrl[~stop]
        if n >= policy.horizon_cap:
            break
    return steps, decision


def mc_eval(model: ControlledModel, policy, reps: int, seed: int, spec: LossSpec | None = None,
            bayes=None) -> EvalReport:
    """Monte Carlo estimates with standard errors; bit-reproducible for a given seed."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    spec = spec or policy.spec
    k = model.k
    with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
        results = list(pool.map(lambda i: _simulate(model, policy, i, reps, seed), range(k)))
    alpha = np.zeros((k, k))
    asn = np.zeros(k)
    asn_se = np.zeros(k)
    trunc = np.zeros(k)
    for i, (steps, decision) in enumerate(results):
        for j in range(k):
            alpha[i, j] = np.count_nonzero(decision == j) / reps
        trunc[i] = np.count_nonzero(decision < 0) / reps
        asn[i] = steps.mean()
        asn_se[i] = steps.std(ddof=1) / np.sqrt(reps) if reps > 1 else 0.0
    alpha_se = np.sqrt(alpha * (1 - alpha) / reps)
    depth = int(max(int(s.max()) for s, _ in results))
    rep = EvalReport(alpha, asn, lagrangian(spec, alpha, asn), trunc, "monte_carlo", reps, seed,
                     alpha_se, asn_se, max_depth=depth)
    if bayes is not None:
        rep.bayes_risk = bayes_risk(bayes, alpha, asn)
    return rep


@dataclass(frozen=True)
class OracleEntry:
    n: int
    log_z: tuple
    value: float


def dp_oracle(model: DiscreteModel, spec: LossSpec, horizon: int,
              budget: int = DEFAULT_BUDGET) -> dict:
    """Backward induction over every control/outcome path up to ``horizon``.

    Works with the raw products ``f_i^n`` of densities along each path (no
    likelihood-ratio reduction, no grid).  Returns a dict keyed by
    ``(n, state key)`` of :class:`OracleEntry` holding ``V_n^N / f_1^n``.
    """
    if not isinstance(model, DiscreteModel):
        raise TypeError("dp_oracle needs a discrete model")
    n_x, n_y = len(model.controls), len(model.outcomes)
    if float(n_x * n_y) ** horizon > budget:
        raise BudgetError(f"{n_x * n_y}^{horizon} paths exceed the budget of {budget}")
    lam, cw, pmf = spec.lam, spec.cost_weights, model.pmf
    entries: dict = {}

    def l_n(f):
        return min(sum(lam[i, j] * f[i] for i in range(model.k) if i != j) for j in range(model.k))

    def V(n, f):
        stop_cost = l_n(f)
        if n == horizon:
            value = stop_cost
        else:
            R = min(sum(V(n + 1, [f[i] * pmf[i, xi, yi] for i in range(model.k)])
                        for yi in range(n_y))
                    for xi in range(n_x))
            value = min(stop_cost, sum(cw[i] * f[i] for i in range(model.k)) + R)
        if f[0] > 0:
            log_z = tuple(float(np.log(f[r] / f[0])) if f[r] > 0 else -np.inf
                          for r in range(1, model.k))
            key = (n, tuple(state_keys(np.array(log_z))))
            entries[key] = OracleEntry(n, log_z, value / f[0])
        return value

    V(0, [1.0] * model.k)
    return entries


@dataclass
class _Level:
    n: int
    log_z: np.ndarray
    keys: np.ndarray
    mass: np.ndarray
    stop: np.ndarray
    ctrl: np.ndarray
    succ: np.ndarray  # (N, max outcomes) index into the next level, -1 when pruned

    def index(self) -> dict:
        return {tuple(int(v) for v in key): i for i, key in enumerate(self.keys)}


def _grow(model: DiscreteModel, strategy, roots: dict, prune_mass: float,
          budget: int = DEFAULT_BUDGET) -> list:
    """Reachable state graph of ``strategy`` from ``roots``, one :class:`_Level` per stage.

    ``roots`` maps a stage ``n`` to ``(log_z, mass)`` arrays of starting states.
    A stage-0 root uses the strategy's initial control and never stops.
    Coinciding states are merged; states whose mass is below ``prune_mass``
    under every hypothesis are dropped.
    """
    k, d = model.k, model.k - 1
    q_max = len(model.outcomes)
    cap = strategy.horizon_cap
    branch = [model.branch_probs(c) for c in range(len(model.controls))]
    levels: list = []
    n = min(roots)
    cand_z = np.zeros((0, d))
    cand_m = np.zeros((0, k))
    pending = None  # (level, parent rows, outcome slot) for linking successors
    processed = 0
    while True:
        if n in roots:
            rz, rm = roots[n]
            cand_z = np.concatenate([cand_z, np.asarray(rz, dtype=float).reshape(-1, d)])
            cand_m = np.concatenate([cand_m, np.asarray(rm, dtype=float).reshape(-1, k)])
        if cand_z.shape[0] == 0 and n >= max(roots):
            break
        keys_all = state_keys(cand_z)
        if cand_z.shape[0]:
            _, first, inverse = np.unique(keys_all, axis=0, return_index=True, return_inverse=True)
            inverse = inverse.ravel()
        else:
            first = inverse = np.zeros(0, dtype=np.int64)
        log_z = cand_z[first]
        mass = np.zeros((first.size, k))
        np.add.at(mass, inverse, cand_m)
        keep = mass.max(axis=1) >= prune_mass if prune_mass > 0 else mass.max(axis=1) > 0
        new_index = np.full(first.size, -1)
        new_index[keep] = np.arange(int(keep.sum()))
        log_z, mass = log_z[keep], mass[keep]
        if pending is not None:
            prev, rows, slots = pending
            prev.succ[rows, slots] = new_index[inverse[:rows.size]]
        processed += log_z.shape[0]
        if processed > budget:
            raise BudgetError(f"state graph exceeds {budget} states; use Monte Carlo instead")
        if n == 0:
            stop = np.zeros(log_z.shape[0], dtype=bool)
            ctrl = np.full(log_z.shape[0], strategy.initial_control_index)
        elif log_z.shape[0]:
            stop, ctrl = strategy.rules(log_z)
            stop = np.asarray(stop, dtype=bool)
        else:
            stop = np.zeros(0, dtype=bool)
            ctrl = np.zeros(0, dtype=np.int64)
        level = _Level(n, log_z, state_keys(log_z), mass, stop, np.asarray(ctrl),
                       np.full((log_z.shape[0], q_max), -1))
        levels.append(level)
        go = np.flatnonzero(~stop) if n < cap else np.zeros(0, dtype=np.int64)
        new_z, new_m, rows, slots = [], [], [], []
        for c in np.unique(level.ctrl[go]):
            sel = go[level.ctrl[go] == c]
            probs, log_inc = branch[int(c)]
            q = probs.shape[1]
            new_z.append((log_z[sel, None, :] + log_inc[None]).reshape(-1, d))
            new_m.append((mass[sel, None, :] * probs.T[None]).reshape(-1, k))
            rows.append(np.repeat(sel, q))
            slots.append(np.tile(np.arange(q), sel.size))
        if new_z:
            cand_z, cand_m = np.concatenate(new_z), np.concatenate(new_m)
            pending = (level, np.concatenate(rows), np.concatenate(slots))
        else:
            cand_z, cand_m = np.zeros((0, d)), np.zeros((0, k))
            pending = None
        n += 1
    return levels


def _backward(model: DiscreteModel, strategy, levels: list, stop_masks=None):
    """Conditional operating characteristics of every state in ``levels``.

    Returns, per level, ``(A, T, U)`` with a trailing member axis:
    ``A[s, i, j, m]`` is the probability under ``H_{i+1}`` of eventually
    accepting ``H_{j+1}`` from state ``s``, ``T[s, i, m]`` the expected number
    of further observations and ``U[s, i, m]`` the probability left undecided
    (pruned or truncated).  ``stop_masks(level)`` may return an ``(N, M)``
    array of stop masks, one column per member; by default the recorded rule
    is used.
    """
    k = model.k
    cap = strategy.horizon_cap
    branch = [model.branch_probs(c)[0] for c in range(len(model.controls))]
    out = [None] * len(levels)
    nxt = None
    eye = np.eye(k)
    for li in range(len(levels) - 1, -1, -1):
        lev = levels[li]
        N = lev.log_z.shape[0]
        stop = lev.stop[:, None] if stop_masks is None else np.asarray(stop_masks(lev), dtype=bool)
        M = stop.shape[1]
        onehot = eye[strategy.decide_index(lev.log_z)] if N else np.zeros((0, k))
        A = stop[:, None, None, :] * onehot[:, None, :, None] * np.ones((1, k, 1, 1))
        T = np.zeros((N, k, M))
        U = np.zeros((N, k, M))
        if lev.n >= cap:
            U += ~stop[:, None, :]
        elif N:
            # a sentinel row of undecided mass stands in for pruned successors
            if nxt is None:
                nA, nT, nU = np.zeros((1, k, k, M)), np.zeros((1, k, M)), np.ones((1, k, M))
            else:
                nA = np.concatenate([nxt[0], np.zeros((1, k, k, M))])
                nT = np.concatenate([nxt[1], np.zeros((1, k, M))])
                nU = np.concatenate([nxt[2], np.ones((1, k, M))])
            go_any = np.flatnonzero(~stop.all(axis=1))
            for c in np.unique(lev.ctrl[go_any]):
                sel = go_any[lev.ctrl[go_any] == c]
                probs = branch[int(c)]
                idx = lev.succ[sel, :probs.shape[1]]
                go = ~stop[sel][:, None, :]
                w = probs.T[None, :, :, None]  # (1, Q, k, 1)
                a = (w[..., None, :] * nA[idx]).sum(axis=1)
                A[sel] = np.where(go[:, :, None, :], a, A[sel])
                T[sel] = go * (1.0 + (w * nT[idx]).sum(axis=1))
                U[sel] = go * (w * nU[idx]).sum(axis=1)
        out[li] = (A, T, U)
        nxt = out[li]
    return out


@dataclass
class DominanceReport:
    """Outcome of :func:`dominance_scan`.

    ``violators`` lists ``(description, alpha, asn)`` for every member with no
    larger error probabilities and a strictly smaller weighted ASN.
    """

    baseline: EvalReport
    members: int
    violators: list = field(default_factory=list)
    worse_lagrangian: int = 0
    min_member_lagrangian: float = float("inf")
    max_undecided: float = 0.0
    counts: dict = field(default_factory=dict)
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violators


class _RuleCache:
    """``policy`` with its rules memoised for the states of a state graph."""

    def __init__(self, policy, levels: list):
        self.policy = policy
        self.model, self.spec, self.table = policy.model, policy.spec, policy.table
        self.horizon_cap = policy.horizon_cap
        self.initial_control_index = policy.initial_control_index
        keys = np.concatenate([lev.keys for lev in levels[1:]]) if len(levels) > 1 else None
        if keys is None or keys.shape[0] == 0:
            self.keys = np.zeros((0, self.model.k - 1), dtype=np.int64)
            self.stop = np.zeros(0, dtype=bool)
            self.ctrl = np.zeros(0, dtype=np.int64)
            return
        stop = np.concatenate([lev.stop for lev in levels[1:]])
        ctrl = np.concatenate([lev.ctrl for lev in levels[1:]])
        self.keys, first = np.unique(keys, axis=0, return_index=True)
        self.stop, self.ctrl = stop[first], ctrl[first]
        self._view = self._void(self.keys)

    @staticmethod
    def _void(keys):
        keys = np.ascontiguousarray(keys)
        return keys.view(np.dtype((np.void, keys.dtype.itemsize * keys.shape[1]))).ravel()

    def rules(self, log_z):
        log_z = np.asarray(log_z, dtype=float)
        stop = np.zeros(log_z.shape[0], dtype=bool)
        ctrl = np.zeros(log_z.shape[0], dtype=np.int64)
        if self.keys.shape[0]:
            q = self._void(state_keys(log_z))
            pos = np.clip(np.searchsorted(self._view, q), 0, self._view.size - 1)
            hit = self._view[pos] == q
        else:
            pos = np.zeros(log_z.shape[0], dtype=np.int64)
            hit = np.zeros(log_z.shape[0], dtype=bool)
        stop[hit], ctrl[hit] = self.stop[pos[hit]], self.ctrl[pos[hit]]
        if not np.all(hit):
            s, c = self.policy.rules(log_z[~hit])
            stop[~hit], ctrl[~hit] = s, c
        return stop, ctrl

    def decide_index(self, log_z):
        return self.policy.decide_index(log_z)


class _Widened:
    """``base`` rules, except that it never stops on the given grid cells."""

    def __init__(self, base, cells: np.ndarray):
        self.base, self.cells = base, cells
        self.horizon_cap = base.horizon_cap
        self.initial_control_index = base.initial_control_index

    def rules(self, log_z):
        stop, ctrl = self.base.rules(log_z)
        held = np.isin(cell_labels(self.base.table, log_z), self.cells)
        return stop & ~held, ctrl

    def decide_index(self, log_z):
        return self.base.decide_index(log_z)


def dominance_scan(model: DiscreteModel, spec: LossSpec, policy, tol: float = 1e-12,
                   prune_mass: float = 1e-15, batch: int = 48,
                   keep_results: bool = False) -> DominanceReport:
    """Compare ``policy`` with each of its one-step perturbations.

    The family is

    * every grid cell the policy visits, with its stop flag flipped
      (one cell added to or removed from the stopping region);
    * every visited continuation state ``(n, z)``, with its control replaced
      by each alternative (single-state control flips).

    A member violates optimality if all of its error probabilities are no
    larger and its weighted ASN ``sum_i c_i N_i`` is strictly smaller.
    Comparisons allow for the undecided (pruned or truncated) mass of both
    evaluations, so only differences beyond it count.  With ``keep_results``
    every member's ``(description, alpha, asn)`` is kept in ``results``.
    """
    k = model.k
    off = ~np.eye(k, dtype=bool)
    cw = spec.cost_weights
    levels = _grow(model, policy, {0: (np.zeros((1, k - 1)), np.ones((1, k)))}, prune_mass)
    vals = _backward(model, policy, levels)
    base_A, base_T, base_U = (v[0, ..., 0] for v in vals[0])
    base = exact_eval(model, policy, spec, prune_mass=prune_mass)
    report = DominanceReport(base, 0)
    report.max_undecided = float(base_U.max())

    def judge(desc, alpha, asn, undecided):
        report.members += 1
        if keep_results:
            report.results.append((desc, alpha, asn))
        slack = tol + float(undecided.max()) + float(base_U.max())
        lag = lagrangian(spec, alpha, asn)
        report.min_member_lagrangian = min(report.min_member_lagrangian, lag)
        report.max_undecided = max(report.max_undecided, float(undecided.max()))
        if lag >= base.lagrangian - slack * (1 + spec.lam.max() + base.max_depth):
            report.worse_lagrangian += 1
        if (np.all(alpha[off] <= base_A[off] + slack)
                and np.dot(cw, asn) < np.dot(cw, base_T) - slack * (1 + base.max_depth)):
            report.violators.append((desc, alpha, asn))

    # stop-region cell flips.  A member differs from the policy on one cell;
    # every state it can reach is reachable by the widened strategy that
    # continues on all candidate cells, so one graph serves all members.
    shape = policy.table.grid.shape()
    cells = set()
    for lev in levels[1:]:
        cells.update(cell_labels(policy.table, lev.log_z).tolist())
    cells.discard(-1)
    cells = np.array(sorted(cells), dtype=np.int64)
    cached = _RuleCache(policy, levels)
    wide_strategy = _Widened(cached, cells)
    wide = _grow(model, wide_strategy, {0: (np.zeros((1, k - 1)), np.ones((1, k)))}, prune_mass)
    wide_labels = {lev.n: cell_labels(policy.table, lev.log_z) for lev in wide}
    wide_stop = {lev.n: (cached.rules(lev.log_z)[0] if lev.n > 0 and lev.log_z.shape[0]
                         else np.zeros(lev.log_z.shape[0], dtype=bool)) for lev in wide}
    for lo in range(0, cells.size, batch):
        chunk = cells[lo:lo + batch]

        def masks(lev, chunk=chunk):
            hit = (wide_labels[lev.n][:, None] == chunk[None, :]) & (lev.n > 0)
            return wide_stop[lev.n][:, None] ^ hit

        A, T, U = (v[0] for v in _backward(model, wide_strategy, wide, masks)[0])
        for m, cell in enumerate(chunk):
            judge(("stop", tuple(int(v) for v in np.unravel_index(cell, shape))),
                  A[:, :, m], T[:, m], U[:, m])
    report.counts["stop"] = report.members

    # single-state control flips: deviate once, then follow the policy
    n_x = len(model.controls)
    branch = [model.branch_probs(c) for c in range(n_x)]
    index = [lev.index() for lev in levels]
    flips, missing = [], {}
    for li, lev in enumerate(levels):
        if lev.n >= policy.horizon_cap:
            continue
        for s in np.flatnonzero(~lev.stop):
            for alt in range(n_x):
                if alt == lev.ctrl[s]:
                    continue
                probs, log_inc = branch[alt]
                targets = []
                for q in range(probs.shape[1]):
                    z_next = lev.log_z[s] + log_inc[q]
                    key = tuple(int(v) for v in state_keys(z_next))
                    if li + 1 < len(levels) and key in index[li + 1]:
                        targets.append(("base", index[li + 1][key]))
                    else:
                        m = lev.mass[s] * probs[:, q]
                        slot = missing.setdefault((lev.n + 1, key), [z_next, np.zeros(k)])
                        slot[1] = slot[1] + m
                        targets.append(("extra", (lev.n + 1, key)))
                flips.append((li, s, alt, targets))
    extra_vals = {}
    if missing:
        roots: dict = {}
        for (n, key), (z, m) in missing.items():
            roots.setdefault(n, ([], []))
            roots[n][0].append(z)
            roots[n][1].append(m)
        roots = {n: (np.array(zs), np.array(ms)) for n, (zs, ms) in roots.items()}
        extra = _grow(model, policy, roots, prune_mass)
        ev = _backward(model, policy, extra)
        for lev, (A, T, U) in zip(extra, ev):
            for key, i in lev.index().items():
                extra_vals[(lev.n, key)] = (A[i, ..., 0], T[i, ..., 0], U[i, ..., 0])
    undecided_row = (np.zeros((k, k)), np.zeros(k), np.ones(k))
    for li, s, alt, targets in flips:
        lev = levels[li]
        probs = branch[alt][0]
        A_new = np.zeros((k, k))
        T_new = np.ones(k)
        U_new = np.zeros(k)
        for q, (where, ref) in enumerate(targets):
            if where == "base":
                a, t, u = (v[ref, ..., 0] for v in vals[li + 1])
            else:
                a, t, u = extra_vals.get(ref, undecided_row)
            A_new += probs[:, q][:, None] * a
            T_new += probs[:, q] * t
            U_new += probs[:, q] * u
        A_s, T_s, U_s = (v[s, ..., 0] for v in vals[li])
        m = lev.mass[s]
        if lev.n == 0:
            m = np.ones(k)
        alpha = base_A + m[:, None] * (A_new - A_s)
        asn = base_T + m * (T_new - T_s)
        undecided = base_U + m * np.abs(U_new - U_s)
        desc = ("control", lev.n, tuple(float(v) for v in lev.log_z[s]), model.controls[alt])
        judge(desc, alpha, asn, undecided)
    report.counts["control"] = report.members - report.counts["stop"]
    return report
