"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict with its measured numbers and
runtime; the lines are printed at the end of the pytest run (and inline with
``-s``).  Run just this module with ``pytest tests/test_acceptance.py -v`` or
``python tests/test_acceptance.py``.
"""
import json
import sys
import time
import warnings

import numpy as np
import pytest

from seqctl.calibrate import PROBLEM_I, CalibrationTask, calibrate, error_monotonicity_probe
from seqctl.cli import demo_gaussian, main
from seqctl.criteria import BayesSpec, LossSpec, bayes_to_lagrange
from seqctl.evaluate import dominance_scan, dp_oracle, exact_eval, mc_eval
from seqctl.model import DiscreteModel, coin2
from seqctl.policy import ForcedControlPolicy, Policy
from seqctl.value import (
    BellmanOperator,
    GridSpec,
    bellman_apply,
    initial_table,
    r0,
    solve_rho,
    trivial_verdict,
    truncated_rho,
)

from conftest import random_discrete

RESULTS: list = []


def record(number: int, ok: bool, detail: str, seconds: float) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} ({seconds:.1f} s) {detail}"
    RESULTS.append(line)
    print(line)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


SPEC100 = LossSpec.symmetric(2, 100.0)


def test_criterion_01_monotone_truncated_values():
    rng = np.random.default_rng(2024)
    cases = [(coin2(), SPEC100)]
    for _ in range(20):
        k = int(rng.integers(2, 4))
        model = random_discrete(rng, k, int(rng.integers(1, 4)), int(rng.integers(2, 4)))
        cases.append((model, LossSpec(rng.uniform(1, 1000, (k, k)) * (1 - np.eye(k)))))
    worst = -np.inf
    with Timer() as t:
        for model, spec in cases:
            grid = GridSpec.default(model.k)
            op = BellmanOperator(model, spec, grid)
            table = initial_table(model, spec, grid)
            for _ in range(11):
                nxt = bellman_apply(model, spec, table, op)
                worst = max(worst, float(np.max(nxt.values - table.values)))
                table = nxt
    ok = worst <= 1e-10 and t.seconds < 10
    record(1, ok, f"{len(cases)} models, max increase rho_(r+1) - rho_r = {worst:.3g}", t.seconds)
    assert ok


def test_criterion_02_fixed_point_residual():
    model = coin2()
    with Timer() as t:
        table = solve_rho(model, SPEC100, GridSpec.default(2))
        op = BellmanOperator(model, SPEC100, table.grid)
        gap = float(np.max(np.abs(op.apply(table.values) - table.values)))
    ok = (table.grid.shape() == (1001,) and table.converged and table.residual < 1e-6
          and table.iterations <= 300 and gap <= 1e-6)
    record(2, ok, f"{table.iterations} iterations, residual {table.residual:.3g}, "
                  f"max |rho - min(g, 1 + R)| = {gap:.3g}", t.seconds)
    assert ok


def _oracle_error(model, spec, grid, horizons, oracles):
    tables = [truncated_rho(model, spec, grid, r) for r in range(max(horizons) + 1)]
    worst = 0.0
    for N in horizons:
        for e in oracles[N].values():
            got = tables[N - e.n].lookup(spec, np.array([e.log_z]))[0]
            worst = max(worst, abs(got - e.value))
    return worst


def test_criterion_03_oracle_equivalence():
    model = coin2()
    horizons = range(7)
    with Timer() as t:
        oracles = {N: dp_oracle(model, SPEC100, N) for N in horizons}
        # value functions have kinks where min{g, 1 + R} switches branch, so
        # interpolation error is first order in the spacing; 2.5e-4 in log z
        # brings it under 1e-3
        fine = _oracle_error(model, SPEC100, GridSpec.default(2, m=200_001), horizons, oracles)
        pts = sorted({e.log_z[0] for e in oracles[6].values()})
        injected = _oracle_error(model, SPEC100, GridSpec.default(2).with_extra([pts]), horizons, oracles)
    default = _oracle_error(model, SPEC100, GridSpec.default(2), horizons, oracles)
    ok = fine <= 1e-3 and injected <= 1e-9 and t.seconds < 30
    record(3, ok, f"N <= 6: fine grid (200001 nodes) max error {fine:.3g}, injected nodes {injected:.3g} "
                  f"(default 1001-node grid: {default:.3g})", t.seconds)
    assert ok


def test_criterion_04_lagrangian_attainment():
    model = coin2()
    with Timer() as t:
        table = solve_rho(model, SPEC100)
        rep = exact_eval(model, Policy(model, SPEC100, table))
        bound = float(SPEC100.stage(np.zeros(1))) + r0(model, SPEC100, table)
        half = LossSpec.symmetric(2, 0.5)
        verdict = trivial_verdict(model, half, solve_rho(model, half))
    text = verdict.describe()
    ok = abs(rep.lagrangian - bound) < 2e-2 and text == "trivial procedure optimal: accept H_1, L = 0.5"
    record(4, ok, f"L = {rep.lagrangian:.6f}, stage_cost(1) + R_0 = {bound:.6f}, "
                  f"lambda = 0.5: '{text}'", t.seconds)
    assert ok


def test_criterion_05_dominance():
    model = coin2()
    policy = Policy(model, SPEC100, solve_rho(model, SPEC100))
    with Timer() as t:
        rep = dominance_scan(model, SPEC100, policy)
    ok = rep.passed and rep.members > 0 and t.seconds < 60
    record(5, ok, f"{rep.members} members ({rep.counts['stop']} stop-cell flips, "
                  f"{rep.counts['control']} control flips), {len(rep.violators)} violators", t.seconds)
    assert ok


def test_criterion_06_sprt_reduction():
    pmf = coin2().pmf[:, 1:, :]
    model = DiscreteModel(["b"], [0, 1], pmf)
    details, ok = [], True
    with Timer() as t:
        for l12, l21 in ((100.0, 100.0), (50.0, 200.0), (300.0, 30.0)):
            spec = LossSpec([[0, l12], [l21, 0]])
            policy = Policy(model, spec, solve_rho(model, spec))
            nodes = policy.table.grid.nodes()
            cont = np.flatnonzero(~policy.stop_mask(nodes))
            interval = cont.size > 0 and bool(np.all(np.diff(cont) == 1))
            thr = l12 / l21
            z = np.exp(nodes[:, 0])
            dec = policy.decide_index(nodes)
            split = bool(np.all(dec[z <= thr] == 0) and np.all(dec[z > thr] == 1))
            near = np.log(thr) + np.array([[-1e-9], [1e-9]])
            split &= policy.decide_index(near).tolist() == [0, 1]
            ok &= interval and split
            details.append(f"({l12:g}, {l21:g}): interval {interval}, threshold {thr:g} {split}")
    record(6, ok, "; ".join(details), t.seconds)
    assert ok


def test_criterion_07_gaussian_demo():
    with Timer() as t:
        demo = demo_gaussian()
        forced = mc_eval(demo.policy.model, ForcedControlPolicy(demo.policy, "1"), 100_000, 1)
    opt = demo.report
    gap = forced.asn[0] - opt.asn[0]
    se = float(np.hypot(forced.asn_se[0], opt.asn_se[0]))
    all_x2 = demo.continuation_controls.get("1", 0) == 0 and demo.continuation_controls["2"] > 0
    ok = all_x2 and gap >= 3 * se and t.seconds < 120
    record(7, ok, f"continuation nodes using x = 2: {demo.continuation_controls['2']}, x = 1: "
                  f"{demo.continuation_controls.get('1', 0)}; ASN(theta_1) {opt.asn[0]:.4f} optimal vs "
                  f"{forced.asn[0]:.4f} forced x = 1 (gap {gap / se:.1f} SE)", t.seconds)
    assert ok


def test_criterion_08_bayes_consistency():
    model = coin2()
    specs = [BayesSpec([0.5, 0.5], [[0, 200], [200, 0]], 1.0),
             BayesSpec([0.8, 0.2], [[0, 300], [100, 0]], 0.5),
             BayesSpec([0.3, 0.7], [[0, 150], [400, 0]], 2.0)]
    identity, bound = 0.0, 0.0
    with Timer() as t:
        for b in specs:
            spec = bayes_to_lagrange(b)
            table = solve_rho(model, spec)
            rep = exact_eval(model, Policy(model, spec, table), spec, bayes=b)
            identity = max(identity, abs(rep.bayes_risk - rep.lagrangian) / rep.lagrangian)
            bound = max(bound, abs(rep.bayes_risk - (b.cost + r0(model, spec, table))))
    # the two sums group identical terms differently, so agreement is to rounding
    ok = identity <= 1e-13 and bound < 2e-2
    record(8, ok, f"max relative |risk - L| = {identity:.3g}, max |risk - (c + R_0)| = {bound:.3g}",
           t.seconds)
    assert ok


def test_criterion_09_calibration():
    model = coin2()
    with Timer() as t:
        res = calibrate(model, CalibrationTask(PROBLEM_I, [[0, 0.05], [0.05, 0]]))
        rows = error_monotonicity_probe(model, res.spec, (2, 1), (1, 2, 4))
    a = res.report.alpha
    probe = [r.alpha_ij for r in rows]
    in_band = 0.045 <= a[0, 1] <= 0.055 and 0.045 <= a[1, 0] <= 0.055
    monotone = probe[0] >= probe[1] >= probe[2]
    ok = in_band and len(res.trace) <= 60 and monotone and t.seconds < 300
    record(9, ok, f"{len(res.trace)} iterations, lambda = ({res.spec.lam[0, 1]:.4g}, "
                  f"{res.spec.lam[1, 0]:.4g}), alpha_12 = {a[0, 1]:.4f}, alpha_21 = {a[1, 0]:.4f}; "
                  f"probe alpha_21 at x1, x2, x4: " + ", ".join(f"{v:.4g}" for v in probe), t.seconds)
    assert ok


def test_criterion_10_determinism(tmp_path, capsys):
    cfg = {"model": coin2().to_config(), "loss": {"lambda": [[0, 100], [100, 0]]},
           "eval": {"reps": 5000, "seed": 11},
           "calibrate": {"targets": [[0, 0.05], [0.05, 0]]}}

    def run_all(tag):
        out = tmp_path / tag
        path = tmp_path / f"{tag}.json"
        path.write_text(json.dumps(dict(cfg, out=str(out))))
        commands = [["solve"], ["evaluate"], ["simulate"], ["calibrate", "--out", str(out / "cal")],
                    ["demo-gaussian", "--reps", "20000", "--out", str(out / "demo")]]
        for cmd in commands:
            args = cmd + ([] if cmd[0] == "demo-gaussian" else ["--config", str(path)])
            assert main(args) == 0
        capsys.readouterr()
        return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*.json"))}

    with Timer() as t:
        first, second = run_all("first"), run_all("second")
    differing = [name for name in first if first[name] != second.get(name)]
    ok = bool(first) and first.keys() == second.keys() and not differing
    record(10, ok, f"{len(first)} JSON files from solve/evaluate/simulate/calibrate/demo-gaussian, "
                   f"{len(differing)} differ", t.seconds)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
