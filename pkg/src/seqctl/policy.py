"""Executable control / stopping / decision rules on the likelihood-ratio state.

A strategy used by the evaluators exposes

* ``initial_control_index`` and ``horizon_cap``;
* ``stop_mask(log_z)`` -- the stopping rule on an ``(n, k-1)`` array, cap excluded;
* ``control_index(log_z)`` -- next control for states that continue;
* ``decide_index(log_z)`` -- 0-based accepted hypothesis for states that stop;
* ``rules(log_z)`` -- ``(stop_mask, control_index)`` in one pass.

:class:`Policy` is the optimal rule read off a converged value table;
:class:`ForcedControlPolicy` and :class:`PerturbedPolicy` are variations of it
used for comparisons.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .criteria import LossSpec
from .exceptions import ConfigError, FingerprintError
from .model import ControlledModel, DiscreteModel, LikelihoodState
from .value import (
    BellmanOperator,
    TensorInterpolator,
    ValueTable,
    best_control_index,
    continuation_values,
    fingerprint,
)

DEFAULT_HORIZON_CAP = 10_000


def state_keys(log_z: np.ndarray) -> np.ndarray:
    """Integer keys identifying likelihood states up to 1e-9 in log scale."""
    return np.rint(np.asarray(log_z, dtype=float) * 1e9).astype(np.int64)


QUADRATURE = "quadrature"
INTERPOLATED = "interpolated"


@dataclass(eq=False)
class Policy:
    """Optimal rules read off a value table.

    ``continuation_mode`` selects how ``R(z)`` is computed between grid nodes:
    ``"quadrature"`` integrates the interpolated value function at ``z`` itself
    (the default for discrete models, whose outcome sets are small);
    ``"interpolated"`` interpolates the per-control expectations already
    computed at the nodes (the default for continuous models, where a
    quadrature rule costs dozens of lookups per state).  Both agree at grid
    nodes; states outside the grid box always use quadrature.
    """

    model: ControlledModel
    spec: LossSpec
    table: ValueTable
    horizon_cap: int = DEFAULT_HORIZON_CAP
    initial_control: object = None
    continuation_mode: str | None = None

    def __post_init__(self):
        if self.horizon_cap < 1:
            raise ConfigError("horizon_cap must be at least 1")
        if self.continuation_mode is None:
            self.continuation_mode = QUADRATURE if isinstance(self.model, DiscreteModel) else INTERPOLATED
        if self.continuation_mode not in (QUADRATURE, INTERPOLATED):
            raise ConfigError(f"unknown continuation mode {self.continuation_mode!r}")
        self._node_expectations = None
        if self.continuation_mode == INTERPOLATED:
            op = BellmanOperator(self.model, self.spec, self.table.grid)
            self._node_expectations = op.expectations(self.table.values)
            self._interp = TensorInterpolator(self.table.grid.axes())
        d = self.model.k - 1
        best = int(self.continuation(np.zeros((1, d)))[1][0])
        if self.initial_control is None:
            self.initial_control = self.model.controls[best]
        self.initial_control_index = self.model.control_index(self.initial_control)

    @property
    def fingerprint(self) -> str:
        return self.table.fingerprint

    # -- vectorised rules -------------------------------------------------
    def continuation(self, log_z) -> tuple[np.ndarray, np.ndarray]:
        log_z = np.asarray(log_z, dtype=float)
        if self._node_expectations is None:
            cont = continuation_values(self.model, self.spec, self.table, log_z)
        else:
            idx, w, inside = self._interp.locate(log_z)
            cont = np.stack([(e[idx] * w).sum(axis=-1) for e in self._node_expectations])
            if not np.all(inside):
                cont[:, ~inside] = continuation_values(self.model, self.spec, self.table,
                                                       log_z[~inside])
        return cont.min(axis=0), best_control_index(cont)

    def stop_mask(self, log_z) -> np.ndarray:
        log_z = np.asarray(log_z, dtype=float)
        R, _ = self.continuation(log_z)
        return self.spec.g(log_z) <= self.spec.stage(log_z) + R

    def control_index(self, log_z) -> np.ndarray:
        return self.continuation(log_z)[1]

    def rules(self, log_z) -> tuple[np.ndarray, np.ndarray]:
        log_z = np.asarray(log_z, dtype=float)
        R, ctrl = self.continuation(log_z)
        return self.spec.g(log_z) <= self.spec.stage(log_z) + R, ctrl

    def decide_index(self, log_z) -> np.ndarray:
        return self.spec.decide(log_z)

    # -- persistence --------------------------------------------------------
    def to_dict(self, table_file: str = "value_table.json") -> dict:
        return {
            "fingerprint": self.fingerprint,
            "horizon_cap": int(self.horizon_cap),
            "initial_control": self.initial_control,
            "continuation_mode": self.continuation_mode,
            "table_file": table_file,
        }

    def save(self, path, table_file: str = "value_table.json") -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(table_file), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path, model: ControlledModel, spec: LossSpec) -> "Policy":
        with open(path) as fh:
            data = json.load(fh)
        expected = fingerprint(model, spec)
        if data.get("fingerprint") != expected:
            raise FingerprintError(
                f"policy {path} was built for a different model/loss "
                f"(fingerprint {data.get('fingerprint')!r} != {expected!r})"
            )
        table_path = os.path.join(os.path.dirname(os.path.abspath(path)), data["table_file"])
        table = ValueTable.load(table_path, model, spec)
        return cls(model, spec, table, int(data["horizon_cap"]), data["initial_control"],
                   data.get("continuation_mode"))


def _log_z(z) -> np.ndarray:
    return np.asarray(z.log_z, dtype=float)


def should_stop(p: Policy, z: LikelihoodState) -> bool:
    """Stop when ``g(z) <= stage(z) + R(z)`` (ties stop) or when the horizon cap is reached."""
    if z.n >= p.horizon_cap:
        return True
    return bool(p.stop_mask(_log_z(z)))


def next_control(p: Policy, z: LikelihoodState):
    if z.n == 0:
        return p.initial_control
    return p.model.controls[int(p.control_index(_log_z(z)))]


def step(p: Policy, z: LikelihoodState, y, x=None) -> LikelihoodState:
    """Update the state with observation ``y`` taken under ``x`` (default: the policy's control)."""
    if x is None:
        x = next_control(p, z)
    return z.advance(p.model.log_lr_increment(x, y))


def decide(p: Policy, z: LikelihoodState) -> int:
    """Accepted hypothesis, numbered from 1."""
    return int(p.decide_index(_log_z(z))) + 1


@dataclass(eq=False)
class ForcedControlPolicy:
    """The stopping and decision rules of ``base`` with one control used throughout."""

    base: Policy
    control: object

    def __post_init__(self):
        self.model = self.base.model
        self.spec = self.base.spec
        self.horizon_cap = self.base.horizon_cap
        self.initial_control_index = self.model.control_index(self.control)

    def stop_mask(self, log_z):
        return self.base.stop_mask(log_z)

    def control_index(self, log_z):
        return np.full(np.asarray(log_z).shape[0], self.initial_control_index)

    def rules(self, log_z):
        return self.stop_mask(log_z), self.control_index(log_z)

    def decide_index(self, log_z):
        return self.base.decide_index(log_z)


@dataclass(eq=False)
class PerturbedPolicy:
    """``base`` with the stop decision flipped on some grid cells and controls overridden at some states.

    ``flip_cells`` holds multi-indices of grid nodes; a flip applies to states inside
    the grid box whose nearest node it is.  ``control_overrides``
    maps a state key (see :func:`state_keys`) to a control index.  ``initial_control_index``
    may also be overridden.
    """

    base: Policy
    flip_cells: frozenset = frozenset()
    control_overrides: dict = field(default_factory=dict)
    initial_override: int | None = None

    def __post_init__(self):
        self.model = self.base.model
        self.spec = self.base.spec
        self.horizon_cap = self.base.horizon_cap
        self.initial_control_index = (self.base.initial_control_index
                                      if self.initial_override is None else self.initial_override)

    def rules(self, log_z):
        mask, idx = self.base.rules(log_z)
        if self.flip_cells:
            table = self.base.table
            labels = cell_labels(table, log_z)
            flat = [np.ravel_multi_index(tuple(cell), table.grid.shape()) for cell in self.flip_cells]
            mask = mask ^ np.isin(labels, flat)
        if self.control_overrides:
            idx = np.array(idx)
            keys = state_keys(log_z)
            for key, c in self.control_overrides.items():
                idx[np.all(keys == np.asarray(key), axis=1)] = c
        return mask, idx

    def stop_mask(self, log_z):
        return self.rules(log_z)[0]

    def control_index(self, log_z):
        return self.rules(log_z)[1]

    def decide_index(self, log_z):
        return self.base.decide_index(log_z)


def nearest_cells(table: ValueTable, log_z) -> np.ndarray:
    """``(n, d)`` multi-indices of the grid node nearest to each state (per axis)."""
    log_z = np.atleast_2d(np.asarray(log_z, dtype=float))
    cols = []
    for a, ax in enumerate(table.grid.axes()):
        q = log_z[:, a]
        i = np.clip(np.searchsorted(ax, q), 1, ax.size - 1)
        left_closer = (q - ax[i - 1]) <= (ax[i] - q)
        cols.append(np.where(left_closer, i - 1, i))
    return np.stack(cols, axis=1)


def cell_labels(table: ValueTable, log_z) -> np.ndarray:
    """Flat index of the nearest grid node, or -1 for states outside the grid box."""
    log_z = np.atleast_2d(np.asarray(log_z, dtype=float))
    if log_z.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    axes = table.grid.axes()
    inside = np.ones(log_z.shape[0], dtype=bool)
    for a, ax in enumerate(axes):
        inside &= (log_z[:, a] >= ax[0]) & (log_z[:, a] <= ax[-1])
    flat = np.ravel_multi_index(nearest_cells(table, log_z).T, table.grid.shape())
    return np.where(inside, flat, -1)


@dataclass
class TerminationReport:
    horizon_cap: int
    unstopped_mass: np.ndarray
    method: str

    @property
    def in_class(self) -> bool:
        """Empirical membership in the class of strategies that stop with probability one."""
        return bool(np.all(self.unstopped_mass < 1e-6))


def termination_diagnostic(p, reps: int = 10_000, seed: int = 0) -> TerminationReport:
    """Probability, per hypothesis, of reaching the horizon cap without stopping.

    Exact for discrete models; Monte Carlo otherwise.
    """
    from .evaluate import exact_eval, mc_eval
    from .model import DiscreteModel

    if isinstance(p.model, DiscreteModel):
        rep = exact_eval(p.model, p, prune_mass=0.0)
        return TerminationReport(p.horizon_cap, rep.truncation_mass, "exact")
    rep = mc_eval(p.model, p, reps=reps, seed=seed)
    return TerminationReport(p.horizon_cap, rep.truncation_mass, "monte_carlo")
