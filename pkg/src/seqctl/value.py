"""Value iteration for the stopping/continuation value on a log-likelihood-ratio grid.

``rho_0 = g`` and

    rho_r(z) = min{ g(z), stage(z) + min_x E_1[ rho_{r-1}(z * LR(x, Y)) | x ] }

where the expectation is under the first hypothesis.  The iterates decrease
pointwise to the fixed point ``rho``; ``R(z)`` is the minimised expectation.

Values live on a tensor grid over ``log z`` (one axis per ratio) and are
interpolated multilinearly in ``log z``.  A query outside the grid box is
answered with ``g`` (stop immediately).
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .criteria import LossSpec
from .exceptions import ConfigError, ConsistencyError, ConvergenceWarning, FingerprintError
from .model import ControlledModel

MAX_K = 4
MONOTONE_SLACK = 1e-10
CO_OPTIMAL_TOL = 1e-9
_DEDUP_TOL = 1e-12


def fingerprint(model: ControlledModel, spec: LossSpec) -> str:
    payload = model.canonical_json() + "|" + spec.canonical_json()
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class GridSpec:
    """Per-axis bounds and node counts in natural-log ratio space.

    ``extra`` optionally injects additional log-ratio nodes per axis (the axis
    then stops being uniform).
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    m: tuple[int, ...]
    extra: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        d = len(self.lo)
        if not (len(self.hi) == len(self.m) == d) or d < 1:
            raise ConfigError("grid lo/hi/m must have one entry per likelihood ratio")
        if self.extra and len(self.extra) != d:
            raise ConfigError("grid extra nodes must be given per axis")
        for lo, hi, m in zip(self.lo, self.hi, self.m):
            if not lo < hi:
                raise ConfigError(f"grid bounds need lo < hi, got [{lo}, {hi}]")
            if m < 3:
                raise ConfigError(f"grid needs at least 3 nodes per axis, got {m}")

    @classmethod
    def default(cls, k: int, lo: float = -25.0, hi: float = 25.0, m: int | None = None) -> "GridSpec":
        if k > MAX_K:
            raise ConfigError(f"k = {k} exceeds the supported maximum of {MAX_K} hypotheses")
        if m is None:
            m = 1001 if k == 2 else 201
        d = k - 1
        return cls((float(lo),) * d, (float(hi),) * d, (int(m),) * d)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def with_extra(self, extra: Sequence[Sequence[float]]) -> "GridSpec":
        return GridSpec(self.lo, self.hi, self.m, tuple(tuple(float(v) for v in e) for e in extra))

    def axes(self) -> list[np.ndarray]:
        out = []
        for a in range(self.dim):
            ax = np.linspace(self.lo[a], self.hi[a], self.m[a])
            if self.extra:
                ax = np.sort(np.concatenate([ax, np.asarray(self.extra[a], dtype=float)]))
                keep = np.concatenate([[True], np.diff(ax) > _DEDUP_TOL])
                ax = ax[keep]
            out.append(ax)
        return out

    def shape(self) -> tuple[int, ...]:
        return tuple(ax.size for ax in self.axes())

    def nodes(self) -> np.ndarray:
        """``(P, d)`` log-ratio coordinates of all nodes in row-major order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def to_config(self) -> dict:
        cfg = {"lo": list(self.lo), "hi": list(self.hi), "m": list(self.m)}
        if self.extra:
            cfg["extra"] = [list(e) for e in self.extra]
        return cfg

    @classmethod
    def from_config(cls, cfg: dict, k: int) -> "GridSpec":
        d = k - 1
        if k > MAX_K:
            raise ConfigError(f"k = {k} exceeds the supported maximum of {MAX_K} hypotheses")
        base = cls.default(k)

        def per_axis(key, default, cast):
            v = cfg.get(key, default)
            if isinstance(v, (int, float)):
                v = [v] * d
            return tuple(cast(x) for x in v)

        extra = tuple(tuple(float(x) for x in e) for e in cfg.get("extra", ()))
        return cls(per_axis("lo", base.lo, float), per_axis("hi", base.hi, float),
                   per_axis("m", base.m, int), extra)


class TensorInterpolator:
    """Multilinear interpolation on a tensor grid with sorted (possibly non-uniform) axes."""

    def __init__(self, axes: Sequence[np.ndarray]):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.shape = tuple(a.size for a in self.axes)
        self.strides = np.array([int(np.prod(self.shape[a + 1:])) for a in range(len(self.shape))])

    def locate(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Corner flat indices ``(..., 2^d)``, weights ``(..., 2^d)`` and an inside mask."""
        q = np.asarray(q, dtype=float)
        d = len(self.axes)
        inside = np.ones(q.shape[:-1], dtype=bool)
        lo_idx, frac = [], []
        for a, ax in enumerate(self.axes):
            qa = q[..., a]
            inside &= (qa >= ax[0]) & (qa <= ax[-1])
            i = np.clip(np.searchsorted(ax, qa, side="right") - 1, 0, ax.size - 2)
            t = np.clip((qa - ax[i]) / (ax[i + 1] - ax[i]), 0.0, 1.0)
            lo_idx.append(i)
            frac.append(t)
        n_corners = 1 << d
        idx = np.zeros(q.shape[:-1] + (n_corners,), dtype=np.int64)
        w = np.ones(q.shape[:-1] + (n_corners,))
        for c in range(n_corners):
            for a in range(d):
                bit = (c >> a) & 1
                idx[..., c] += (lo_idx[a] + bit) * self.strides[a]
                w[..., c] *= frac[a] if bit else 1.0 - frac[a]
        return idx, w, inside

    def __call__(self, values: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx, w, inside = self.locate(q)
        flat = np.asarray(values, dtype=float).ravel()
        return (flat[idx] * w).sum(axis=-1), inside


@dataclass
class ValueTable:
    grid: GridSpec
    values: np.ndarray
    iterations: int = 0
    residual: float = float("inf")
    fingerprint: str = ""
    converged: bool = False
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape())
        self._interp = TensorInterpolator(self.grid.axes())

    def lookup(self, spec: LossSpec, log_z) -> np.ndarray:
        """``rho`` at arbitrary log ratios ``(..., d)``; ``g`` outside the grid box."""
        log_z = np.asarray(log_z, dtype=float)
        vals, inside = self._interp(self.values, log_z)
        if not np.all(inside):
            vals = np.where(inside, vals, spec.g(log_z))
        return vals

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_config(),
            "values": [float(v) for v in self.values.ravel()],
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "converged": bool(self.converged),
            "fingerprint": self.fingerprint,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict, k: int) -> "ValueTable":
        grid = GridSpec.from_config(data["grid"], k)
        return cls(grid, np.array(data["values"]), data["iterations"], data["residual"],
                   data["fingerprint"], data.get("converged", False))

    @classmethod
    def load(cls, path, model: ControlledModel, spec: LossSpec) -> "ValueTable":
        with open(path) as fh:
            data = json.load(fh)
        expected = fingerprint(model, spec)
        if data.get("fingerprint") != expected:
            raise FingerprintError(
                f"value table {path} was built for a different model/loss "
                f"(fingerprint {data.get('fingerprint')!r} != {expected!r})"
            )
        return cls.from_dict(data, model.k)


class BellmanOperator:
    """The one-step operator for a fixed (model, spec, grid).

    Interpolation corners and weights of every ``node * increment`` query are
    fixed across iterations, so each control's expectation is stored as a
    sparse matrix plus the constant contribution of off-grid queries.
    """

    def __init__(self, model: ControlledModel, spec: LossSpec, grid: GridSpec):
        if model.k != spec.k:
            raise ConfigError(f"model has k = {model.k} but loss has k = {spec.k}")
        if model.k > MAX_K:
            raise ConfigError(f"k = {model.k} exceeds the supported maximum of {MAX_K} hypotheses")
        if grid.dim != model.k - 1:
            raise ConfigError(f"grid has {grid.dim} axes, expected {model.k - 1}")
        self.model, self.spec, self.grid = model, spec, grid
        self.nodes = grid.nodes()
        self.shape = grid.shape()
        self.g = spec.g(self.nodes)
        self.stage = spec.stage(self.nodes)
        interp = TensorInterpolator(grid.axes())
        P = self.nodes.shape[0]
        self.matrices, self.offsets = [], []
        for xi in range(len(model.controls)):
            weights, log_inc = model.branches(xi)
            rows, cols, vals = [], [], []
            offset = np.zeros(P)
            chunk = max(1, 2 ** 20 // (weights.size << grid.dim))
            for start in range(0, P, chunk):
                stop = min(P, start + chunk)
                q = self.nodes[start:stop, None, :] + log_inc[None, :, :]
                idx, w, inside = interp.locate(q)
                w = w * (weights[None, :, None] * inside[..., None])
                node_ids = np.arange(start, stop)[:, None, None]
                rows.append(np.broadcast_to(node_ids, idx.shape).ravel())
                cols.append(idx.ravel())
                vals.append(w.ravel())
                offset[start:stop] = (weights[None, :] * np.where(inside, 0.0, spec.g(q))).sum(axis=1)
            mat = sparse.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(P, P)
            )
            mat.sum_duplicates()
            self.matrices.append(mat)
            self.offsets.append(offset)

    def expectations(self, values: np.ndarray) -> np.ndarray:
        """``(|X|, P)`` array of ``E_1[rho(z * LR(x, Y))]`` at every node."""
        flat = np.asarray(values, dtype=float).ravel()
        return np.stack([m @ flat + o for m, o in zip(self.matrices, self.offsets)])

    def apply(self, values: np.ndarray) -> np.ndarray:
        cont = self.expectations(values).min(axis=0)
        return np.minimum(self.g, self.stage + cont).reshape(self.shape)


def initial_table(model: ControlledModel, spec: LossSpec, grid: GridSpec) -> ValueTable:
    nodes = grid.nodes()
    return ValueTable(grid, spec.g(nodes), 0, float("inf"), fingerprint(model, spec), False)


def bellman_apply(model: ControlledModel, spec: LossSpec, table: ValueTable,
                  operator: BellmanOperator | None = None) -> ValueTable:
    op = operator or BellmanOperator(model, spec, table.grid)
    new = op.apply(table.values)
    residual = float(np.max(np.abs(new - table.values)))
    return ValueTable(table.grid, new, table.iterations + 1, residual, table.fingerprint, False)


def _iterate(model, spec, grid, n_iter, tol=None):
    op = BellmanOperator(model, spec, grid)
    table = initial_table(model, spec, grid)
    for _ in range(n_iter):
        new = bellman_apply(model, spec, table, op)
        excess = float(np.max(new.values - table.values))
        if excess > MONOTONE_SLACK:
            raise ConsistencyError(
                f"value iteration increased a node value by {excess:.3e} at iteration "
                f"{new.iterations}; interpolation or quadrature is inconsistent"
            )
        table = new
        if tol is not None and table.residual < tol:
            table.converged = True
            break
    return table


def solve_rho(model: ControlledModel, spec: LossSpec, grid: GridSpec | None = None,
              tol: float = 1e-6, max_iter: int = 1000) -> ValueTable:
    """Iterate the Bellman operator from ``g`` until the sup-norm change drops below ``tol``."""
    grid = grid or GridSpec.default(model.k)
    table = _iterate(model, spec, grid, max_iter, tol)
    if not table.converged:
        warnings.warn(
            f"value iteration stopped after {table.iterations} iterations with residual "
            f"{table.residual:.3e} > tol {tol:.1e}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return table


def truncated_rho(model: ControlledModel, spec: LossSpec, grid: GridSpec, r: int) -> ValueTable:
    """The r-th iterate: optimal value with at most r further observations."""
    if r < 0:
        raise ValueError("r must be non-negative")
    return _iterate(model, spec, grid, r)


def continuation_values(model: ControlledModel, spec: LossSpec, table: ValueTable,
                        log_z) -> np.ndarray:
    """``(|X|, ...)`` expected next-stage values at log ratios ``(..., d)``, one row per control."""
    log_z = np.asarray(log_z, dtype=float)
    out = []
    for xi in range(len(model.controls)):
        weights, log_inc = model.branches(xi)
        q = log_z[..., None, :] + log_inc
        out.append((table.lookup(spec, q) * weights).sum(axis=-1))
    return np.stack(out)


def best_control_index(cont: np.ndarray) -> np.ndarray:
    """Smallest control index within ``CO_OPTIMAL_TOL`` of the minimum, along axis 0."""
    best = cont.min(axis=0)
    return np.argmax(cont <= best + CO_OPTIMAL_TOL, axis=0)


def continuation(model: ControlledModel, spec: LossSpec, table: ValueTable, z) -> tuple[float, object]:
    """``(R(z), best control label)``; ``z`` is a LikelihoodState or a sequence of ratios."""
    if hasattr(z, "log_z"):
        log_z = np.asarray(z.log_z, dtype=float)
    else:
        with np.errstate(divide="ignore"):
            log_z = np.log(np.asarray(z, dtype=float))
    cont = continuation_values(model, spec, table, log_z)
    xi = int(best_control_index(cont))
    return float(cont.min()), model.controls[xi]


def r0(model: ControlledModel, spec: LossSpec, table: ValueTable) -> float:
    """``R`` at the starting state ``z = (1, ..., 1)``."""
    return continuation(model, spec, table, np.ones(model.k - 1))[0]


@dataclass(frozen=True)
class TrivialVerdict:
    """Comparison of deciding at once (cost ``l_0``) with the best procedure that samples."""

    l0: float
    sampling_bound: float
    trivial_optimal: bool
    accepted: int
    initial_control: object

    def describe(self) -> str:
        if self.trivial_optimal:
            return (f"trivial procedure optimal: accept H_{self.accepted}, "
                    f"L = {self.l0:.6g}")
        return (f"sampling procedure optimal: l_0 = {self.l0:.6g} > "
                f"stage_cost(1) + R(1) = {self.sampling_bound:.6g}; "
                f"initial control {self.initial_control}")


def trivial_verdict(model: ControlledModel, spec: LossSpec, table: ValueTable) -> TrivialVerdict:
    ones = np.ones(model.k - 1)
    R, x1 = continuation(model, spec, table, ones)
    bound = float(spec.stage(np.zeros(model.k - 1))) + R
    l0 = spec.trivial_cost()
    accepted = int(spec.decide(np.zeros(model.k - 1))) + 1
    return TrivialVerdict(l0, bound, l0 <= bound, accepted, x1)
