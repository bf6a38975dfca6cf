"""Controlled observation models.

A model fixes ``k`` simple hypotheses, a finite set of control labels and,
for every control, the distribution of the next observation under each
hypothesis.  Hypotheses are numbered ``1..k`` in the scalar API
(``density(1, x, y)`` is the density under the first hypothesis); arrays are
indexed from zero.

Two observation kinds are supported:

* :class:`DiscreteModel` -- a finite outcome set with a pmf table.
* :class:`ContinuousModel` -- a density evaluator plus, per control, a
  quadrature rule that integrates against the first hypothesis' density.
  :class:`GaussianMeanModel` is the normal regression family
  ``Y ~ N(theta * x, sigma^2)`` with Gauss-Hermite nodes.

Everything downstream only needs :meth:`ControlledModel.branches` (the
weighted outcome nodes used by the Bellman operator) and
:meth:`ControlledModel.branch_probs` / :meth:`ControlledModel.sample` for
evaluation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import ndtri

from .exceptions import AbsoluteContinuityError, ConfigError

PMF_TOL = 1e-12
QUAD_TOL = 1e-8


@dataclass(frozen=True)
class LikelihoodState:
    """Likelihood ratios ``Z_n^r`` of hypotheses ``2..k`` against hypothesis 1.

    Stored in log scale; ``z`` exponentiates on demand.
    """

    log_z: tuple[float, ...]
    n: int = 0

    @classmethod
    def initial(cls, k: int) -> "LikelihoodState":
        return cls(tuple([0.0] * (k - 1)), 0)

    @classmethod
    def from_z(cls, z: Sequence[float], n: int = 0) -> "LikelihoodState":
        with np.errstate(divide="ignore"):
            return cls(tuple(float(v) for v in np.log(np.asarray(z, dtype=float))), n)

    @property
    def z(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_z, dtype=float))

    def advance(self, log_increment: Sequence[float]) -> "LikelihoodState":
        new = np.asarray(self.log_z, dtype=float) + np.asarray(log_increment, dtype=float)
        return LikelihoodState(tuple(float(v) for v in new), self.n + 1)


class ControlledModel:
    """Common interface of controlled observation models."""

    k: int
    controls: list

    # -- labels -------------------------------------------------------------
    def control_index(self, x) -> int:
        for idx, label in enumerate(self.controls):
            if label == x or str(label) == str(x):
                return idx
        raise ConfigError(f"unknown control {x!r}; known controls: {self.controls}")

    def _check_hypothesis(self, i: int) -> None:
        if not 1 <= i <= self.k:
            raise ConfigError(f"hypothesis index {i} outside 1..{self.k}")

    # -- scalar API ---------------------------------------------------------
    def density(self, i: int, x, y) -> float:
        raise NotImplementedError

    def log_lr_increment(self, x, y) -> np.ndarray:
        """Log of :meth:`lr_increment`, computed without leaving log space where possible."""
        f1 = self.density(1, x, y)
        if f1 <= 0.0:
            raise AbsoluteContinuityError(
                f"observation {y!r} under control {x!r} has zero density under H_1; "
                "likelihood ratios against H_1 are undefined"
            )
        with np.errstate(divide="ignore"):
            return np.log(np.array([self.density(r, x, y) for r in range(2, self.k + 1)]) / f1)

    def lr_increment(self, x, y) -> np.ndarray:
        return np.exp(self.log_lr_increment(x, y))

    def integrate_under_h1(self, x, h: Callable[[Any], float]) -> float:
        raise NotImplementedError

    def validate(self) -> list[str]:
        raise NotImplementedError

    # -- vectorised API used by the solver and evaluators -------------------
    def branches(self, xi: int) -> tuple[np.ndarray, np.ndarray]:
        """Outcome nodes for control index ``xi``.

        Returns ``(weights, log_inc)`` where ``weights[q]`` integrates against
        the first hypothesis and ``log_inc[q]`` is the ``(k-1,)`` log
        likelihood-ratio increment of node ``q``.
        """
        raise NotImplementedError

    def branch_probs(self, xi: int) -> tuple[np.ndarray, np.ndarray]:
        """``(probs, log_inc)`` with ``probs[i, q]`` the mass of node ``q`` under hypothesis ``i+1``."""
        w, log_inc = self.branches(xi)
        probs = np.empty((self.k, w.size))
        probs[0] = w
        probs[1:] = w * np.exp(log_inc.T)
        return probs, log_inc

    def sample(self, i: int, xi: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Draw observations under hypothesis ``i`` (1-based) by inverse CDF.

        ``xi`` holds control indices and ``u`` uniforms in (0, 1), both of
        equal length.  Returns the observations and their ``(n, k-1)`` log
        likelihood-ratio increments.
        """
        raise NotImplementedError

    def is_identifiable(self) -> bool:
        """False when every control yields the same law under all hypotheses."""
        for xi in range(len(self.controls)):
            w, log_inc = self.branches(xi)
            if np.any(np.abs(log_inc[w > 0]) > 1e-12):
                return True
        return False

    def to_config(self) -> dict:
        raise NotImplementedError

    def canonical_json(self) -> str:
        return json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))


@dataclass(eq=False)
class DiscreteModel(ControlledModel):
    """Finite outcome model with ``pmf[i][x][y]`` (array shape ``(k, |X|, |Y|)``)."""

    controls: list
    outcomes: list
    pmf: np.ndarray

    def __post_init__(self):
        self.controls = list(self.controls)
        self.outcomes = list(self.outcomes)
        self.pmf = np.array(self.pmf, dtype=float)
        if self.pmf.ndim != 3 or self.pmf.shape[1:] != (len(self.controls), len(self.outcomes)):
            raise ConfigError(
                f"pmf shape {self.pmf.shape} does not match (k, {len(self.controls)}, {len(self.outcomes)})"
            )
        self.k = self.pmf.shape[0]
        if self.k < 2:
            raise ConfigError("at least two hypotheses are required")
        self.pmf.setflags(write=False)
        self._cum = np.cumsum(self.pmf, axis=2)
        self._branches = []
        self._branch_probs = []
        for xi in range(len(self.controls)):
            keep = self.pmf[0, xi] > 0
            p = self.pmf[:, xi, keep]
            with np.errstate(divide="ignore"):
                log_inc = np.log(p[1:] / p[0]).T
            self._branches.append((p[0].copy(), log_inc))
            self._branch_probs.append((p.copy(), log_inc))
        full = np.where(self.pmf[0] > 0, self.pmf[0], 1.0)
        with np.errstate(divide="ignore"):
            self._log_inc_full = np.log(self.pmf[1:] / full)  # (k-1, X, Y)

    def outcome_index(self, y) -> int:
        for idx, label in enumerate(self.outcomes):
            if label == y or str(label) == str(y):
                return idx
        raise ConfigError(f"unknown outcome {y!r}; known outcomes: {self.outcomes}")

    def density(self, i: int, x, y) -> float:
        self._check_hypothesis(i)
        return float(self.pmf[i - 1, self.control_index(x), self.outcome_index(y)])

    def integrate_under_h1(self, x, h) -> float:
        xi = self.control_index(x)
        return float(sum(p * h(y) for p, y in zip(self.pmf[0, xi], self.outcomes) if p > 0))

    def validate(self) -> list[str]:
        problems = []
        for i in range(self.k):
            for xi, x in enumerate(self.controls):
                row = self.pmf[i, xi]
                # an entry above 1 already breaks normalisation, so only
                # negative entries get a separate report
                for yi, p in enumerate(row):
                    if not p >= 0.0:
                        problems.append(
                            f"range: p[{i + 1}][{x}][{self.outcomes[yi]}] = {p} is negative"
                        )
                total = row.sum()
                if abs(total - 1.0) > PMF_TOL:
                    problems.append(f"normalization: sum_y p[{i + 1}][{x}][y] = {float(total)!r} != 1")
        for xi, x in enumerate(self.controls):
            for yi, y in enumerate(self.outcomes):
                if self.pmf[0, xi, yi] == 0.0:
                    for i in range(1, self.k):
                        if self.pmf[i, xi, yi] != 0.0:
                            problems.append(
                                f"absolute continuity: p[1][{x}][{y}] = 0 but "
                                f"p[{i + 1}][{x}][{y}] = {self.pmf[i, xi, yi]}"
                            )
        return problems

    def branches(self, xi):
        return self._branches[xi]

    def branch_probs(self, xi):
        return self._branch_probs[xi]

    def sample(self, i, xi, u):
        cum = self._cum[i - 1, xi]  # (n, Y)
        yi = (u[:, None] >= cum).sum(axis=1)
        yi = np.minimum(yi, len(self.outcomes) - 1)
        log_inc = self._log_inc_full[:, xi, yi].T
        return yi, log_inc

    def to_config(self) -> dict:
        return {
            "k": self.k,
            "controls": list(self.controls),
            "observation": {
                "type": "discrete",
                "outcomes": list(self.outcomes),
                "pmf": {
                    str(i + 1): {str(x): [float(p) for p in self.pmf[i, xi]]
                                 for xi, x in enumerate(self.controls)}
                    for i in range(self.k)
                },
            },
        }


@dataclass(eq=False)
class ContinuousModel(ControlledModel):
    """Density model with caller-supplied quadrature against ``f_1(.|x)``.

    ``density(i, x, y)`` must accept numpy arrays for ``y``.  ``quadrature``
    maps each control label to ``(nodes, weights)``.  ``quantile(i, x, u)``
    is optional and only needed for Monte Carlo evaluation.  The caller is
    responsible for ``f_1(y|x) > 0`` wherever some ``f_i(y|x) > 0``.
    """

    k: int
    controls: list
    density_fn: Callable
    quadrature: dict
    quantile: Callable | None = None
    log_lr_fn: Callable | None = None
    name: str = "continuous"

    def __post_init__(self):
        self.controls = list(self.controls)
        if self.k < 2:
            raise ConfigError("at least two hypotheses are required")
        self._branches = []
        for x in self.controls:
            if x not in self.quadrature:
                raise ConfigError(f"no quadrature rule for control {x!r}")
            nodes, weights = (np.asarray(a, dtype=float) for a in self.quadrature[x])
            log_inc = np.stack([self._log_lr_vec(x, nodes, r) for r in range(2, self.k + 1)], axis=1)
            self._branches.append((weights, log_inc, nodes))

    def _log_lr_vec(self, x, y, r: int) -> np.ndarray:
        if self.log_lr_fn is not None:
            return np.asarray(self.log_lr_fn(r, x, y), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(np.asarray(self.density_fn(r, x, y), dtype=float)) - np.log(
                np.asarray(self.density_fn(1, x, y), dtype=float)
            )

    def density(self, i: int, x, y) -> float:
        self._check_hypothesis(i)
        self.control_index(x)
        return float(self.density_fn(i, x, float(y)))

    def log_lr_increment(self, x, y) -> np.ndarray:
        self.control_index(x)
        y = float(y)
        if self.density_fn(1, x, y) <= 0.0:
            raise AbsoluteContinuityError(
                f"observation {y!r} under control {x!r} has zero density under H_1; "
                "likelihood ratios against H_1 are undefined"
            )
        return np.array([float(self._log_lr_vec(x, np.array(y), r)) for r in range(2, self.k + 1)])

    def integrate_under_h1(self, x, h) -> float:
        weights, _, nodes = self._branches[self.control_index(x)]
        return float(sum(w * h(y) for w, y in zip(weights, nodes)))

    def quadrature_nodes(self, x) -> np.ndarray:
        return self._branches[self.control_index(x)][2]

    def validate(self) -> list[str]:
        problems = []
        for x, (weights, log_inc, nodes) in zip(self.controls, self._branches):
            if np.any(weights <= 0):
                problems.append(f"quadrature: non-positive weight for control {x}")
            total = weights.sum()
            if abs(total - 1.0) > QUAD_TOL:
                problems.append(f"quadrature: weights for control {x} sum to {total!r}, not 1")
            f1 = np.asarray(self.density_fn(1, x, nodes), dtype=float)
            if np.any(f1 <= 0):
                problems.append(f"absolute continuity: f_1(y|{x}) = 0 at a quadrature node")
            if not np.all(np.isfinite(log_inc)):
                problems.append(f"likelihood ratio not finite at a quadrature node for control {x}")
        return problems

    def branches(self, xi):
        weights, log_inc, _ = self._branches[xi]
        return weights, log_inc

    def sample(self, i, xi, u):
        if self.quantile is None:
            raise ConfigError("this continuous model has no quantile function; Monte Carlo is unavailable")
        y = np.empty(u.shape)
        log_inc = np.empty((u.size, self.k - 1))
        for c, x in enumerate(self.controls):
            sel = xi == c
            if not np.any(sel):
                continue
            y[sel] = self.quantile(i, x, u[sel])
            for r in range(2, self.k + 1):
                log_inc[sel, r - 2] = self._log_lr_vec(x, y[sel], r)
        return y, log_inc

    def to_config(self) -> dict:
        # Generic densities are opaque; fingerprint them through their values at the nodes.
        obs = {"type": self.name, "nodes": {}}
        for x, (weights, log_inc, nodes) in zip(self.controls, self._branches):
            obs["nodes"][str(x)] = {
                "y": [float(v) for v in nodes],
                "w": [float(v) for v in weights],
                "log_lr": [[float(v) for v in row] for row in log_inc],
            }
        return {"k": self.k, "controls": list(self.controls), "observation": obs}


def gauss_hermite_normal(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating against the standard normal density."""
    t, w = np.polynomial.hermite.hermgauss(n)
    return t * math.sqrt(2.0), w / math.sqrt(math.pi)


class GaussianMeanModel(ContinuousModel):
    """``Y | x ~ N(theta_i * x, std^2)`` under hypothesis ``i``.

    ``control_values`` maps control labels to the numeric regressor ``x``.
    """

    def __init__(self, means: Sequence[float], control_values: dict, std: float = 1.0,
                 quadrature_nodes: int = 64):
        self.means = np.asarray(means, dtype=float)
        self.std = float(std)
        self.control_values = {str(x): float(v) for x, v in control_values.items()}
        self.quadrature_nodes_count = int(quadrature_nodes)
        if self.std <= 0:
            raise ConfigError("std must be positive")
        if self.quadrature_nodes_count < 2:
            raise ConfigError("quadrature_nodes must be at least 2")
        t, w = gauss_hermite_normal(self.quadrature_nodes_count)
        quad = {x: (self.means[0] * v + self.std * t, w) for x, v in self.control_values.items()}
        super().__init__(
            k=len(self.means),
            controls=list(self.control_values),
            density_fn=self._pdf,
            quadrature=quad,
            quantile=self._quantile,
            log_lr_fn=self._log_lr,
            name="gaussian_mean",
        )

    def _pdf(self, i, x, y):
        mu = self.means[i - 1] * self.control_values[str(x)]
        return np.exp(-0.5 * ((np.asarray(y) - mu) / self.std) ** 2) / (self.std * math.sqrt(2 * math.pi))

    def _log_lr(self, r, x, y):
        v = self.control_values[str(x)]
        y = np.asarray(y, dtype=float)
        m1, mr = self.means[0] * v, self.means[r - 1] * v
        return ((y - m1) ** 2 - (y - mr) ** 2) / (2 * self.std ** 2)

    def _quantile(self, i, x, u):
        return self.means[i - 1] * self.control_values[str(x)] + self.std * ndtri(u)

    def log_lr_increment(self, x, y) -> np.ndarray:
        self.control_index(x)
        return np.array([float(self._log_lr(r, x, float(y))) for r in range(2, self.k + 1)])

    def to_config(self) -> dict:
        return {
            "k": self.k,
            "controls": list(self.controls),
            "observation": {
                "type": "gaussian_mean",
                "means": {str(i + 1): float(m) for i, m in enumerate(self.means)},
                "std": self.std,
                "control_values": dict(self.control_values),
                "quadrature_nodes": self.quadrature_nodes_count,
            },
        }


def model_from_config(cfg: dict) -> ControlledModel:
    """Build a model from its JSON configuration dictionary."""
    try:
        obs = cfg["observation"]
        kind = obs["type"]
        k = int(cfg["k"])
        controls = list(cfg["controls"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model config is missing a required field: {exc}") from exc
    if kind == "discrete":
        outcomes = list(obs["outcomes"])
        pmf = np.zeros((k, len(controls), len(outcomes)))
        try:
            for i in range(k):
                rows = obs["pmf"][str(i + 1)]
                for xi, x in enumerate(controls):
                    row = rows[str(x)]
                    if len(row) != len(outcomes):
                        raise ConfigError(
                            f"model.observation.pmf.{i + 1}.{x}: expected {len(outcomes)} probabilities"
                        )
                    pmf[i, xi] = row
        except KeyError as exc:
            raise ConfigError(f"model.observation.pmf: missing entry {exc}") from exc
        return DiscreteModel(controls, outcomes, pmf)
    if kind == "gaussian_mean":
        means_cfg = obs["means"]
        if isinstance(means_cfg, dict):
            means = [float(means_cfg[str(i + 1)]) for i in range(k)]
        else:
            means = [float(m) for m in means_cfg]
        if len(means) != k:
            raise ConfigError(f"model.observation.means: expected {k} entries")
        values = obs.get("control_values") or {str(x): x for x in controls}
        values = {str(x): float(values[str(x)]) for x in controls}
        return GaussianMeanModel(means, values, std=float(obs.get("std", 1.0)),
                                 quadrature_nodes=int(obs.get("quadrature_nodes", 64)))
    raise ConfigError(f"unknown observation type {kind!r}")


def coin2() -> DiscreteModel:
    """Two coins with P(1) = 0.5 under H_1 and 0.7 (control a) / 0.9 (control b) under H_2."""
    pmf = np.array([
        [[0.5, 0.5], [0.5, 0.5]],
        [[0.3, 0.7], [0.1, 0.9]],
    ])
    return DiscreteModel(["a", "b"], [0, 1], pmf)


def gaussian_demo(quadrature_nodes: int = 64) -> GaussianMeanModel:
    """Normal regression with H_1: theta = 1, H_2: theta = 2 and controls x in {1, 2}."""
    return GaussianMeanModel([1.0, 2.0], {"1": 1.0, "2": 2.0}, std=1.0,
                             quadrature_nodes=quadrature_nodes)
