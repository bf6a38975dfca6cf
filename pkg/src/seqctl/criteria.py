"""Loss structure: Lagrange multipliers, terminal and stage costs, decisions.

With ``z_1 = 1`` and ``z_r`` the likelihood ratio of hypothesis ``r`` against
hypothesis 1, the cost of stopping now and accepting ``H_j`` is
``sum_{i != j} lambda_ij z_i``; the terminal cost ``g(z)`` is its minimum
over ``j``.  The cost of one more observation, measured in the same units, is
``sum_i c_i z_i``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigError

_LOG_CLIP = 600.0


def _as_log_z(z) -> np.ndarray:
    """Accept a LikelihoodState, or a plain sequence of ratios ``(z_2, ..., z_k)``."""
    if hasattr(z, "log_z"):
        return np.asarray(z.log_z, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(z, dtype=float))


def extended_z(log_z: np.ndarray) -> np.ndarray:
    """``(..., k-1)`` log ratios to ``(..., k)`` ratios with the leading ``z_1 = 1``."""
    log_z = np.asarray(log_z, dtype=float)
    z = np.exp(np.clip(log_z, -_LOG_CLIP, _LOG_CLIP))
    return np.concatenate([np.ones(log_z.shape[:-1] + (1,)), z], axis=-1)


@dataclass(frozen=True, eq=False)
class LossSpec:
    """Multipliers ``lam[i, j]`` (cost of accepting ``H_{j+1}`` under ``H_{i+1}``) and sampling-cost weights."""

    lam: np.ndarray
    cost_weights: np.ndarray

    def __init__(self, lam, cost_weights=None):
        lam = np.array(lam, dtype=float)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1] or lam.shape[0] < 2:
            raise ConfigError(f"lambda must be a k x k matrix with k >= 2, got shape {lam.shape}")
        k = lam.shape[0]
        if np.any(np.diag(lam) != 0):
            raise ConfigError("lambda_ii must be zero")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ConfigError("lambda entries must be finite and non-negative")
        if cost_weights is None:
            cost_weights = np.eye(k)[0]
        cost_weights = np.array(cost_weights, dtype=float)
        if cost_weights.shape != (k,):
            raise ConfigError(f"cost_weights must have {k} entries")
        if np.any(cost_weights < 0) or not np.any(cost_weights > 0):
            raise ConfigError("cost_weights must be non-negative and not all zero")
        lam.setflags(write=False)
        cost_weights.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "cost_weights", cost_weights)

    @classmethod
    def symmetric(cls, k: int, value: float, cost_weights=None) -> "LossSpec":
        return cls(value * (1 - np.eye(k)), cost_weights)

    @classmethod
    def problem2(cls, row_multipliers: Sequence[float], cost_weights=None) -> "LossSpec":
        """Row-constant multipliers ``lambda_ij = lambda_i`` (gross-error constraints)."""
        lam_i = np.asarray(row_multipliers, dtype=float)
        k = lam_i.size
        return cls(lam_i[:, None] * (1 - np.eye(k)), cost_weights)

    @property
    def k(self) -> int:
        return self.lam.shape[0]

    def scaled(self, t: float) -> "LossSpec":
        return LossSpec(self.lam * t, self.cost_weights * t)

    # vectorised over log-ratio arrays of shape (..., k-1)
    def decision_costs(self, log_z) -> np.ndarray:
        """``(..., k)`` array whose entry ``j`` is the cost of accepting ``H_{j+1}``."""
        return extended_z(log_z) @ self.lam

    def g(self, log_z) -> np.ndarray:
        return self.decision_costs(log_z).min(axis=-1)

    def stage(self, log_z) -> np.ndarray:
        return extended_z(log_z) @ self.cost_weights

    def decide(self, log_z) -> np.ndarray:
        """0-based index of the first minimiser (ties go to the smallest index)."""
        return self.decision_costs(log_z).argmin(axis=-1)

    def trivial_cost(self) -> float:
        """``l_0``: the cost of deciding without any observation."""
        return float(self.lam.sum(axis=0).min())

    def to_config(self) -> dict:
        return {"lambda": self.lam.tolist(), "cost_weights": self.cost_weights.tolist()}

    def canonical_json(self) -> str:
        return json.dumps(self.to_config(), sort_keys=True, separators=(",", ":"))

    def __repr__(self):
        return f"LossSpec(lam={self.lam.tolist()}, cost_weights={self.cost_weights.tolist()})"


@dataclass(frozen=True, eq=False)
class BayesSpec:
    priors: np.ndarray
    losses: np.ndarray
    cost: float

    def __post_init__(self):
        priors = np.array(self.priors, dtype=float)
        losses = np.array(self.losses, dtype=float)
        k = priors.size
        if k < 2 or losses.shape != (k, k):
            raise ConfigError("priors must have k >= 2 entries and losses must be k x k")
        if np.any(priors <= 0) or abs(priors.sum() - 1.0) > 1e-12:
            raise ConfigError("priors must be positive and sum to 1")
        if np.any(losses < 0) or np.any(np.diag(losses) != 0):
            raise ConfigError("losses must be non-negative with zero diagonal")
        if not self.cost > 0:
            raise ConfigError("observation cost must be positive")
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "cost", float(self.cost))


def terminal_cost_g(spec: LossSpec, z) -> float:
    return float(spec.g(_as_log_z(z)))


def accept_decision(spec: LossSpec, z) -> int:
    """Accepted hypothesis, numbered from 1."""
    return int(spec.decide(_as_log_z(z))) + 1


def stage_cost(spec: LossSpec, z) -> float:
    return float(spec.stage(_as_log_z(z)))


def bayes_to_lagrange(b: BayesSpec) -> LossSpec:
    """``lambda_ij = pi_i w_ij`` and ``c_i = c pi_i``."""
    return LossSpec(b.priors[:, None] * b.losses, b.cost * b.priors)


def bayes_risk(b: BayesSpec, alpha, asn) -> float:
    """Prior-weighted sampling cost plus expected decision loss."""
    alpha = np.asarray(alpha, dtype=float)
    asn = np.asarray(asn, dtype=float)
    return float(sum(b.priors[i] * (b.cost * asn[i] + (b.losses[i] * alpha[i]).sum())
                     for i in range(b.priors.size)))


def loss_from_config(cfg: dict) -> tuple[LossSpec, BayesSpec | None]:
    """Read the ``loss`` or ``bayes`` block of a run configuration (exactly one must be present)."""
    has_loss, has_bayes = "loss" in cfg, "bayes" in cfg
    if has_loss == has_bayes:
        raise ConfigError("config must contain exactly one of 'loss' or 'bayes'")
    try:
        if has_loss:
            block = cfg["loss"]
            return LossSpec(block["lambda"], block.get("cost_weights")), None
        block = cfg["bayes"]
        b = BayesSpec(block["priors"], block["losses"], block["cost"])
        return bayes_to_lagrange(b), b
    except KeyError as exc:
        raise ConfigError(f"loss/bayes block is missing {exc}") from exc
