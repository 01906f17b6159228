"""Boltzmann policies, compatible features and Fisher information estimates.

Functions work on per-state feature blocks ``q`` of shape (..., A, m) so
that one call can evaluate every agent (leading axis) at once.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)


def softmax_logits(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def boltzmann_probs(q, theta):
    """Action probabilities from features q (..., A, m) and theta (..., m)."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite policy parameter")
    logits = np.einsum("...am,...m->...a", q, theta)
    return softmax_logits(logits)


def score(q, probs, actions=None):
    """Compatible features q_a - sum_b pi_b q_b.

    With ``actions`` (shape ``q.shape[:-2]``) returns the selected rows,
    otherwise every action's row.
    """
    mean_q = np.einsum("...a,...am->...m", probs, q)
    if actions is None:
        return q - mean_q[..., None, :]
    sel = np.take_along_axis(q, np.asarray(actions)[..., None, None], axis=-2)[..., 0, :]
    return sel - mean_q


@dataclass
class BoltzmannPolicy:
    theta: np.ndarray
    feature_map: Callable  # (state) -> (A, m) feature block

    def features(self, state):
        return np.asarray(self.feature_map(state), dtype=float)


def action_probabilities(policy, state):
    return boltzmann_probs(policy.features(state), policy.theta)


def compatible_features(policy, state, action):
    q = policy.features(state)
    return score(q, boltzmann_probs(q, policy.theta), action)


def sample_action(probs, rng):
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities are not a simplex vector")
    return inverse_cdf(probs, rng.random())


def inverse_cdf(probs, u):
    """Index of the first cumulative mass exceeding u (vectorized over leading axes)."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= np.asarray(u)[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass
class FisherState:
    g: Optional[np.ndarray]
    g_inv: np.ndarray
    skipped: int = field(default=0)

    @classmethod
    def identity(cls, m, scale=1.0, track_g=True):
        g = np.eye(m) / scale if track_g else None
        return cls(g, np.eye(m) * scale)


def fisher_update(fs, psi, beta_v):
    if not (0.0 < beta_v <= 1.0):
        raise ValueError(f"beta_v must lie in (0, 1], got {beta_v}")
    psi = np.asarray(psi, dtype=float)
    if fs.g is None or fs.g.shape[0] != psi.shape[0]:
        raise ValueError("dimension mismatch between Fisher estimate and psi")
    fs.g *= 1.0 - beta_v
    fs.g += beta_v * np.outer(psi, psi)
    return fs


def sherman_morrison_inverse_update(fs, psi, beta_v):
    if not (0.0 < beta_v < 1.0):
        raise ValueError(f"beta_v must lie in (0, 1) for the inverse update, got {beta_v}")
    psi = np.ascontiguousarray(psi, dtype=float)
    if psi.shape[0] != fs.g_inv.shape[0]:
        raise ValueError("dimension mismatch between inverse estimate and psi")
    if not _kernels.sm_update(fs.g_inv, psi, float(beta_v)):
        fs.skipped += 1
        log.warning("singular Sherman-Morrison denominator; rank-one term skipped")
    return fs


def exact_fisher(q_table, theta, d, state_cap=4096):
    """Exact E[psi psi^T] over states weighted by d and actions by pi.

    q_table: (S, A, m) features of one agent, theta: (m,), d: (S,).
    """
    q_table = np.asarray(q_table, dtype=float)
    if q_table.shape[0] > state_cap:
        raise ValueError(f"{q_table.shape[0]} states exceeds the oracle cap {state_cap}")
    probs = boltzmann_probs(q_table, theta)
    psi = score(q_table, probs)
    return np.einsum("s,sa,sam,san->mn", d, probs, psi, psi)
