"""Linear critics: value, reward and objective estimates with TD errors.

Per-agent quantities are stacked along a leading agent axis. ``mu`` has
shape (n,), ``v`` (n, L), ``lam`` (n, M), ``trace_v`` (n, L).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .policy import FisherState


def value(v, phi):
    v, phi = np.asarray(v, dtype=float), np.asarray(phi, dtype=float)
    if v.shape[-1] != phi.shape[-1]:
        raise ValueError("dimension mismatch")
    return v @ phi


def reward_estimate(lam, f):
    return value(lam, f)


@dataclass
class CriticState:
    mu: np.ndarray
    v: np.ndarray
    lam: np.ndarray
    w: np.ndarray
    trace_v: np.ndarray
    fisher: Optional[FisherState] = None

    @classmethod
    def zeros(cls, n, L, M, m):
        return cls(np.zeros(n), np.zeros((n, L)), np.zeros((n, M)), np.zeros((n, m)), np.zeros((n, L)))

    def check_finite(self):
        for name in ("mu", "v", "lam", "w"):
            if not np.all(np.isfinite(getattr(self, name))):
                return name
        return None


@dataclass
class TransitionSample:
    s: object
    a: object
    s_next: object
    rewards: np.ndarray
    phi_s: np.ndarray
    phi_s_next: np.ndarray
    f_sa: np.ndarray


def td_error(sample, cs, i=None):
    """r - mu + v.phi(s') - v.phi(s); all agents when i is None."""
    sl = slice(None) if i is None else i
    dv = cs.v[sl] @ (sample.phi_s_next - sample.phi_s)
    return sample.rewards[sl] - cs.mu[sl] + dv


def td_error_param(sample, cs, i=None):
    sl = slice(None) if i is None else i
    dv = cs.v[sl] @ (sample.phi_s_next - sample.phi_s)
    return cs.lam[sl] @ sample.f_sa - cs.mu[sl] + dv


def critic_local_update(cs, sample, beta_v, trace_lambda=0.0):
    """Local (pre-consensus) critic step for every agent.

    Returns (mu_tilde, v_tilde, lam_tilde) and advances ``cs.trace_v`` in place.
    """
    if not (0.0 < beta_v <= 1.0):
        raise ValueError(f"beta_v must lie in (0, 1], got {beta_v}")
    r = sample.rewards
    delta = td_error(sample, cs)
    mu_t = (1.0 - beta_v) * cs.mu + beta_v * r
    cs.trace_v *= trace_lambda
    cs.trace_v += sample.phi_s
    v_t = cs.v + beta_v * delta[:, None] * cs.trace_v
    resid = r - cs.lam @ sample.f_sa
    lam_t = cs.lam + beta_v * resid[:, None] * sample.f_sa[None, :]
    return mu_t, v_t, lam_t


# ---------------------------------------------------------------------------
# reward-fit objectives on enumerable instances
# ---------------------------------------------------------------------------

def op1_gradient(lam, f_table, r_table, weights):
    """Gradient of sum_{s,a} w(s,a) (Rbar(s,a) - lam.f(s,a))^2 with Rbar the agent mean.

    f_table: (K, M) feature rows, r_table: (K, n) per-agent rewards, weights: (K,).
    """
    rbar = r_table.mean(axis=1)
    resid = rbar - f_table @ lam
    return -2.0 * f_table.T @ (weights * resid)


def op2_gradient(lam, f_table, r_table, weights):
    """Gradient of sum_i sum_{s,a} w(s,a) (R^i(s,a) - lam.f(s,a))^2."""
    resid = r_table - (f_table @ lam)[:, None]
    return -2.0 * f_table.T @ (weights * resid.sum(axis=1))


def reward_fit_fixed_point(f_table, r_table, weights):
    """Weighted least-squares fixed point F^T D (Rbar - F lam) = 0."""
    rbar = r_table.mean(axis=1)
    fw = f_table * weights[:, None]
    return np.linalg.lstsq(fw.T @ f_table, fw.T @ rbar, rcond=None)[0]
