"""The four decentralized actor-critic engines.

All agents are advanced together: per-agent parameters are stacked along a
leading agent axis. Consensus mixes only the critic-side quantities
(mu, v, lambda); actor parameters and advantage weights stay private.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .approx import CriticState, TransitionSample, critic_local_update, td_error_param
from .consensus import _random_metropolis_array, disagreement, uniform_weights
from .policy import boltzmann_probs, fisher_update, inverse_cdf, score, FisherState

log = logging.getLogger(__name__)


class AlgorithmKind(enum.Enum):
    MAAC = "MAAC"
    FI_MAN = "FI_MAN"
    AP_MAN = "AP_MAN"
    FIAP_MAN = "FIAP_MAN"

    @classmethod
    def parse(cls, text):
        key = text.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown algorithm {text!r}") from None

    @property
    def uses_fisher(self):
        return self in (AlgorithmKind.FI_MAN, AlgorithmKind.FIAP_MAN)

    @property
    def uses_advantage(self):
        return self in (AlgorithmKind.AP_MAN, AlgorithmKind.FIAP_MAN)


@dataclass(frozen=True)
class StepSchedule:
    exponent_v: float = 0.65
    exponent_theta: float = 0.85
    offset: int = 1
    # multipliers used only to freeze dynamics in tests (0 disables a timescale)
    scale_v: float = 1.0
    scale_theta: float = 1.0

    def __post_init__(self):
        if not (0.5 < self.exponent_v <= 1.0 and 0.5 < self.exponent_theta <= 1.0):
            raise ValueError("step-size exponents must lie in (0.5, 1]")
        if not self.exponent_theta > self.exponent_v:
            raise ValueError("exponent_theta must exceed exponent_v (actor on the slower timescale)")
        if not (0.0 <= self.scale_v <= 1.0 and 0.0 <= self.scale_theta <= 1.0):
            raise ValueError("schedule scales must lie in [0, 1]")


def step_sizes(t, sched=StepSchedule()):
    if t < 0:
        raise ValueError("step index must be nonnegative")
    base = t + sched.offset
    return sched.scale_v / base ** sched.exponent_v, sched.scale_theta / base ** sched.exponent_theta


def fisher_step(t, beta_v, schedule="sample_average", cap=0.5):
    """Step size of the Fisher recursion at step t.

    "critic" reuses beta_v; "sample_average" uses 1/(t+2), treating the initial
    estimate as one prior sample. The cap keeps the inverse update defined at t=0.
    """
    base = beta_v if schedule == "critic" else 1.0 / (t + 2)
    return min(base, cap)


# ---------------------------------------------------------------------------
# actor and advantage updates (single agent or stacked along axis 0)
# ---------------------------------------------------------------------------

def _col(x):
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim else x


def maac_actor_step(theta, delta_tilde, psi, beta_theta):
    return theta + beta_theta * _col(delta_tilde) * psi


def fi_man_actor_step(theta, g_inv, delta_tilde, psi, beta_theta):
    nat = np.einsum("...ij,...j->...i", g_inv, psi)
    return theta + beta_theta * _col(delta_tilde) * nat


def ap_man_advantage_update(w, psi, delta_tilde, beta_v):
    proj = np.einsum("...i,...i->...", psi, w)
    return w - beta_v * _col(proj) * psi + beta_v * _col(delta_tilde) * psi


def fiap_man_advantage_update(w, g_inv, psi, delta_tilde, beta_v):
    nat = np.einsum("...ij,...j->...i", g_inv, psi)
    return (1.0 - beta_v) * w + beta_v * _col(delta_tilde) * nat


def natural_actor_step(theta, w_next, beta_theta):
    return theta + beta_theta * w_next


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, step, reason):
        super().__init__(f"run aborted at step {step}: {reason}")
        self.step = step
        self.reason = reason


@dataclass
class TrainConfig:
    iterations: int
    schedule: StepSchedule = StepSchedule()
    trace_lambda: float = 0.0
    consensus: str = "random"  # "random" (Metropolis on a fresh graph each step) or "uniform"
    connectivity_ratio: Optional[float] = None  # default 4/n
    g_inv_scale: float = 1.0
    fisher_step_cap: float = 0.5
    fisher_schedule: str = "sample_average"  # or "critic" (beta_v); see fisher_step
    log_interval: int = 1
    theta_limit: float = 1e6
    pin_g_inv: bool = False  # keep G^-1 at its initial value (testing hook)
    track_g: bool = False  # also run the forward recursion for G (diagnostics)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.log_interval < 1:
            raise ValueError("log_interval must be >= 1")
        if not (0.0 <= self.trace_lambda < 1.0):
            raise ValueError("trace_lambda must lie in [0, 1)")
        if self.consensus not in ("random", "uniform"):
            raise ValueError(f"unknown consensus mode {self.consensus!r}")
        if self.fisher_schedule not in ("critic", "sample_average"):
            raise ValueError(f"unknown fisher_schedule {self.fisher_schedule!r}")
        if not (0.0 < self.fisher_step_cap < 1.0):
            raise ValueError("fisher_step_cap must lie in (0, 1)")
        if self.g_inv_scale <= 0:
            raise ValueError("g_inv_scale must be positive")


@dataclass
class RunMetrics:
    algo: str
    seed: int
    n_agents: int
    epochs: np.ndarray  # (E,) 1-based epoch index
    rewards: np.ndarray  # (E, n) per-agent mean reward over the epoch
    network_total: np.ndarray  # (E,)
    disagreement: np.ndarray  # (E,) of stacked (mu, v, lambda)
    theta_dist: Optional[np.ndarray] = None  # (E, n) distance to the paired reference run
    theta_history: Optional[np.ndarray] = None  # (E, n, m)
    final_theta: Optional[np.ndarray] = None
    final_critic: Optional[CriticState] = None
    status: str = "ok"
    abort_step: Optional[int] = None
    abort_reason: str = ""
    diagnostics: dict = field(default_factory=dict)


class Trainer:
    """Single-run state machine; ``step()`` performs one algorithm iteration."""

    def __init__(self, env, kind, config, streams):
        self.env = env
        self.kind = kind
        self.cfg = config
        self.dyn_rng, self.pol_rng, self.con_rng = streams
        self.sim = env.simulator(self.dyn_rng)
        n, m = env.n_agents, env.policy_dim
        self.n = n
        self.theta = np.zeros((n, m))
        self.critic = CriticState.zeros(n, env.value_dim, env.reward_dim, m)
        self.g_inv = None
        self.g = None
        if kind.uses_fisher:
            self.g_inv = np.tile(np.eye(m) * config.g_inv_scale, (n, 1, 1))
            if config.track_g:
                self.g = np.tile(np.eye(m) / config.g_inv_scale, (n, 1, 1))
        self.ratio = config.connectivity_ratio if config.connectivity_ratio is not None else min(1.0, 4.0 / n)
        self.uniform = uniform_weights(n).weights
        self.obs = self.sim.reset()
        self.t = 0
        self.fisher_skips = 0
        self.max_psi_norm = 0.0

    def consensus_matrix(self):
        if self.cfg.consensus == "uniform" or self.n == 1:
            return self.uniform
        return _random_metropolis_array(self.n, self.ratio, self.con_rng)

    def step(self):
        t = self.t
        kind = self.kind
        bv, bt = step_sizes(t, self.cfg.schedule)
        sim = self.sim
        obs = self.obs
        q = sim.policy_features(obs)
        probs = boltzmann_probs(q, self.theta)
        actions = inverse_cdf(probs, self.pol_rng.random(self.n))
        phi = sim.state_features(obs)
        f = sim.reward_features(obs, actions)
        obs_next, rewards = sim.step(actions)
        sample = TransitionSample(obs, actions, obs_next, rewards, phi, sim.state_features(obs_next), f)
        psi = score(q, probs, actions)
        self.max_psi_norm = max(self.max_psi_norm, float(np.sqrt((psi * psi).sum(axis=1)).max()))

        crit = self.critic
        dt = td_error_param(sample, crit)
        if bv > 0:
            mu_t, v_t, lam_t = critic_local_update(crit, sample, bv, self.cfg.trace_lambda)
        else:
            mu_t, v_t, lam_t = crit.mu, crit.v, crit.lam

        if kind is AlgorithmKind.MAAC:
            self.theta = maac_actor_step(self.theta, dt, psi, bt)
        elif kind is AlgorithmKind.FI_MAN:
            self.theta = fi_man_actor_step(self.theta, self.g_inv, dt, psi, bt)
        elif kind is AlgorithmKind.AP_MAN:
            crit.w = ap_man_advantage_update(crit.w, psi, dt, bv)
            self.theta = natural_actor_step(self.theta, crit.w, bt)
        else:
            crit.w = fiap_man_advantage_update(crit.w, self.g_inv, psi, dt, bv)
            self.theta = natural_actor_step(self.theta, crit.w, bt)

        c = self.consensus_matrix()
        crit.mu = c @ mu_t
        crit.v = c @ v_t
        crit.lam = c @ lam_t

        if kind.uses_fisher and not self.cfg.pin_g_inv and bv > 0:
            bf = fisher_step(t, bv, self.cfg.fisher_schedule, self.cfg.fisher_step_cap)
            for i in range(self.n):
                p = np.ascontiguousarray(psi[i])
                if not _kernels.sm_update(self.g_inv[i], p, bf):
                    self.fisher_skips += 1
                    log.warning("singular Sherman-Morrison denominator at step %d agent %d", t, i)
                if self.g is not None:
                    fs = FisherState(self.g[i], self.g_inv[i])
                    fisher_update(fs, p, bf)

        norms = np.sqrt((self.theta ** 2).sum(axis=1))
        if not np.all(np.isfinite(norms)):
            raise TrainingDiverged(t, "non-finite actor parameter")
        if norms.max() > self.cfg.theta_limit:
            raise TrainingDiverged(t, f"actor parameter norm {norms.max():.3g} exceeds {self.cfg.theta_limit:g}")
        bad = crit.check_finite()
        if bad is not None:
            raise TrainingDiverged(t, f"non-finite critic parameter {bad}")
        if self.g_inv is not None and not np.all(np.isfinite(self.g_inv)):
            raise TrainingDiverged(t, "non-finite Fisher inverse")

        self.obs = obs_next
        self.t += 1
        return rewards


def train(env, kind, config, streams, reference_theta=None, record_theta=False, algo_label=None, seed=0):
    """Run one algorithm on one environment.

    ``streams`` is (dynamics_rng, policy_rng, consensus_rng). ``reference_theta``
    (E, n, m), usually the paired MAAC history, enables the distance trace.
    """
    if isinstance(kind, str):
        kind = AlgorithmKind.parse(kind)
    tr = Trainer(env, kind, config, streams)
    n, li = env.n_agents, config.log_interval
    n_epochs = config.iterations // li
    rewards = np.zeros((n_epochs, n))
    dis = np.zeros(n_epochs)
    hist = np.zeros((n_epochs, n, env.policy_dim)) if record_theta else None
    dist = np.zeros((n_epochs, n)) if reference_theta is not None else None
    status, abort_step, reason = "ok", None, ""
    done = 0
    acc = np.zeros(n)
    try:
        for e in range(n_epochs):
            acc[:] = 0.0
            for _ in range(li):
                acc += tr.step()
            rewards[e] = acc / li
            crit = tr.critic
            dis[e] = disagreement(np.concatenate([crit.mu[:, None], crit.v, crit.lam], axis=1))
            if hist is not None:
                hist[e] = tr.theta
            if dist is not None:
                dist[e] = np.sqrt(((tr.theta - reference_theta[e]) ** 2).sum(axis=1))
            done = e + 1
    except TrainingDiverged as exc:
        status, abort_step, reason = "aborted", exc.step, exc.reason
        log.error("%s seed %d: %s", kind.value, seed, exc)
    sl = slice(0, done)
    diagnostics = {"fisher_skips": tr.fisher_skips, "max_psi_norm": tr.max_psi_norm}
    diagnostics.update(getattr(tr.sim, "diagnostics", lambda: {})())
    return RunMetrics(
        algo=algo_label or kind.value,
        seed=seed,
        n_agents=n,
        epochs=np.arange(1, done + 1),
        rewards=rewards[sl],
        network_total=rewards[sl].sum(axis=1),
        disagreement=dis[sl],
        theta_dist=None if dist is None else dist[sl],
        theta_history=None if hist is None else hist[sl],
        final_theta=tr.theta.copy(),
        final_critic=tr.critic,
        status=status,
        abort_step=abort_step,
        abort_reason=reason,
        diagnostics=diagnostics,
    )
