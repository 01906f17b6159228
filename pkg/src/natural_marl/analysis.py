"""Validators for the optimization theory behind the natural-gradient methods.

Single-agent quantities use a tabular Boltzmann instance: features ``q``
(S, A, m), parameter ``theta`` (m,) and a state weighting ``d`` (S,).
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import env_abstract as ea
from .algorithms import StepSchedule, fisher_step, step_sizes
from .policy import FisherState, boltzmann_probs, exact_fisher, fisher_update, inverse_cdf, score, \
    sherman_morrison_inverse_update


def finite_difference_gradient(fn: Callable, theta, h=1e-6):
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    flat = grad.reshape(-1)
    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = h
        e = e.reshape(theta.shape)
        flat[k] = (fn(theta + e) - fn(theta - e)) / (2.0 * h)
    return grad


def finite_difference_hessian(fn: Callable, theta, h=1e-4):
    theta = np.asarray(theta, dtype=float)
    k = theta.size
    hess = np.zeros((k, k))
    base = theta.reshape(-1)
    for i in range(k):
        for j in range(i, k):
            def at(di, dj):
                x = base.copy()
                x[i] += di
                x[j] += dj
                return fn(x.reshape(theta.shape))
            val = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h)
            hess[i, j] = hess[j, i] = val
    return hess


# ---------------------------------------------------------------------------
# KL divergence between Boltzmann policies
# ---------------------------------------------------------------------------

def _logsumexp(x, axis):
    mx = x.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def kl_boltzmann(q, theta, delta_theta, d):
    """E_{s~d, a~pi_theta} log sum_b pi_theta(s,b) exp((q_b - q_a).dtheta)."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 3:
        raise ValueError("kl_boltzmann needs enumerable (S, A, m) features")
    probs = boltzmann_probs(q, theta)
    proj = q @ np.asarray(delta_theta, dtype=float)  # (S, A)
    # inner[s, a] = log sum_b pi(s,b) exp(proj[s,b] - proj[s,a])
    inner = _logsumexp(np.log(probs)[:, None, :] + proj[:, None, :] - proj[:, :, None], axis=2)
    return float(np.einsum("s,sa,sa->", d, probs, inner))


def kl_definitional(q, theta, delta_theta, d):
    p = boltzmann_probs(q, theta)
    p2 = boltzmann_probs(q, np.asarray(theta) + np.asarray(delta_theta))
    return float(np.einsum("s,sa,sa->", d, p, np.log(p) - np.log(p2)))


def kl_quadratic(delta_theta, fisher):
    dt = np.asarray(delta_theta, dtype=float)
    return 0.5 * float(dt @ fisher @ dt)


def kl_gradient_exact(q, theta, delta_theta, d):
    """-E_{s~d, a~pi_theta}[psi_{theta+dtheta}(s, a)] by enumeration."""
    p = boltzmann_probs(q, theta)
    psi_new = score(q, boltzmann_probs(q, np.asarray(theta) + np.asarray(delta_theta)))
    return -np.einsum("s,sa,sam->m", d, p, psi_new)


def kl_gradient_estimate(q, theta, delta_theta, d, samples, rng):
    """Monte-Carlo mean of -psi_{theta+dtheta}(s, a) with s ~ d, a ~ pi_theta."""
    q = np.asarray(q, dtype=float)
    n_s, n_a, _ = q.shape
    p = boltzmann_probs(q, theta)
    s = np.minimum(np.searchsorted(np.cumsum(d), rng.random(samples), side="right"), n_s - 1)
    cdf = np.cumsum(p, axis=1)[s]
    a = np.minimum((cdf <= rng.random(samples)[:, None]).sum(axis=1), n_a - 1)
    counts = np.bincount(s * n_a + a, minlength=n_s * n_a).reshape(n_s, n_a) / samples
    psi_new = score(q, boltzmann_probs(q, np.asarray(theta) + np.asarray(delta_theta)))
    return -np.einsum("sa,sam->m", counts, psi_new)


@dataclass
class KlReport:
    exact_kl: float
    definitional_kl: float
    quadratic_approx: float
    mc_gradient: np.ndarray
    fd_gradient: np.ndarray
    exact_gradient: np.ndarray

    @property
    def quadratic_ratio(self):
        return self.exact_kl / self.quadratic_approx if self.quadratic_approx > 0 else np.nan

    @property
    def mc_rel_error(self):
        return float(np.linalg.norm(self.mc_gradient - self.fd_gradient) / np.linalg.norm(self.fd_gradient))


def kl_report(q, theta, delta_theta, d, samples, rng, h=1e-6):
    fisher = exact_fisher(q, theta, d)
    fd = finite_difference_gradient(lambda x: kl_boltzmann(q, theta, x, d), delta_theta, h)
    return KlReport(
        exact_kl=kl_boltzmann(q, theta, delta_theta, d),
        definitional_kl=kl_definitional(q, theta, delta_theta, d),
        quadratic_approx=kl_quadratic(delta_theta, fisher),
        mc_gradient=kl_gradient_estimate(q, theta, delta_theta, d, samples, rng),
        fd_gradient=fd,
        exact_gradient=kl_gradient_exact(q, theta, delta_theta, d),
    )


def random_boltzmann(rng, n_states=3, n_actions=3, m=4, scale=1.0):
    """Random tabular instance (q, theta, d) with q in [0, 1]."""
    q = rng.random((n_states, n_actions, m))
    theta = rng.normal(scale=scale, size=m)
    d = rng.random(n_states) + 0.1
    return q, theta, d / d.sum()


# ---------------------------------------------------------------------------
# proportionality of the KL gradient and the objective gradient
# ---------------------------------------------------------------------------

@dataclass
class ProportionalityReport:
    step_norm: float
    rho: float
    kl_residual: float  # ||grad KL + (1/rho) grad J|| / ||grad KL||
    score_residual: float  # ||E[psi_{theta+dtheta}] - (1/rho) grad J|| / ||E[psi]||


def proportionality_check(mdp, theta, step_norm, h=1e-7):
    """Step along the natural gradient of a single-agent instance and fit rho."""
    if mdp.n_agents != 1:
        raise ValueError("proportionality check uses a single-agent instance")
    rep = ea.oracle(mdp, theta)
    q = mdp.q[0]
    grad = rep.grad_J[0]
    g = rep.fisher[0]
    nat = np.linalg.solve(g, grad)
    dtheta = step_norm * nat / np.linalg.norm(nat)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    kl_grad = finite_difference_gradient(lambda x: kl_boltzmann(q, theta, x, rep.d_theta), dtheta, h)
    c = float(kl_grad @ grad / (grad @ grad))  # grad KL ~ c grad J, i.e. rho = -1/c
    rho = -1.0 / c
    kl_res = np.linalg.norm(kl_grad - c * grad) / np.linalg.norm(kl_grad)
    mean_score = -kl_gradient_exact(q, theta, dtheta, rep.d_theta)
    sc_res = np.linalg.norm(mean_score - grad / rho) / np.linalg.norm(mean_score)
    return ProportionalityReport(step_norm, rho, float(kl_res), float(sc_res))


def natural_gradient_check(fisher, grad):
    """Relative gap between G^-1 grad by explicit inverse and by a linear solve."""
    via_inv = np.linalg.inv(fisher) @ grad
    via_solve = np.linalg.solve(fisher, grad)
    return float(np.linalg.norm(via_inv - via_solve) / np.linalg.norm(via_solve))


# ---------------------------------------------------------------------------
# smallest singular value bound
# ---------------------------------------------------------------------------

def sigma_min_check(fisher, m=None, psi=None):
    fisher = np.asarray(fisher, dtype=float)
    if m is None:
        m = fisher.shape[0]
    if psi is not None and np.max(np.linalg.norm(psi, axis=-1)) > 1.0 + 1e-12:
        raise ValueError("features exceed unit norm")
    sig = float(np.min(np.abs(np.linalg.eigvalsh(0.5 * (fisher + fisher.T)))))
    return sig, sig <= 1.0 / m + 1e-9


def random_unit_fisher(rng, max_states=6, max_actions=4, max_m=8):
    """Exact Fisher of a random Boltzmann instance with every psi rescaled into the unit ball."""
    n_s = int(rng.integers(1, max_states + 1))
    n_a = int(rng.integers(2, max_actions + 1))
    m = int(rng.integers(1, max_m + 1))
    q = rng.normal(size=(n_s, n_a, m)) * rng.exponential(1.0)
    theta = rng.normal(size=m) * rng.exponential(1.0)
    d = rng.dirichlet(np.ones(n_s))
    probs = boltzmann_probs(q, theta)
    psi = score(q, probs)
    norms = np.linalg.norm(psi, axis=-1)
    # global rescale keeps the policy structure, a random shrink exercises the interior
    psi = psi / max(norms.max(), 1e-300) * rng.uniform(0.2, 1.0)
    g = np.einsum("s,sa,sam,san->mn", d, probs, psi, psi)
    return g, m, psi


def sigma_min_sweep(rng, instances=1000):
    rows = []
    for _ in range(instances):
        g, m, psi = random_unit_fisher(rng)
        sig, ok = sigma_min_check(g, m, psi)
        rows.append((m, sig, 1.0 / m, ok))
    return rows


# ---------------------------------------------------------------------------
# Fisher recursion at a frozen policy
# ---------------------------------------------------------------------------

@dataclass
class FisherCheck:
    samples: int
    rel_error: float  # ||G_T - G(theta)||_F / ||G(theta)||_F
    max_lockstep: float  # max_t ||G_t G_t^-1 - I||_F
    final_lockstep: float
    skipped: int


def check_fisher_recursion(mdp, theta, samples, rng_dyn, rng_pol, agent=0, schedule="critic",
                           step_schedule=StepSchedule(), g_inv_scale=1.0, cap=0.5, check_every=1):
    """Sample a trajectory at fixed theta and run the forward and inverse recursions in lockstep."""
    theta = np.asarray(theta, dtype=float).reshape(mdp.n_agents, mdp.policy_dim)
    sim = mdp.simulator(rng_dyn)
    s = sim.reset()
    m = mdp.policy_dim
    fs = FisherState.identity(m, g_inv_scale, track_g=True)
    eye = np.eye(m)
    worst = 0.0
    lock = 0.0
    probs_all = np.stack([boltzmann_probs(mdp.q[i], theta[i]) for i in range(mdp.n_agents)], axis=1)  # (S, n, A)
    for t in range(samples):
        probs = probs_all[s]
        actions = inverse_cdf(probs, rng_pol.random(mdp.n_agents))
        psi = score(mdp.q[agent, s], probs[agent], actions[agent])
        bv = step_sizes(t, step_schedule)[0]
        b = fisher_step(t, bv, schedule, cap)
        fisher_update(fs, psi, b)
        sherman_morrison_inverse_update(fs, psi, b)
        if t % check_every == 0 or t == samples - 1:
            lock = float(np.linalg.norm(fs.g @ fs.g_inv - eye))
            worst = max(worst, lock)
        s, _ = sim.step(actions)
    rep = ea.oracle(mdp, theta)
    exact = rep.fisher[agent]
    err = float(np.linalg.norm(fs.g - exact) / np.linalg.norm(exact))
    return FisherCheck(samples, err, worst, lock, fs.skipped)


# ---------------------------------------------------------------------------
# deterministic MAAC versus deterministic FI-MAN
# ---------------------------------------------------------------------------

@dataclass
class DeterministicTrace:
    theta_m: np.ndarray  # (T+1, n, m)
    theta_n: np.ndarray
    j_m: np.ndarray
    j_n: np.ndarray
    grad_norm_m: np.ndarray
    grad_norm_n: np.ndarray
    beta: np.ndarray  # (T,)
    flags: np.ndarray  # (T, 3) booleans: J order, gradient-norm order, step condition
    H: float
    m: int
    t0: Optional[int]
    regularized: int = 0
    notes: list = field(default_factory=list)

    @property
    def preconditions_hold(self):
        return self.t0 is not None

    @property
    def dominance_holds(self):
        if self.t0 is None:
            return None
        return bool(np.all(self.j_n[self.t0:] >= self.j_m[self.t0:] - 1e-12))


def _objective_fn(mdp):
    def fn(theta):
        return ea.exact_objective(mdp, ea.joint_policy(mdp, theta))
    return fn


def step_condition(beta, m, H):
    """beta m H / 2 + 1 - m^2 <= 0."""
    return beta * m * H / 2.0 + 1.0 - m * m <= 0.0


def deterministic_compare(mdp, theta0, steps, schedule=StepSchedule(), preconditioner=None, hessian_h=1e-4):
    """Run both deterministic recursions with exact gradients and exact Fisher blocks.

    ``preconditioner="identity"`` replaces every Fisher block by I (testing hook).
    """
    n, m_i = mdp.n_agents, mdp.policy_dim
    th_m = np.array(theta0, dtype=float).reshape(n, m_i)
    th_n = th_m.copy()
    hist_m, hist_n = [th_m.copy()], [th_n.copy()]
    j_m, j_n, gm, gn, betas = [], [], [], [], []
    regularized = 0
    for t in range(steps + 1):
        rep_m = ea.oracle(mdp, th_m)
        rep_n = ea.oracle(mdp, th_n)
        j_m.append(rep_m.J)
        j_n.append(rep_n.J)
        gm.append(float(np.linalg.norm(rep_m.grad_J)))
        gn.append(float(np.linalg.norm(rep_n.grad_J)))
        if t == steps:
            break
        beta = step_sizes(t, schedule)[1]
        betas.append(beta)
        nat = np.zeros_like(th_n)
        for i in range(n):
            if preconditioner == "identity":
                nat[i] = rep_n.grad_J[i]
                continue
            g = rep_n.fisher[i]
            if np.linalg.cond(g) > 1e12:
                g = g + 1e-8 * np.eye(m_i)
                regularized += 1
            nat[i] = np.linalg.solve(g, rep_n.grad_J[i])
        th_m = th_m + beta * rep_m.grad_J
        th_n = th_n + beta * nat
        hist_m.append(th_m.copy())
        hist_n.append(th_n.copy())
    fn = _objective_fn(mdp)
    H = max(float(np.abs(finite_difference_hessian(fn, th, hessian_h)).max()) for th in hist_m)
    m = n * m_i
    j_m, j_n, gm, gn, betas = map(np.array, (j_m, j_n, gm, gn, betas))
    flags = np.zeros((steps, 3), dtype=bool)
    flags[:, 0] = j_m[:steps] <= j_n[:steps]
    flags[:, 1] = gm[:steps] <= gn[:steps]
    flags[:, 2] = step_condition(betas, m, H)
    t0 = None
    # latest-start search: (ii)-(iii) must hold on every step from t0 on
    tail_ok = True
    for t in range(steps - 1, -1, -1):
        tail_ok = tail_ok and flags[t, 1] and flags[t, 2]
        if not tail_ok:
            break
        if flags[t, 0]:
            t0 = t
    notes = ["step condition H is an empirical finite-difference estimate over visited MAAC iterates"]
    return DeterministicTrace(np.array(hist_m), np.array(hist_n), j_m, j_n, gm, gn, betas, flags, H, m, t0,
                              regularized, notes)


def bias_diagnostic(mdp, theta, critic_lam, critic_v, critic_mu):
    """E[delta_tilde psi] under the exact stationary law minus the exact gradient, per agent."""
    rep = ea.oracle(mdp, theta)
    pi = ea.joint_policy(mdp, theta)
    acts = mdp.joint_actions()
    probs = ea.agent_probs(mdp, theta)
    out = []
    for i in range(mdp.n_agents):
        psi = score(mdp.q[i], probs[i])[:, acts[:, i], :]
        v_s = mdp.phi @ critic_v[i]
        next_v = mdp.transitions @ v_s
        dtil = mdp.f @ critic_lam[i] - critic_mu[i] + next_v - v_s[:, None]
        est = np.einsum("s,sa,sa,sam->m", rep.d_theta, pi, dtil, psi)
        out.append(est - rep.grad_J[i])
    return np.array(out)
