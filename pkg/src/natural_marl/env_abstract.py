"""Random multi-agent MDPs and an exact oracle for small instances.

Joint actions are flattened with mixed radix, agent 0 least significant:
``idx = sum_i a_i * A**i``. Tables are stored joint-action-major so one
transition reads contiguous memory.
"""

import base64
import io
import zlib
from dataclasses import dataclass

import numpy as np

from .policy import boltzmann_probs, score

ORACLE_CAP = 4096
FORMAT_TAG = "NATURAL-MARL-MDP"
FORMAT_VERSION = 1


@dataclass
class AbstractMdp:
    n_agents: int
    n_states: int
    n_actions: int
    transitions: np.ndarray  # (S, A^n, S)
    rewards: np.ndarray  # (S, A^n, n) mean rewards
    phi: np.ndarray  # (S, L)
    f: np.ndarray  # (S, A^n, M)
    q: np.ndarray  # (n, S, A, m)
    reward_noise: float = 0.5

    @property
    def n_joint(self):
        return self.n_actions ** self.n_agents

    @property
    def policy_dim(self):
        return self.q.shape[-1]

    @property
    def value_dim(self):
        return self.phi.shape[-1]

    @property
    def reward_dim(self):
        return self.f.shape[-1]

    def joint_index(self, actions):
        return int(np.dot(actions, self.n_actions ** np.arange(self.n_agents)))

    def joint_actions(self):
        """(A^n, n) table of per-agent actions for each joint index."""
        idx = np.arange(self.n_joint)
        return (idx[:, None] // self.n_actions ** np.arange(self.n_agents)[None, :]) % self.n_actions

    def simulator(self, rng):
        return AbstractSim(self, rng)

    def validate(self):
        rows = self.transitions.sum(axis=-1)
        if np.max(np.abs(rows - 1.0)) > 1e-12 or self.transitions.min() <= 0:
            raise ValueError("transition rows must be strictly positive and sum to one")


def generate(n, num_states, rng, n_actions=2, m=5, L=5, M=10, floor=1e-5):
    """Random instance: uniform transitions (+floor, row-normalized), rewards U[0,4], features U[0,1].

    Draw order: transitions, rewards, phi, f, q.
    """
    if n < 1 or num_states < 1:
        raise ValueError("n and num_states must be >= 1")
    na = n_actions ** n
    p = rng.random((num_states, na, num_states)) + floor
    p /= p.sum(axis=-1, keepdims=True)
    r = rng.uniform(0.0, 4.0, size=(num_states, na, n))
    phi = rng.random((num_states, L))
    f = rng.random((num_states, na, M))
    q = rng.random((n, num_states, n_actions, m))
    return AbstractMdp(n, num_states, n_actions, p, r, phi, f, q)


class AbstractSim:
    """Mutable run state: current state index plus the dynamics stream."""

    def __init__(self, mdp, rng):
        self.mdp = mdp
        self.rng = rng
        self.radix = mdp.n_actions ** np.arange(mdp.n_agents)
        self.s = 0

    def reset(self):
        self.s = int(self.rng.integers(self.mdp.n_states))
        return self.s

    def policy_features(self, s):
        return self.mdp.q[:, s]

    def state_features(self, s):
        return self.mdp.phi[s]

    def reward_features(self, s, actions):
        return self.mdp.f[s, int(actions @ self.radix)]

    def step(self, actions):
        self.s, r = step(self.mdp, self.s, actions, self.rng)
        return self.s, r


def step(mdp, s, joint_a, rng):
    if not (0 <= s < mdp.n_states):
        raise IndexError(f"state {s} out of range")
    a = np.asarray(joint_a)
    if a.ndim:
        if np.any(a < 0) or np.any(a >= mdp.n_actions):
            raise IndexError("agent action out of range")
        idx = int(a @ (mdp.n_actions ** np.arange(mdp.n_agents)))
    else:
        idx = int(a)
        if not (0 <= idx < mdp.n_joint):
            raise IndexError("joint action out of range")
    u = rng.random(1 + mdp.n_agents)
    row = mdp.transitions[s, idx]
    s_next = min(int(np.searchsorted(np.cumsum(row), u[0], side="right")), mdp.n_states - 1)
    rewards = mdp.rewards[s, idx] + mdp.reward_noise * (2.0 * u[1:] - 1.0)
    return s_next, rewards


# ---------------------------------------------------------------------------
# exact oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleReport:
    d_theta: np.ndarray  # (S,)
    J: float
    grad_J: np.ndarray  # (n, m)
    Q: np.ndarray  # (S, A^n)
    V: np.ndarray  # (S,)
    fisher: np.ndarray  # (n, m, m)
    poisson_residual: float


def _check_cap(mdp):
    if mdp.n_states * mdp.n_joint > ORACLE_CAP:
        raise ValueError(f"{mdp.n_states}x{mdp.n_joint} state-action pairs exceed the oracle cap {ORACLE_CAP}")


def agent_probs(mdp, thetas):
    """(n, S, A) per-agent action probabilities."""
    thetas = np.asarray(thetas, dtype=float).reshape(mdp.n_agents, mdp.policy_dim)
    return boltzmann_probs(mdp.q, thetas[:, None, :])


def joint_policy(mdp, thetas):
    """(S, A^n) product policy."""
    _check_cap(mdp)
    probs = agent_probs(mdp, thetas)
    acts = mdp.joint_actions()
    pi = np.ones((mdp.n_states, mdp.n_joint))
    for i in range(mdp.n_agents):
        pi *= probs[i][:, acts[:, i]]
    return pi


def stationary_from_matrix(p):
    """Stationary row vector of an ergodic stochastic matrix via a linear solve."""
    k = p.shape[0]
    a = (np.eye(k) - p + np.ones((k, k))).T
    d = np.linalg.solve(a, np.ones(k))
    resid = np.abs(d @ p - d).max()
    if resid > 1e-10 or np.any(d <= 0):
        raise ValueError(f"chain is not ergodic (stationarity residual {resid:.2e})")
    return d


def policy_transition(mdp, pi):
    return np.einsum("sa,sat->st", pi, mdp.transitions)


def stationary_distribution(mdp, pi):
    _check_cap(mdp)
    return stationary_from_matrix(policy_transition(mdp, pi))


def exact_objective(mdp, pi, d=None):
    if d is None:
        d = stationary_distribution(mdp, pi)
    rbar = mdp.rewards.mean(axis=-1)
    return float(d @ (pi * rbar).sum(axis=1))


def solve_poisson(mdp, pi):
    """Average-reward Poisson solution (d, J, V, Q, residual) with d.V = 0."""
    _check_cap(mdp)
    p_pi = policy_transition(mdp, pi)
    d = stationary_from_matrix(p_pi)
    rbar = mdp.rewards.mean(axis=-1)
    r_pi = (pi * rbar).sum(axis=1)
    j = float(d @ r_pi)
    k = mdp.n_states
    # fundamental matrix (I - P + 1 d^T)^-1 gives the d-centred bias
    z = np.eye(k) - p_pi + np.outer(np.ones(k), d)
    v = np.linalg.solve(z, r_pi - j)
    q = rbar - j + mdp.transitions @ v
    resid = float(np.abs(r_pi - j + p_pi @ v - v).max())
    return d, j, v, q, resid


def exact_gradient(mdp, thetas, i, baseline=True, _cache=None):
    """Exact gradient of the average reward in agent i's parameters."""
    pi = joint_policy(mdp, thetas)
    d, j, v, q, _ = _cache if _cache is not None else solve_poisson(mdp, pi)
    probs = agent_probs(mdp, thetas)[i]
    psi = score(mdp.q[i], probs)  # (S, A, m)
    acts = mdp.joint_actions()[:, i]
    psi_joint = psi[:, acts, :]  # (S, A^n, m)
    weight = q - v[:, None] if baseline else q
    return np.einsum("s,sa,sa,sam->m", d, pi, weight, psi_joint)


def oracle(mdp, thetas):
    thetas = np.asarray(thetas, dtype=float).reshape(mdp.n_agents, mdp.policy_dim)
    pi = joint_policy(mdp, thetas)
    d, j, v, q, resid = solve_poisson(mdp, pi)
    cache = (d, j, v, q, resid)
    grads = np.stack([exact_gradient(mdp, thetas, i, _cache=cache) for i in range(mdp.n_agents)])
    probs = agent_probs(mdp, thetas)
    psi = score(mdp.q, probs)  # (n, S, A, m)
    fisher = np.einsum("s,isa,isam,isan->imn", d, probs, psi, psi)
    return OracleReport(d, j, grads, q, v, fisher, resid)


def relative_value(v_i, phi):
    return np.asarray(phi, dtype=float) @ np.asarray(v_i, dtype=float)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_TABLES = ("transitions", "rewards", "phi", "f", "q")


def _encode(arr):
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    text = base64.b64encode(zlib.compress(raw, 6)).decode("ascii")
    return [text[k:k + 76] for k in range(0, len(text), 76)]


def dumps(mdp):
    out = io.StringIO()
    out.write(f"{FORMAT_TAG} {FORMAT_VERSION}\n")
    out.write(f"n_agents {mdp.n_agents}\nn_states {mdp.n_states}\nn_actions {mdp.n_actions}\n")
    out.write(f"reward_noise {mdp.reward_noise!r}\nencoding base64-zlib-f8le\n")
    for name in _TABLES:
        arr = getattr(mdp, name)
        out.write(f"table {name} " + " ".join(str(x) for x in arr.shape) + "\n")
        for line in _encode(arr):
            out.write(line + "\n")
        out.write("end\n")
    return out.getvalue()


def loads(text):
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_TAG:
        raise ValueError("not an MDP file")
    if int(head[1]) != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {head[1]}")
    meta, tables = {}, {}
    k = 1
    while k < len(lines):
        parts = lines[k].split()
        k += 1
        if not parts:
            continue
        if parts[0] == "table":
            name, shape = parts[1], tuple(int(x) for x in parts[2:])
            chunks = []
            while lines[k] != "end":
                chunks.append(lines[k])
                k += 1
            k += 1
            raw = zlib.decompress(base64.b64decode("".join(chunks)))
            tables[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)
        else:
            meta[parts[0]] = parts[1]
    if meta.get("encoding") != "base64-zlib-f8le":
        raise ValueError("unknown table encoding")
    missing = [t for t in _TABLES if t not in tables]
    if missing:
        raise ValueError(f"missing tables: {missing}")
    return AbstractMdp(int(meta["n_agents"]), int(meta["n_states"]), int(meta["n_actions"]),
                       tables["transitions"], tables["rewards"], tables["phi"], tables["f"], tables["q"],
                       float(meta.get("reward_noise", 0.5)))


def save(mdp, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps(mdp))


def load(path):
    with open(path, encoding="ascii") as fh:
        return loads(fh.read())
