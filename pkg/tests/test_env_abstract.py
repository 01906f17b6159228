import numpy as np
import pytest

from natural_marl import env_abstract as ea


def hand_mdp(p, r, n_actions=1, n=1):
    """Build an instance from explicit (S, A^n, S) transitions and (S, A^n, n) rewards."""
    p, r = np.asarray(p, float), np.asarray(r, float)
    s, na = p.shape[:2]
    return ea.AbstractMdp(n, s, n_actions, p, r, np.ones((s, 1)), np.ones((s, na, 1)),
                          np.zeros((n, s, n_actions, 1)))


def test_generate_invariants(rng):
    mdp = ea.generate(3, 5, rng)
    np.testing.assert_allclose(mdp.transitions.sum(axis=-1), 1.0, atol=1e-12)
    assert mdp.transitions.min() > 0
    assert mdp.rewards.min() >= 0 and mdp.rewards.max() <= 4
    for t in (mdp.phi, mdp.f, mdp.q):
        assert t.min() >= 0 and t.max() <= 1
    mdp.validate()
    with pytest.raises(ValueError):
        ea.generate(0, 3, rng)


def test_generate_defaults():
    mdp = ea.generate(15, 15, np.random.default_rng(0))
    assert (mdp.n_agents, mdp.n_states, mdp.n_actions) == (15, 15, 2)
    assert (mdp.policy_dim, mdp.value_dim, mdp.reward_dim) == (5, 5, 10)
    assert mdp.transitions.shape == (15, 2 ** 15, 15)


def test_generate_deterministic():
    a = ea.generate(2, 4, np.random.default_rng(3))
    b = ea.generate(2, 4, np.random.default_rng(3))
    for name in ("transitions", "rewards", "phi", "f", "q"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_joint_actions_radix():
    mdp = ea.generate(3, 2, np.random.default_rng(0))
    acts = mdp.joint_actions()
    for k, a in enumerate(acts):
        assert mdp.joint_index(a) == k
    assert acts[1].tolist() == [1, 0, 0]


def test_step_degenerate_row(rng):
    p = np.zeros((3, 1, 3))
    p[:, :, 0] = 1.0
    mdp = hand_mdp(p, np.ones((3, 1, 1)))
    s = 2
    for _ in range(50):
        s, _ = ea.step(mdp, s, np.zeros(1, int), rng)
        assert s == 0
    with pytest.raises(IndexError):
        ea.step(mdp, 3, np.zeros(1, int), rng)


def test_step_reward_distribution(rng):
    mdp = ea.generate(2, 3, rng)
    a = np.array([1, 0])
    draws = np.array([ea.step(mdp, 1, a, rng)[1] for _ in range(100000)])
    mean = mdp.rewards[1, mdp.joint_index(a)]
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.01)
    assert np.all(draws >= mean - 0.5) and np.all(draws <= mean + 0.5)


def test_stationary_doubly_stochastic():
    p = np.array([[0.2, 0.5, 0.3], [0.5, 0.1, 0.4], [0.3, 0.4, 0.3]])
    np.testing.assert_allclose(ea.stationary_from_matrix(p), 1 / 3, atol=1e-14)


def test_stationary_two_state():
    p_, q_ = 0.3, 0.1
    d = ea.stationary_from_matrix(np.array([[1 - p_, p_], [q_, 1 - q_]]))
    np.testing.assert_allclose(d, [q_ / (p_ + q_), p_ / (p_ + q_)], atol=1e-14)
    assert np.all(d > 0)


def test_objective_constant_rewards(rng):
    mdp = ea.generate(2, 3, rng)
    mdp.rewards[:] = 1.7
    pi = ea.joint_policy(mdp, rng.normal(size=(2, 5)))
    assert ea.exact_objective(mdp, pi) == pytest.approx(1.7, abs=1e-12)


def test_objective_matches_simulation():
    # 2 states, 2 actions, single agent
    p = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.5, 0.5], [0.3, 0.7]]])
    r = np.array([[[1.0], [3.0]], [[0.5], [2.0]]])
    mdp = hand_mdp(p, r, n_actions=2)
    mdp.q = np.array([[[[1.0], [0.0]], [[0.0], [1.0]]]])
    theta = np.array([[0.4]])
    pi = ea.joint_policy(mdp, theta)
    J = ea.exact_objective(mdp, pi)
    rng = np.random.default_rng(0)
    T = 10 ** 6
    us = rng.random((T, 2))
    s, tot = 0, 0.0
    cum_pi = np.cumsum(pi, axis=1)
    cum_p = np.cumsum(p, axis=2)
    for t in range(T):
        a = int(us[t, 0] >= cum_pi[s, 0])
        tot += r[s, a, 0]
        s = int(us[t, 1] >= cum_p[s, a, 0])
    assert abs(tot / T - J) / J < 0.005


def test_objective_permutation_invariant(rng):
    mdp = ea.generate(2, 3, rng)
    pi = np.full((3, 4), 0.25)
    swapped = ea.AbstractMdp(2, 3, 2, mdp.transitions, mdp.rewards[:, :, ::-1].copy(), mdp.phi, mdp.f, mdp.q)
    assert ea.exact_objective(mdp, pi) == pytest.approx(ea.exact_objective(swapped, pi), abs=1e-14)


def test_symmetric_instance_zero_gradient(rng):
    mdp = ea.generate(2, 3, rng)
    mdp.q[:] = mdp.q[:, :, :1, :]  # identical features across actions
    rep = ea.oracle(mdp, np.zeros((2, 5)))
    np.testing.assert_allclose(rep.grad_J, 0.0, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_baseline_invariance_and_residual(seed):
    rng = np.random.default_rng(seed)
    mdp = ea.generate(2, 4, rng, m=3)
    th = rng.normal(size=(2, 3))
    for i in range(2):
        np.testing.assert_allclose(ea.exact_gradient(mdp, th, i, baseline=True),
                                   ea.exact_gradient(mdp, th, i, baseline=False), atol=1e-10)
    rep = ea.oracle(mdp, th)
    assert rep.poisson_residual < 1e-8
    assert rep.d_theta.sum() == pytest.approx(1.0)
    assert rep.d_theta @ rep.V == pytest.approx(0.0, abs=1e-12)


def test_oracle_cap(rng):
    mdp = ea.generate(13, 2, rng)  # 2 * 2^13 = 16384 > 4096 joint pairs
    with pytest.raises(ValueError):
        ea.oracle(mdp, np.zeros((13, 5)))


def test_relative_value(rng):
    phi = rng.random((4, 3))
    np.testing.assert_allclose(ea.relative_value(np.zeros(3), phi), 0.0)
    v = rng.normal(size=3)
    np.testing.assert_allclose(ea.relative_value(2 * v, phi), 2 * ea.relative_value(v, phi))
    np.testing.assert_allclose(ea.relative_value(np.array([1.0, 2, 3]), np.array([[1.0, 1, 1], [0, 0, 1]])), [6, 3])


def test_serialization_roundtrip(rng, tmp_path):
    mdp = ea.generate(3, 4, rng)
    path = tmp_path / "x.mdp"
    ea.save(mdp, path)
    back = ea.load(path)
    for name in ("transitions", "rewards", "phi", "f", "q"):
        np.testing.assert_array_equal(getattr(mdp, name), getattr(back, name))
    assert back.n_agents == 3 and back.reward_noise == mdp.reward_noise
    assert path.read_text().startswith("NATURAL-MARL-MDP 1")
    with pytest.raises(ValueError):
        ea.loads("garbage\n")
