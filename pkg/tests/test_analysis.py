import numpy as np
import pytest

from natural_marl import analysis as an
from natural_marl import env_abstract as ea
from natural_marl.policy import exact_fisher


def test_kl_zero_step(rng):
    q, th, d = an.random_boltzmann(rng)
    assert an.kl_boltzmann(q, th, np.zeros(4), d) == pytest.approx(0.0, abs=1e-15)


def test_kl_orthogonal_step(rng):
    q = np.zeros((3, 3, 3))
    q[:, :, :2] = rng.random((3, 3, 2))
    q[:, :, 2] = 0.4  # identical across actions, so every action difference is orthogonal to e3
    d = np.full(3, 1 / 3)
    assert an.kl_boltzmann(q, rng.normal(size=3), np.array([0, 0, 2.5]), d) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_kl_matches_definition(seed):
    rng = np.random.default_rng(seed)
    q, th, d = an.random_boltzmann(rng)
    dt = rng.normal(size=4) * rng.uniform(0.01, 3)
    kl = an.kl_boltzmann(q, th, dt, d)
    assert kl >= 0
    assert abs(kl - an.kl_definitional(q, th, dt, d)) < 1e-10


def test_kl_rejects_non_enumerable(rng):
    with pytest.raises(ValueError):
        an.kl_boltzmann(rng.random((3, 4)), np.zeros(4), np.zeros(4), np.ones(1))


def test_kl_gradient_zero_step(rng):
    q, th, d = an.random_boltzmann(rng)
    n = 100000
    est = an.kl_gradient_estimate(q, th, np.zeros(4), d, n, rng)
    bound = np.sqrt(4)  # q in [0, 1]^4, so every ||psi|| <= sqrt(m)
    assert np.linalg.norm(est) <= 2 / np.sqrt(n) * bound
    np.testing.assert_allclose(an.kl_gradient_exact(q, th, np.zeros(4), d), 0.0, atol=1e-15)


def test_kl_gradient_sign_symmetry(rng):
    u = rng.normal(size=3)
    q = np.stack([u, -u])[None]
    d = np.ones(1)
    th = np.zeros(3)
    for _ in range(5):
        dt = rng.normal(size=3)
        np.testing.assert_allclose(an.kl_gradient_exact(q, th, -dt, d), -an.kl_gradient_exact(q, th, dt, d),
                                   atol=1e-14)
        plus = an.kl_gradient_estimate(q, th, dt, d, 200000, rng)
        minus = an.kl_gradient_estimate(q, th, -dt, d, 200000, rng)
        assert np.linalg.norm(plus + minus) < 0.02 * np.linalg.norm(u) + 1e-12


def test_kl_gradient_exact_matches_fd(rng):
    q, th, d = an.random_boltzmann(rng)
    dt = rng.normal(size=4)
    fd = an.finite_difference_gradient(lambda x: an.kl_boltzmann(q, th, x, d), dt)
    np.testing.assert_allclose(an.kl_gradient_exact(q, th, dt, d), fd, rtol=1e-6, atol=1e-9)


def test_kl_quadratic_examples(rng):
    assert an.kl_quadratic(np.zeros(3), rng.random((3, 3))) == 0
    dt = rng.normal(size=3)
    assert an.kl_quadratic(dt, np.eye(3)) == pytest.approx(0.5 * dt @ dt)


def test_sigma_min_examples():
    sig, ok = an.sigma_min_check(np.eye(4) / 4, 4)
    assert sig == pytest.approx(0.25) and ok
    sig, ok = an.sigma_min_check(np.diag([1.0, 0.0]), 2)
    assert sig == pytest.approx(0.0, abs=1e-15) and ok
    with pytest.raises(ValueError):
        an.sigma_min_check(np.eye(2), 2, psi=np.array([[2.0, 0.0]]))


def test_step_condition_arithmetic():
    assert an.step_condition(1.0, 5, 9.6)
    assert not an.step_condition(1.0, 5, 9.61)
    assert an.step_condition(0.5, 5, 19.2)


def test_finite_difference_gradient():
    a = np.array([1.5, -2.0, 0.25])
    lin = an.finite_difference_gradient(lambda x: a @ x + 3.0, np.array([0.3, 0.1, -2.0]), h=0.5)
    np.testing.assert_allclose(lin, a, atol=1e-12)
    quad = an.finite_difference_gradient(lambda x: 0.5 * x @ x, np.array([1.0, 0.0]), h=1e-3)
    np.testing.assert_allclose(quad, [1.0, 0.0], atol=1e-9)

    def cubic(x):
        return np.sin(x[0]) * x[0] ** 2 + x[0] ** 3

    x0 = np.array([0.7])
    exact = np.cos(0.7) * 0.49 + 2 * 0.7 * np.sin(0.7) + 3 * 0.49
    e1 = abs(an.finite_difference_gradient(cubic, x0, 1e-2)[0] - exact)
    e2 = abs(an.finite_difference_gradient(cubic, x0, 5e-3)[0] - exact)
    assert e2 / e1 == pytest.approx(0.25, abs=0.01)


def test_natural_gradient_two_routes():
    rng = np.random.default_rng(4)
    mdp = ea.generate(2, 4, rng, m=3)
    rep = ea.oracle(mdp, rng.normal(size=(2, 3)))
    for i in range(2):
        assert an.natural_gradient_check(rep.fisher[i], rep.grad_J[i]) < 1e-10


def test_oracle_fisher_matches_policy_module():
    rng = np.random.default_rng(6)
    mdp = ea.generate(2, 3, rng, m=3)
    th = rng.normal(size=(2, 3))
    rep = ea.oracle(mdp, th)
    np.testing.assert_allclose(rep.fisher[1], exact_fisher(mdp.q[1], th[1], rep.d_theta), atol=1e-14)


def test_proportionality_fit():
    rng = np.random.default_rng(8)
    for _ in range(3):
        mdp = ea.generate(1, 4, rng, m=4)
        rep = an.proportionality_check(mdp, rng.normal(size=(1, 4)), 1e-2)
        assert rep.kl_residual < 0.05
        assert rep.score_residual < 0.10
        assert rep.rho < 0  # grad KL points against grad J for a step along +G^-1 grad J


def test_deterministic_identity_preconditioner():
    rng = np.random.default_rng(2)
    mdp = ea.generate(1, 3, rng, m=1)
    tr = an.deterministic_compare(mdp, rng.normal(size=(1, 1)), 15, preconditioner="identity")
    np.testing.assert_array_equal(tr.theta_m, tr.theta_n)
    np.testing.assert_array_equal(tr.j_m, tr.j_n)


def test_deterministic_trace_shapes():
    rng = np.random.default_rng(5)
    mdp = ea.generate(2, 3, rng, m=3)
    tr = an.deterministic_compare(mdp, 6 * rng.normal(size=(2, 3)), 10)
    assert tr.theta_m.shape == (11, 2, 3) and tr.flags.shape == (10, 3)
    assert tr.m == 6 and tr.H > 0
    assert tr.j_m[0] == tr.j_n[0]
    if tr.t0 is not None:
        assert tr.flags[tr.t0, 0] and tr.flags[tr.t0:, 1:].all()


def test_fisher_recursion_small():
    rng = np.random.default_rng(1)
    mdp = ea.generate(2, 3, rng, m=2)
    rep = an.check_fisher_recursion(mdp, rng.normal(size=(2, 2)), 20000, np.random.default_rng(2),
                                    np.random.default_rng(3), schedule="sample_average")
    assert rep.rel_error < 0.05 and rep.max_lockstep < 1e-6 and rep.skipped == 0


def test_bias_diagnostic_shape():
    rng = np.random.default_rng(3)
    mdp = ea.generate(2, 3, rng, m=2, L=2, M=3)
    out = an.bias_diagnostic(mdp, np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(2))
    assert out.shape == (2, 2) and np.all(np.isfinite(out))
