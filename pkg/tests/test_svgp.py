import math
from dataclasses import replace

import numpy as np
import pytest

from stgp import kernels as K
from stgp import svgp
from stgp.data import BinnedCounts, SpatioTemporalGrid
from stgp.errors import CholeskyFailure, TooFewPoints
from stgp.optimize import OptimizerConfig

from conftest import SMALL_BOX
from oracles import dense_kl, gh_expected_loglik, random_points, random_state, state_fd


# ---------------------------------------------------------------- expected log-likelihood


def test_expected_loglik_examples():
    assert svgp.expected_poisson_loglik(0, 0.0, 0.0) == pytest.approx(-1.0, abs=1e-15)
    assert svgp.expected_poisson_loglik(1, 0.0, 0.0) == pytest.approx(-1.0, abs=1e-15)
    v = svgp.expected_poisson_loglik(3, 1.0, 2.0)
    assert v == pytest.approx(3 - math.e ** 2 - math.log(6), rel=1e-14)
    assert v == pytest.approx(-6.1808156, abs=1e-7)
    assert v == pytest.approx(gh_expected_loglik(3, 1.0, 2.0), rel=1e-8)


def test_expected_loglik_grad(rng):
    for _ in range(20):
        y, m, v = rng.integers(0, 8), rng.normal(), rng.uniform(0, 2)
        dm, dv = svgp.expected_poisson_loglik_grad(y, m, v)
        h = 1e-6
        f = svgp.expected_poisson_loglik
        assert dm == pytest.approx((f(y, m + h, v) - f(y, m - h, v)) / (2 * h), rel=1e-7, abs=1e-9)
        assert dv == pytest.approx((f(y, m, v + h) - f(y, m, v - h)) / (2 * h), rel=1e-7, abs=1e-9)


# ---------------------------------------------------------------- init


def _counts(rng, lam=0.6, n_t=30, t0=0.0):
    g = SpatioTemporalGrid(SMALL_BOX, t0, t0 + 4.0 * n_t)
    return BinnedCounts(g, rng.poisson(lam, g.shape))


def test_init_deterministic(rng):
    c = _counts(rng)
    cfg = svgp.ModelConfig(num_inducing=40, seed=7)
    a, b = svgp.init_state(cfg, c), svgp.init_state(cfg, c)
    assert np.array_equal(a.Z, b.Z)
    assert not np.array_equal(a.Z, svgp.init_state(replace(cfg, seed=8), c).Z)
    assert np.array_equal(a.m_u, np.zeros(40)) and np.array_equal(a.L_S, np.eye(40))
    a.check()


def test_init_exhaustive_sample(rng):
    c = _counts(rng, n_t=5)  # 20 h: no two bins share a time-of-day
    cfg = svgp.ModelConfig(num_inducing=c.n_bins, seed=1)
    Z = svgp.init_state(cfg, c).Z
    centers = c.bin_centers
    assert sorted(map(tuple, Z)) == sorted(map(tuple, centers))


def test_init_mean_const(rng):
    g = SpatioTemporalGrid(SMALL_BOX, 0.0, 20.0)
    c = BinnedCounts(g, np.full(g.shape, 2))
    assert svgp.init_state(svgp.ModelConfig(num_inducing=10), c).mean_const == pytest.approx(math.log(2.0), abs=1e-15)
    zero = BinnedCounts(g, np.zeros(g.shape, dtype=int))
    assert svgp.init_state(svgp.ModelConfig(num_inducing=10), zero).mean_const == pytest.approx(math.log(1e-3))


def test_init_too_few(rng):
    c = _counts(rng, n_t=2)
    with pytest.raises(TooFewPoints):
        svgp.init_state(svgp.ModelConfig(num_inducing=73), c)


def test_kernel_distinct_groups_periodic_copies():
    X = np.array([[0, 0, 2.0], [0, 0, 26.0], [1, 0, 2.0], [0, 0, 50.0], [0, 0, 6.0]])
    reps, inv = svgp.kernel_distinct(X, K.spatiotemporal_kernel())
    assert list(reps) == [0, 2, 4]
    assert list(inv) == [0, 0, 1, 0, 2]


# ---------------------------------------------------------------- marginals


def test_marginals_at_inducing_points_under_prior(rng):
    st = random_state(rng, 6, jitter=0.0)
    Kzz = K.eval_matrix(st.kernel, st.Z)
    st = replace(st, m_u=np.full(6, st.mean_const), L_S=np.linalg.cholesky(Kzz))
    q = svgp.qf_marginals(st, st.Z)
    np.testing.assert_allclose(q.means, st.mean_const, rtol=1e-12)
    # q(u) = p(u): the marginal variances are the prior ones
    np.testing.assert_allclose(q.vars, np.diag(Kzz), rtol=1e-9)
    # and the Nystrom correction vanishes at Z
    A = np.linalg.solve(Kzz, Kzz).T
    np.testing.assert_allclose(np.diag(Kzz) - np.einsum("ij,ij->i", A, Kzz), 0.0, atol=1e-9)


def test_marginals_dense_equivalence(rng):
    for n in (3, 10, 30):
        Z = random_points(rng, n, spread=60.0)
        st = random_state(rng, n, jitter=0.0, Z=Z)
        q = svgp.qf_marginals(st, Z)
        np.testing.assert_allclose(q.means, st.m_u, rtol=0, atol=1e-8)
        np.testing.assert_allclose(q.vars, np.diag(st.S), rtol=0, atol=1e-8)


def test_marginals_scalar_hand_calculation():
    Z = np.array([[0.0, 0.0, 0.0]])
    X = np.array([[3.0, 4.0, 12.0]])
    v = (0.5, 1.5, 0.8, 2.0)
    st = svgp.VariationalState(Z, np.array([1.2]), np.array([[0.6]]), np.log(v), 0.4,
                               K.spatiotemporal_kernel(), 0.0)
    kt, ks = math.exp(-1 / 128), math.exp(-0.25)
    kzz = v[0] + v[1] + v[2] * v[3]
    kxz = v[0] * kt + v[1] * ks + v[2] * v[3] * kt * ks
    a = kxz / kzz
    q = svgp.qf_marginals(st, X)
    assert q.means[0] == pytest.approx(0.4 + a * (1.2 - 0.4), rel=1e-13)
    assert q.vars[0] == pytest.approx(kzz - a * kxz + a * a * 0.36, rel=1e-12)


# ---------------------------------------------------------------- KL


def test_kl_zero_when_equal(rng):
    st = random_state(rng, 5)
    Kzz = K.eval_matrix(st.kernel, st.Z)
    Kj = K.add_jitter(Kzz, st.jitter * np.mean(np.diag(Kzz)))
    st = replace(st, m_u=np.full(5, st.mean_const), L_S=np.linalg.cholesky(Kj))
    assert abs(svgp.kl_q_p(st)) < 1e-9


def test_kl_scalar():
    # total prior variance 1 at the single inducing point
    st = svgp.VariationalState(np.zeros((1, 3)), np.array([1.0]), np.eye(1), np.log([0.25, 0.25, 0.5, 1.0]),
                               0.0, K.spatiotemporal_kernel(), 0.0)
    assert svgp.kl_q_p(st) == pytest.approx(0.5, abs=1e-14)


def test_kl_dense_oracle(rng):
    for _ in range(10):
        st = random_state(rng, 5)
        Kzz = K.eval_matrix(st.kernel, st.Z)
        Kj = K.add_jitter(Kzz, st.jitter * np.mean(np.diag(Kzz)))
        ref = dense_kl(st.m_u, st.S, np.full(5, st.mean_const), Kj)
        kl = svgp.kl_q_p(st)
        assert kl == pytest.approx(ref, rel=1e-9, abs=1e-10)
        assert kl >= -1e-9


# ---------------------------------------------------------------- bound


def test_elbo_single_bin_single_inducing():
    Z = np.zeros((1, 3))
    v = (0.25, 0.25, 0.5, 1.0)  # prior variance 1
    st = svgp.VariationalState(Z, np.array([0.3]), np.array([[0.5]]), np.log(v), 0.1,
                               K.spatiotemporal_kernel(), 0.0)
    X, y = Z.copy(), np.array([2.0])
    expected = gh_expected_loglik(2, 0.3, 0.25) - (0.5 * (0.25 + 0.2 ** 2 - 1 - math.log(0.25)))
    assert svgp.elbo(st, (X, y)) == pytest.approx(expected, rel=1e-10)


def test_elbo_zero_count_limit(rng):
    st = random_state(rng, 4)
    X = random_points(rng, 10)
    y = np.zeros(10)
    st = replace(st, mean_const=-60.0, m_u=np.full(4, -60.0))
    assert svgp.elbo(st, (X, y)) == pytest.approx(-svgp.kl_q_p(st), abs=1e-12)


def test_elbo_grad_at_stationary_point(rng):
    st = random_state(rng, 4)
    Kzz = K.eval_matrix(st.kernel, st.Z)
    Kj = K.add_jitter(Kzz, st.jitter * np.mean(np.diag(Kzz)))
    st = replace(st, m_u=np.full(4, st.mean_const), L_S=np.linalg.cholesky(Kj))
    g = svgp.elbo_grad(st, (np.zeros((0, 3)), np.zeros(0)))
    norm = max(np.max(np.abs(g.m_u)), np.max(np.abs(np.tril(g.L_S))), np.max(np.abs(g.log_variances)),
               abs(g.mean_const))
    assert norm < 1e-8


def _rel_close(a, b, rel):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.all(np.abs(a - b) <= rel * np.maximum(np.abs(a), np.abs(b)) + 1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_elbo_grad_finite_differences(seed):
    rng = np.random.default_rng(seed)
    st = random_state(rng, 4)
    X = random_points(rng, 10)
    y = rng.poisson(1.5, 10).astype(float)
    g = svgp.elbo_grad(st, (X, y))
    fd = state_fd(st, (X, y))
    assert _rel_close(g.m_u, fd["m_u"], 1e-5)
    il = np.tril_indices(4)
    assert _rel_close(g.L_S[il], fd["L_S"][il], 1e-5)
    assert _rel_close(g.log_variances, fd["log_variances"], 1e-5)
    assert _rel_close(g.mean_const, fd["mean_const"], 1e-5)


def test_variance_gradient_against_grad_variances(rng):
    # d elbo / d log theta_i computed by hand from grad_variances and the marginal formulas
    st = random_state(rng, 3, jitter=0.0)
    X = random_points(rng, 6)
    y = rng.poisson(1.0, 6).astype(float)
    g = svgp.elbo_grad(st, (X, y))
    theta = np.exp(st.log_variances)
    h = 1e-6

    def bound(th):
        k = K.with_variances(st.kernel_template, th)
        Kzz, Kxz, kd = K.eval_matrix(k, st.Z), K.eval_matrix(k, X, st.Z), K.eval_diag(k, X)
        A = np.linalg.solve(Kzz, Kxz.T).T
        mean = st.mean_const + A @ (st.m_u - st.mean_const)
        var = kd - np.sum(A * Kxz, 1) + np.sum((A @ st.L_S) ** 2, 1)
        data = np.sum(svgp.expected_poisson_loglik(y, mean, var))
        return data - dense_kl(st.m_u, st.S, np.full(3, st.mean_const), Kzz)

    dK = K.grad_variances(st.kernel, X, st.Z)
    assert len(dK) == 4
    for i in range(4):
        up, dn = theta.copy(), theta.copy()
        up[i] *= math.exp(h)
        dn[i] *= math.exp(-h)
        assert g.log_variances[i] == pytest.approx((bound(up) - bound(dn)) / (2 * h), rel=1e-5)


def test_whitened_objective_gradient(rng):
    st = random_state(rng, 4)
    X = random_points(rng, 12)
    y = rng.poisson(1.0, 12).astype(float)
    ts = svgp.TrainingSet.from_points(X, y)
    cache = svgp._Kernels(st.kernel_template, X, st.Z)
    for whiten in (True, False):
        f = svgp._objective(cache, ts, 4, 4, 1e-6, whiten)
        x0 = svgp._pack(rng.normal(scale=0.3, size=4), st.L_S, st.log_variances, st.mean_const)
        _, g = f(x0)
        fd = np.array([(f(x0 + e)[0] - f(x0 - e)[0]) / 2e-5 for e in np.eye(len(x0)) * 1e-5])
        assert _rel_close(g, fd, 1e-5)


def test_collapsed_bound_equals_full(rng):
    c = _counts(rng, n_t=60)
    st = svgp.init_state(svgp.ModelConfig(num_inducing=30, seed=3), c)
    Kzz = K.eval_matrix(st.kernel, st.Z)
    Lk = np.linalg.cholesky(K.add_jitter(Kzz, 1e-6 * np.mean(np.diag(Kzz))))
    st = replace(st, m_u=st.mean_const + Lk @ rng.normal(scale=0.3, size=30), L_S=0.5 * Lk)
    full = svgp.TrainingSet.from_counts(c)
    coll = svgp.TrainingSet.from_counts(c, st.kernel_template, collapse=True)
    assert len(coll.y) == 216 and len(full.y) == c.n_bins
    assert svgp.elbo(st, coll) == pytest.approx(svgp.elbo(st, full), rel=1e-12)


# ---------------------------------------------------------------- training


def test_train_recovers_constant_rate(rng):
    g = SpatioTemporalGrid(SMALL_BOX, 0.0, 4.0 * 84)
    c = BinnedCounts(g, rng.poisson(2.0, g.shape))
    res = svgp.train(svgp.ModelConfig(num_inducing=40, seed=0), c, OptimizerConfig(max_iters=200))
    rate = svgp.predict_rate(res.state, c.bin_centers, g.bin_volume).rate * g.bin_volume
    assert abs(rate.mean() - 2.0) < 0.2
    assert np.all(np.abs(rate - 2.0) < 0.2)


def test_train_deterministic_and_improves(rng):
    c = _counts(rng, n_t=60)
    cfg = svgp.ModelConfig(num_inducing=30, seed=5)
    opt = OptimizerConfig(max_iters=60)
    a = svgp.train(cfg, c, opt)
    b = svgp.train(cfg, c, opt)
    for f in ("Z", "m_u", "L_S", "log_variances"):
        assert np.array_equal(getattr(a.state, f), getattr(b.state, f))
    assert a.elbo == b.elbo
    init = svgp.elbo(svgp.init_state(cfg, c), c)
    assert a.elbo >= init
    assert a.elbo == pytest.approx(svgp.elbo(a.state, c), rel=1e-9)
    assert all(y <= x for x, y in zip(a.opt.trace, a.opt.trace[1:]))
    a.state.check()


def test_direct_parameterisation_trains(rng):
    c = _counts(rng, n_t=30)
    cfg = svgp.ModelConfig(num_inducing=20, seed=2, whiten=False, collapse=False)
    res = svgp.train(cfg, c, OptimizerConfig(max_iters=40))
    assert res.elbo > svgp.elbo(svgp.init_state(cfg, c), c)


def test_jitter_escalation(rng, monkeypatch):
    c = _counts(rng, n_t=30)
    orig = svgp._objective
    seen = []

    def flaky(cache, ts, m, n_var, rel_jitter, whiten):
        seen.append(rel_jitter)
        if rel_jitter < 5e-5:
            return lambda x: (math.inf, np.zeros_like(x))
        return orig(cache, ts, m, n_var, rel_jitter, whiten)

    monkeypatch.setattr(svgp, "_objective", flaky)
    res = svgp.train(svgp.ModelConfig(num_inducing=10), c, OptimizerConfig(max_iters=5))
    assert seen == pytest.approx([1e-6, 1e-5, 1e-4])
    assert res.state.jitter == pytest.approx(1e-4)

    monkeypatch.setattr(svgp, "_objective", lambda *a: (lambda x: (math.inf, np.zeros_like(x))))
    with pytest.raises(CholeskyFailure):
        svgp.train(svgp.ModelConfig(num_inducing=10), c, OptimizerConfig(max_iters=5))


# ---------------------------------------------------------------- prediction


def _state_with(mean, var_zero=True):
    v = (1e-12, 1e-12, 1e-12, 1e-12)
    return svgp.VariationalState(np.zeros((1, 3)), np.array([mean]), np.array([[1e-8]]), np.log(v), mean,
                                 K.spatiotemporal_kernel(), 0.0)


def test_predict_examples():
    p = np.zeros((1, 3))
    r = svgp.predict_rate(_state_with(0.0), p, 1.0)
    assert r.rate[0] == pytest.approx(1.0, rel=1e-9)
    r = svgp.predict_rate(_state_with(math.log(2.0)), p, 2.0)
    assert r.rate[0] == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(ValueError):
        svgp.predict_rate(_state_with(0.0), p, 0.0)


def test_predict_monte_carlo(rng):
    st = random_state(rng, 5)
    X = random_points(rng, 8)
    r = svgp.predict_rate(st, X, 2.5)
    assert np.all(r.rate > 0)
    draws = rng.normal(size=(10**6, 1))
    mc = np.exp(r.latent_mean + np.sqrt(r.latent_var) * draws).mean(axis=0)
    np.testing.assert_allclose(r.rate * 2.5, mc, rtol=1e-2)


def test_predict_dedup_matches_direct(rng):
    st = random_state(rng, 5)
    X = random_points(rng, 6)
    X2 = np.vstack([X, X + [0, 0, 24.0], X + [0, 0, 48.0]])
    r = svgp.predict_rate(st, X2, 1.0)
    q = svgp.qf_marginals(st, X2)
    np.testing.assert_allclose(r.latent_mean, q.means, rtol=1e-11)
    np.testing.assert_allclose(r.latent_var, q.vars, rtol=1e-9, atol=1e-12)


def test_save_load_bit_exact(rng, tmp_path):
    st = random_state(rng, 7)
    svgp.save_state(st, tmp_path / "m.npz", {"nx": 6})
    back, meta = svgp.load_state(tmp_path / "m.npz")
    assert meta == {"nx": 6}
    for f in ("Z", "m_u", "L_S", "log_variances"):
        assert np.array_equal(getattr(st, f), getattr(back, f))
    assert back.mean_const == st.mean_const and back.jitter == st.jitter
    assert back.kernel_template == st.kernel_template
    X = random_points(rng, 5)
    assert np.array_equal(svgp.predict_rate(st, X, 1.0).rate, svgp.predict_rate(back, X, 1.0).rate)


def test_whitened_objective_overflow_is_infeasible(rng):
    # a huge trial step must read as +inf, not raise inside the triangular solves
    X = random_points(rng, 12)
    y = rng.poisson(2.0, 12).astype(float)
    ts = svgp.TrainingSet.from_points(X, y)
    Z = X[:4]
    cache = svgp._Kernels(K.spatiotemporal_kernel(), ts.X, Z)
    f = svgp._objective(cache, ts, 4, 4, 1e-6, True)
    x = svgp._pack(np.full(4, 40.0), np.eye(4) * 30.0, np.log(np.full(4, 50.0)), 5.0)
    val, g = f(x)
    assert val == math.inf and np.all(g == 0)
