"""Independent reference implementations used by the tests."""

import math
from dataclasses import replace

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import gammaln

from stgp import kernels as K
from stgp import svgp


def gh_expected_loglik(y, mean, var, n=50):
    """E[log Poisson(y | exp f)], f ~ N(mean, var), by Gauss-Hermite quadrature."""
    x, w = hermgauss(n)
    f = mean + math.sqrt(2.0 * var) * x
    vals = y * f - np.exp(f) - gammaln(y + 1.0)
    return float(np.sum(w * vals) / math.sqrt(math.pi))


def dense_kl(m_q, S_q, m_p, S_p):
    """KL[N(m_q, S_q) || N(m_p, S_p)] from slogdet / solve primitives."""
    d = len(m_q)
    Sp_inv = np.linalg.inv(S_p)
    diff = m_p - m_q
    return 0.5 * (np.trace(Sp_inv @ S_q) + diff @ Sp_inv @ diff - d
                  + np.linalg.slogdet(S_p)[1] - np.linalg.slogdet(S_q)[1])


def random_points(rng, n, spread=30.0, t_max=200.0):
    return np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                            rng.uniform(0, t_max, n)])


def random_state(rng, m, jitter=1e-6, Z=None, variances=None):
    Z = random_points(rng, m) if Z is None else Z
    L = np.tril(rng.normal(scale=0.3, size=(m, m)), -1) + np.diag(rng.uniform(0.3, 1.2, m))
    v = rng.uniform(0.3, 2.0, 4) if variances is None else np.asarray(variances, dtype=float)
    return svgp.VariationalState(
        Z=Z, m_u=rng.normal(scale=0.7, size=m), L_S=L, log_variances=np.log(v),
        mean_const=float(rng.normal(scale=0.5)), kernel_template=K.spatiotemporal_kernel(), jitter=jitter,
    )


def state_fd(state, training, h=1e-5):
    """Central differences of svgp.elbo w.r.t. every free coordinate of the state."""
    def f(**kw):
        return svgp.elbo(replace(state, **kw), training)

    out = {}
    g = np.zeros_like(state.m_u)
    for i in range(len(g)):
        e = np.zeros_like(g)
        e[i] = h
        g[i] = (f(m_u=state.m_u + e) - f(m_u=state.m_u - e)) / (2 * h)
    out["m_u"] = g
    L = state.L_S
    gL = np.zeros_like(L)
    for i, j in zip(*np.tril_indices(len(L))):
        E = np.zeros_like(L)
        E[i, j] = h
        gL[i, j] = (f(L_S=L + E) - f(L_S=L - E)) / (2 * h)
    out["L_S"] = gL
    lv = state.log_variances
    gv = np.zeros_like(lv)
    for i in range(len(lv)):
        e = np.zeros_like(lv)
        e[i] = h
        gv[i] = (f(log_variances=lv + e) - f(log_variances=lv - e)) / (2 * h)
    out["log_variances"] = gv
    out["mean_const"] = (f(mean_const=state.mean_const + h) - f(mean_const=state.mean_const - h)) / (2 * h)
    return out


def log_marginal_3d(y, mu, Kff, nodes=60):
    """log p(y) for 3 Poisson bins under f ~ N(mu, Kff), by tensor Gauss-Hermite quadrature."""
    x, w = hermgauss(nodes)
    L = np.linalg.cholesky(Kff)
    g = np.sqrt(2.0) * np.stack(np.meshgrid(x, x, x, indexing="ij"), -1).reshape(-1, 3)
    W = np.prod(np.stack(np.meshgrid(w, w, w, indexing="ij"), -1).reshape(-1, 3), axis=1) / math.pi ** 1.5
    F = mu + g @ L.T
    ll = F @ y - np.exp(F).sum(axis=1) - gammaln(y + 1.0).sum()
    top = ll.max()
    return float(top + np.log(np.sum(W * np.exp(ll - top))))
