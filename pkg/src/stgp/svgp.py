"""Sparse variational log-Gaussian Cox process.

Latent ``f ~ GP(mu, k)`` over bin centres, ``y_i | f_i ~ Poisson(exp(f_i))``
and a Gaussian ``q(u) = N(m_u, L_S L_S^T)`` over inducing values at fixed
inputs ``Z``. The prior on ``u`` is ``N(mu 1, K_zz + jitter I)``.

The expected log-likelihood under ``q(f_i) = N(m, v)`` is closed form for
the exponential link, ``y m - exp(m + v/2) - log y!``, so no quadrature is
needed anywhere in the objective.

Training maximises the bound over ``(q(u), log kernel variances, mu)``. It
runs in whitened coordinates ``u = mu 1 + L_K v`` (``L_K`` the Cholesky
factor of the prior covariance), which keeps the problem well conditioned
when ``K_zz`` is close to singular; the result is stored un-whitened.

When every time-reading kernel leaf is periodic with one period ``T``,
training bins that share a cell and a time-of-day residue have identical
kernel rows. They are merged into one input carrying the summed count and a
multiplicity, which leaves the bound unchanged and makes training cost
independent of the history length.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from . import kernels as kern
from .data import BinnedCounts
from .errors import CholeskyFailure, DataError, OptimizerDiverged, ShapeMismatch, TooFewPoints
from .optimize import OptimizerConfig, OptResult, Status, minimize

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
MIN_MEAN_COUNT = 1e-3
JITTER_ESCALATIONS = 3


@dataclass(frozen=True)
class ModelConfig:
    kernel: object = field(default_factory=kern.spatiotemporal_kernel)
    num_inducing: int = 180
    mean_const: float | None = None  # None: initialise from the data
    jitter: float = 1e-6  # relative to the mean prior variance at Z
    seed: int = 0
    whiten: bool = True
    collapse: bool = True

    def __post_init__(self):
        if self.num_inducing < 1:
            raise ValueError("num_inducing must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


@dataclass(frozen=True, eq=False)
class VariationalState:
    Z: np.ndarray
    m_u: np.ndarray
    L_S: np.ndarray
    log_variances: np.ndarray
    mean_const: float
    kernel_template: object
    jitter: float = 1e-6

    @property
    def kernel(self):
        return kern.with_variances(self.kernel_template, np.exp(self.log_variances))

    @property
    def num_inducing(self) -> int:
        return len(self.Z)

    @property
    def S(self) -> np.ndarray:
        return self.L_S @ self.L_S.T

    def check(self) -> None:
        m = len(self.Z)
        if self.m_u.shape != (m,) or self.L_S.shape != (m, m):
            raise ShapeMismatch("inconsistent variational state shapes")
        if not np.allclose(self.L_S, np.tril(self.L_S), rtol=0, atol=0):
            raise ValueError("L_S must be lower triangular")
        if not np.all(np.diag(self.L_S) > 0):
            raise ValueError("L_S must have a positive diagonal")
        for a in (self.Z, self.m_u, self.L_S, self.log_variances):
            if not np.all(np.isfinite(a)):
                raise ValueError("variational state has non-finite entries")


@dataclass(frozen=True)
class QfMarginals:
    means: np.ndarray
    vars: np.ndarray
    n_clamped: int = 0


@dataclass(frozen=True)
class RateField:
    points: np.ndarray
    rate: np.ndarray
    latent_mean: np.ndarray
    latent_var: np.ndarray


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Inputs, summed counts and multiplicities for the data term."""

    X: np.ndarray
    y: np.ndarray
    weight: np.ndarray
    log_factorial: float
    n_bins: int

    @classmethod
    def from_points(cls, X, y) -> TrainingSet:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        return cls(X, y, np.ones(len(y)), float(np.sum(gammaln(y + 1.0))), len(y))

    @classmethod
    def from_counts(cls, counts: BinnedCounts, kernel=None, collapse: bool = False) -> TrainingSet:
        ts = cls.from_points(counts.bin_centers, counts.flat().astype(float))
        return ts.collapsed(kernel) if collapse and kernel is not None else ts

    def collapsed(self, kernel) -> TrainingSet:
        reps, inverse = kernel_distinct(self.X, kernel)
        y = np.bincount(inverse, weights=self.y, minlength=len(reps))
        w = np.bincount(inverse, weights=self.weight, minlength=len(reps))
        return TrainingSet(self.X[reps], y, w, self.log_factorial, self.n_bins)


def kernel_distinct(X, kernel):
    """Indices of representative rows and the inverse map.

    Two inputs are merged when they have the same space coordinates and the
    same time residue modulo the kernel's common period. Without a common
    period only exact duplicates merge.
    """
    X = np.asarray(X, dtype=float)
    T = kern.time_period(kernel)
    keys = X.copy()
    if T is not None:
        keys[:, 2] = np.round(np.mod(keys[:, 2], T), 9) % T
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return first[order], remap[inverse.reshape(-1)]


def _as_training(training, kernel=None, collapse=False) -> TrainingSet:
    if isinstance(training, TrainingSet):
        return training
    if isinstance(training, BinnedCounts):
        return TrainingSet.from_counts(training, kernel, collapse)
    X, y = training
    return TrainingSet.from_points(X, y)


# --------------------------------------------------------------------------
# small linear-algebra helpers


def _chol(K):
    try:
        return linalg.cholesky(K, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise CholeskyFailure(str(exc)) from exc


def _softplus(r):
    return np.logaddexp(0.0, r)


def _softplus_inv(v):
    v = np.asarray(v, dtype=float)
    return np.where(v > 30.0, v + np.log(-np.expm1(-np.minimum(v, 700.0))), np.log(np.expm1(np.minimum(v, 30.0))))


def _sigmoid(r):
    return 0.5 * (1.0 + np.tanh(0.5 * r))


class _Kernels:
    """Leaf bases for fixed ``(X, Z)``; recombined per variance setting."""

    def __init__(self, template, X, Z):
        self.template = template
        self.bxz = kern.leaf_bases(template, X, Z)
        self.bzz = kern.leaf_bases(template, Z, Z)
        self.bdiag = kern.leaf_base_diag(template, X)

    def __call__(self, theta, rel_jitter, grads=False):
        k = self.template
        Kxz, dKxz = kern.combine(k, self.bxz, True, theta) if grads else (kern.combine(k, self.bxz, False, theta), None)
        Kzz, dKzz = kern.combine(k, self.bzz, True, theta) if grads else (kern.combine(k, self.bzz, False, theta), None)
        kd, dkd = kern.combine(k, self.bdiag, True, theta) if grads else (kern.combine(k, self.bdiag, False, theta), None)
        jit = rel_jitter * float(np.mean(np.diag(Kzz)))
        Kzz = kern.add_jitter(Kzz, jit)
        if grads:
            # d Kzz also carries the derivative of the mean-diagonal jitter
            dKzz = [kern.add_jitter(d, rel_jitter * float(np.mean(np.diag(d)))) for d in dKzz]
        return Kxz, Kzz, kd, dKxz, dKzz, dkd


# --------------------------------------------------------------------------
# likelihood pieces


def expected_poisson_loglik(y, mean, var):
    """E_{f ~ N(mean, var)}[log Poisson(y | exp f)], elementwise."""
    y = np.asarray(y, dtype=float)
    return y * mean - np.exp(mean + 0.5 * np.asarray(var)) - gammaln(y + 1.0)


def expected_poisson_loglik_grad(y, mean, var):
    """(d/d mean, d/d var) of :func:`expected_poisson_loglik`."""
    e = np.exp(mean + 0.5 * np.asarray(var))
    return np.asarray(y, dtype=float) - e, -0.5 * e


def _data_term(ts: TrainingSet, mean, var):
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(mean + 0.5 * var)
        val = float(ts.y @ mean - ts.weight @ e) - ts.log_factorial
    return val, ts.y - ts.weight * e, -0.5 * ts.weight * e


def _marginals_from(A, Kxz, kd, mean_const, m_u, L_S):
    mean = mean_const + A @ (m_u - mean_const)
    AL = A @ L_S
    var = kd - np.einsum("ij,ij->i", A, Kxz) + np.einsum("ij,ij->i", AL, AL)
    return mean, var


def _clamp(var):
    bad = var <= 0
    n = int(np.count_nonzero(bad))
    if n:
        var = np.where(bad, 0.0, var)
    return var, n


def qf_marginals(state: VariationalState, X) -> QfMarginals:
    """Marginals of ``q(f)`` at ``X``; variances clamped at zero."""
    X = np.asarray(X, dtype=float)
    k = state.kernel
    Kzz_raw = kern.eval_matrix(k, state.Z)
    Kzz = kern.add_jitter(Kzz_raw, state.jitter * float(np.mean(np.diag(Kzz_raw))))
    Lk = _chol(Kzz)
    Kxz = kern.eval_matrix(k, X, state.Z)
    A = linalg.cho_solve((Lk, True), Kxz.T).T
    mean, var = _marginals_from(A, Kxz, kern.eval_diag(k, X), state.mean_const, state.m_u, state.L_S)
    var, n = _clamp(var)
    if n:
        log.debug("qf_marginals: clamped %d non-positive variances", n)
    return QfMarginals(mean, var, n)


def _kl_terms(Lk, m_u, L_S, mean_const):
    m = len(m_u)
    d = m_u - mean_const
    beta = linalg.cho_solve((Lk, True), d)
    V = linalg.solve_triangular(Lk, L_S, lower=True)
    tr = float(np.sum(V * V))
    maha = float(d @ beta)
    logdet_k = 2.0 * float(np.sum(np.log(np.diag(Lk))))
    with np.errstate(divide="ignore"):
        logdet_s = 2.0 * float(np.sum(np.log(np.diag(L_S))))
    return 0.5 * (tr + maha - m + logdet_k - logdet_s), beta


def kl_q_p(state: VariationalState) -> float:
    """KL[q(u) || p(u)] with ``p(u) = N(mu 1, K_zz + jitter I)``."""
    Kzz_raw = kern.eval_matrix(state.kernel, state.Z)
    Kzz = kern.add_jitter(Kzz_raw, state.jitter * float(np.mean(np.diag(Kzz_raw))))
    return _kl_terms(_chol(Kzz), state.m_u, state.L_S, state.mean_const)[0]


# --------------------------------------------------------------------------
# bound and gradients, direct parameterisation


@dataclass(frozen=True)
class ElboGrad:
    value: float
    m_u: np.ndarray
    L_S: np.ndarray
    log_variances: np.ndarray
    mean_const: float


def _direct(cache: _Kernels, ts: TrainingSet, m_u, L_S, log_var, mu, rel_jitter, grads=True):
    theta = np.exp(log_var)
    Kxz, Kzz, kd, dKxz, dKzz, dkd = cache(theta, rel_jitter, grads)
    Lk = _chol(Kzz)
    A = linalg.cho_solve((Lk, True), Kxz.T).T
    mean, var = _marginals_from(A, Kxz, kd, mu, m_u, L_S)
    var, _ = _clamp(var)
    F, g_mean, g_var = _data_term(ts, mean, var)
    kl, beta = _kl_terms(Lk, m_u, L_S, mu)
    value = F - kl
    if not grads:
        return value, None
    m = len(m_u)
    Kinv = linalg.cho_solve((Lk, True), np.eye(m))
    S = L_S @ L_S.T
    P = Kinv @ S
    GvA = g_var[:, None] * A
    AtGvA = A.T @ GvA

    d_mu_ = A.T @ g_mean - beta
    d_mean = float(g_mean @ (1.0 - A.sum(axis=1)) + beta.sum())
    d_L = 2.0 * AtGvA @ L_S - (Kinv @ L_S - np.diag(1.0 / np.diag(L_S)))
    d_L = np.tril(d_L)

    G_xz = np.outer(g_mean, beta) - 2.0 * GvA + 2.0 * GvA @ P.T
    G_zz = -np.outer(A.T @ g_mean, beta) + AtGvA - 2.0 * AtGvA @ P.T
    G_zz = 0.5 * (G_zz + G_zz.T) + 0.5 * (P @ Kinv + np.outer(beta, beta) - Kinv)
    d_theta = np.array([
        np.sum(G_xz * a) + np.sum(G_zz * b) + g_var @ c for a, b, c in zip(dKxz, dKzz, dkd)
    ])
    return value, ElboGrad(value, d_mu_, d_L, d_theta * theta, d_mean)


def elbo(state: VariationalState, training) -> float:
    """Evidence lower bound on ``log p(y)``."""
    ts = _as_training(training)
    cache = _Kernels(state.kernel_template, ts.X, state.Z)
    return _direct(cache, ts, state.m_u, state.L_S, state.log_variances, state.mean_const,
                   state.jitter, grads=False)[0]


def elbo_grad(state: VariationalState, training) -> ElboGrad:
    """Analytic gradient of :func:`elbo` w.r.t. ``m_u``, ``L_S`` (lower
    triangle), log kernel variances and ``mean_const``. ``Z`` is fixed."""
    ts = _as_training(training)
    cache = _Kernels(state.kernel_template, ts.X, state.Z)
    return _direct(cache, ts, state.m_u, state.L_S, state.log_variances, state.mean_const, state.jitter)[1]


# --------------------------------------------------------------------------
# whitened parameterisation used for training


def _whitened(cache: _Kernels, ts: TrainingSet, m_v, L_v, log_var, mu, rel_jitter, grads=True):
    theta = np.exp(log_var)
    Kxz, Kzz, kd, dKxz, dKzz, dkd = cache(theta, rel_jitter, grads)
    Lk = _chol(Kzz)
    W = linalg.solve_triangular(Lk, Kxz.T, lower=True).T
    mean = mu + W @ m_v
    WL = W @ L_v
    var = kd - np.einsum("ij,ij->i", W, W) + np.einsum("ij,ij->i", WL, WL)
    var, _ = _clamp(var)
    F, g_mean, g_var = _data_term(ts, mean, var)
    diag = np.diag(L_v)
    with np.errstate(divide="ignore"):
        kl = 0.5 * (float(np.sum(L_v * L_v)) + float(m_v @ m_v) - len(m_v) - 2.0 * float(np.sum(np.log(diag))))
    value = F - kl
    if not grads:
        return value, None
    GvW = g_var[:, None] * W
    WtGvW = W.T @ GvW
    d_m = W.T @ g_mean - m_v
    d_L = np.tril(2.0 * WtGvW @ L_v - (L_v - np.diag(1.0 / diag)))
    d_mean = float(g_mean.sum())

    G_W = np.outer(g_mean, m_v) - 2.0 * GvW + 2.0 * GvW @ (L_v @ L_v.T)
    if not (math.isfinite(value) and np.all(np.isfinite(G_W))):
        # an overflowing trial point; the optimizer treats it as infeasible
        return -math.inf, None
    # W = Kxz Lk^-T: adjoint through Kxz directly and through the Cholesky factor
    H = linalg.solve_triangular(Lk, G_W.T, lower=True, trans="T").T
    M = linalg.solve_triangular(Lk, G_W.T @ W, lower=True, trans="T")
    Y = Lk.T @ M
    Phi = np.tril(Y)
    Phi[np.diag_indices_from(Phi)] *= 0.5
    G_zz = -linalg.solve_triangular(Lk, linalg.solve_triangular(Lk, Phi, lower=True, trans="T").T,
                                    lower=True, trans="T").T
    d_theta = np.array([
        np.sum(H * a) + np.sum(G_zz * b) + g_var @ c for a, b, c in zip(dKxz, dKzz, dkd)
    ])
    return value, ElboGrad(value, d_m, d_L, d_theta * theta, d_mean)


# --------------------------------------------------------------------------
# parameter packing


def _pack(m_vec, L, log_var, mu):
    m = len(m_vec)
    il = np.tril_indices(m, -1)
    return np.concatenate([m_vec, L[il], _softplus_inv(np.diag(L)), log_var, [mu]])


def _unpack(x, m, n_var):
    il = np.tril_indices(m, -1)
    i = 0
    m_vec = x[i:i + m]
    i += m
    L = np.zeros((m, m))
    nl = m * (m - 1) // 2
    L[il] = x[i:i + nl]
    i += nl
    raw = x[i:i + m]
    L[np.diag_indices(m)] = _softplus(raw)
    i += m
    log_var = x[i:i + n_var]
    mu = float(x[i + n_var])
    return m_vec, L, raw, log_var, mu


def _pack_grad(g: ElboGrad, raw):
    m = len(g.m_u)
    il = np.tril_indices(m, -1)
    d_raw = np.diag(g.L_S) * _sigmoid(raw)
    return np.concatenate([g.m_u, g.L_S[il], d_raw, g.log_variances, [g.mean_const]])


def _objective(cache, ts, m, n_var, rel_jitter, whiten):
    step = _whitened if whiten else _direct

    def f(x):
        m_vec, L, raw, log_var, mu = _unpack(x, m, n_var)
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                value, g = step(cache, ts, m_vec, L, log_var, mu, rel_jitter)
        except CholeskyFailure:
            return math.inf, np.zeros_like(x)
        if not math.isfinite(value):
            return math.inf, np.zeros_like(x)
        return -value, -_pack_grad(g, raw)

    return f


# --------------------------------------------------------------------------
# initialisation, training, prediction


def init_state(config: ModelConfig, training) -> VariationalState:
    """Random inducing inputs (without replacement) and a neutral ``q(u)``.

    ``Z`` is drawn from the kernel-distinct training bin centres, so no two
    inducing inputs share a kernel row.
    """
    ts = _as_training(training)
    reps, _ = kernel_distinct(ts.X, config.kernel)
    if len(reps) < config.num_inducing:
        raise TooFewPoints(
            f"{len(reps)} distinct training inputs, need at least num_inducing={config.num_inducing}"
        )
    rng = np.random.default_rng(config.seed)
    pick = rng.choice(len(reps), size=config.num_inducing, replace=False)
    Z = ts.X[reps[pick]].copy()
    if config.mean_const is None:
        mean_count = float(np.sum(ts.y) / max(ts.n_bins, 1))
        mu = math.log(max(mean_count, MIN_MEAN_COUNT))
    else:
        mu = float(config.mean_const)
    m = config.num_inducing
    return VariationalState(
        Z=Z,
        m_u=np.zeros(m),
        L_S=np.eye(m),
        log_variances=np.log(kern.variances(config.kernel)),
        mean_const=mu,
        kernel_template=config.kernel,
        jitter=config.jitter,
    )


class TrainResult(NamedTuple):
    state: VariationalState
    elbo: float
    opt: OptResult


def train(config: ModelConfig, training, opt: OptimizerConfig | None = None, callback=None) -> TrainResult:
    """Maximise the bound; returns the fitted state and its final bound."""
    opt = opt or OptimizerConfig()
    full = _as_training(training)
    if full.n_bins == 0:
        raise TooFewPoints("empty training set")
    state0 = init_state(config, full)
    ts = full.collapsed(config.kernel) if config.collapse else full
    cache = _Kernels(config.kernel, ts.X, state0.Z)
    m = state0.num_inducing
    n_var = len(state0.log_variances)

    last_exc = None
    for attempt in range(JITTER_ESCALATIONS + 1):
        base = config.jitter if config.jitter > 0 else 1e-10
        rel_jitter = config.jitter if attempt == 0 else base * 10.0 ** attempt
        try:
            if config.whiten:
                x0 = _pack(np.zeros(m), np.eye(m), state0.log_variances, state0.mean_const)
            else:
                x0 = _pack(state0.m_u, state0.L_S, state0.log_variances, state0.mean_const)
            fun = _objective(cache, ts, m, n_var, rel_jitter, config.whiten)
            if not math.isfinite(fun(x0)[0]):
                raise CholeskyFailure("bound not finite at the initial point")
            res = minimize(fun, x0, opt, callback=callback)
            state = _to_state(res.x_final, state0, rel_jitter, config.whiten)
            break
        except CholeskyFailure as exc:
            last_exc = exc
            log.warning("Cholesky failure at relative jitter %.1e; escalating", rel_jitter)
    else:
        raise CholeskyFailure(f"giving up after {JITTER_ESCALATIONS} jitter escalations") from last_exc
    if res.status == Status.DIVERGED:
        raise OptimizerDiverged(f"objective diverged (f={res.f_final})")
    log.info("train: %s after %d iterations, bound %.6g", res.status.value, res.iterations, -res.f_final)
    return TrainResult(state, -res.f_final, res)


def _to_state(x, state0: VariationalState, rel_jitter, whiten) -> VariationalState:
    m = state0.num_inducing
    m_vec, L, _, log_var, mu = _unpack(np.asarray(x, dtype=float), m, len(state0.log_variances))
    if whiten:
        k = kern.with_variances(state0.kernel_template, np.exp(log_var))
        Kzz_raw = kern.eval_matrix(k, state0.Z)
        Lk = _chol(kern.add_jitter(Kzz_raw, rel_jitter * float(np.mean(np.diag(Kzz_raw)))))
        m_u = mu + Lk @ m_vec
        L_S = Lk @ L
    else:
        m_u, L_S = m_vec, L
    return replace(state0, m_u=m_u, L_S=np.tril(L_S), log_variances=log_var.copy(), mean_const=mu,
                   jitter=rel_jitter)


def predict_rate(state: VariationalState, points, bin_volume: float) -> RateField:
    """Expected intensity ``E[exp f] / bin_volume`` (per km^2 per hour)."""
    if not bin_volume > 0:
        raise ValueError("bin_volume must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        empty = np.zeros(0)
        return RateField(points, empty, empty, empty)
    reps, inverse = kernel_distinct(points, state.kernel_template)
    q = qf_marginals(state, points[reps])
    mean = q.means[inverse]
    var = q.vars[inverse]
    rate = np.exp(mean + 0.5 * var) / bin_volume
    return RateField(points, rate, mean, var)


class GPRate:
    """Rate-field adapter: evaluates a fitted state at arbitrary points."""

    def __init__(self, state: VariationalState, bin_volume: float):
        self.state = state
        self.bin_volume = bin_volume

    def __call__(self, points):
        return predict_rate(self.state, points, self.bin_volume).rate


# --------------------------------------------------------------------------
# persistence


def save_state(state: VariationalState, path, grid_meta: dict | None = None) -> None:
    meta = {
        "version": MODEL_FORMAT_VERSION,
        "kernel": kern.to_dict(state.kernel_template),
        "grid": grid_meta or {},
    }
    np.savez(
        path,
        meta=np.array(json.dumps(meta)),
        Z=state.Z,
        m_u=state.m_u,
        L_S=state.L_S,
        log_variances=state.log_variances,
        mean_const=np.array(state.mean_const),
        jitter=np.array(state.jitter),
    )


def load_state(path):
    """Returns ``(state, grid_meta)``."""
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != MODEL_FORMAT_VERSION:
            raise DataError(f"unsupported model format version {meta.get('version')}")
        state = VariationalState(
            Z=z["Z"].copy(),
            m_u=z["m_u"].copy(),
            L_S=z["L_S"].copy(),
            log_variances=z["log_variances"].copy(),
            mean_const=float(z["mean_const"]),
            kernel_template=kern.from_dict(meta["kernel"]),
            jitter=float(z["jitter"]),
        )
    return state, meta["grid"]
