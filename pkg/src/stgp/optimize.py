"""Limited-memory BFGS with a strong-Wolfe line search.

``minimize`` never raises on numerical trouble; it reports it in
``OptResult.status`` and returns the best accepted point.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    LINE_SEARCH_FAILURE = "LineSearchFailure"
    DIVERGED = "Diverged"


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 500
    grad_tol: float = 1e-5
    f_tol: float = 1e-9
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    memory: int = 20
    max_ls_trials: int = 50

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.max_iters < 1 or self.memory < 1:
            raise ValueError("max_iters and memory must be positive")


@dataclass
class OptResult:
    x_final: np.ndarray
    f_final: float
    grad_norm: float
    iterations: int
    status: Status
    trace: list = field(default_factory=list)
    n_evals: int = 0


DIVERGENCE_BOUND = 1e300


class _Counter:
    def __init__(self, fun):
        self.fun = fun
        self.n = 0

    def __call__(self, x):
        self.n += 1
        f, g = self.fun(x)
        f = float(f)
        g = np.asarray(g, dtype=float)
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            return math.inf, g
        return f, g


def _cubic_min(a, fa, da, b, fb, db):
    # minimiser of the cubic through (a, fa, da), (b, fb, db); None if undefined
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    x = b - (b - a) * (db + d2 - d1) / denom
    return x if math.isfinite(x) else None


def _line_search(fun, x, f0, g0, d, alpha0, cfg: OptimizerConfig):
    """Strong-Wolfe search along ``d``. Returns ``(alpha, f, g)`` or ``None``."""
    c1, c2 = cfg.wolfe_c1, cfg.wolfe_c2
    dphi0 = float(g0 @ d)
    trials = 0

    def phi(a):
        f, g = fun(x + a * d)
        return f, g, float(g @ d) if math.isfinite(f) else math.nan

    def zoom(lo, f_lo, d_lo, hi, f_hi, d_hi):
        nonlocal trials
        while trials < cfg.max_ls_trials:
            width = hi - lo
            a = None
            if math.isfinite(f_hi) and math.isfinite(d_hi):
                a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            lo_b, hi_b = sorted((lo + 0.1 * width, hi - 0.1 * width))
            if a is None or not (lo_b <= a <= hi_b):
                a = lo + 0.5 * width
            trials += 1
            f, g, dp = phi(a)
            if not math.isfinite(f) or f > f0 + c1 * a * dphi0 or f >= f_lo:
                hi, f_hi, d_hi = a, f, dp
            else:
                if abs(dp) <= -c2 * dphi0:
                    return a, f, g
                if dp * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo = a, f, dp
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        # fall back to the best sufficient-decrease point seen, if any
        if lo > 0 and f_lo < f0:
            f, g = fun(x + lo * d)
            return lo, f, g
        return None

    a_prev, f_prev, d_prev = 0.0, f0, dphi0
    a = alpha0
    while trials < cfg.max_ls_trials:
        trials += 1
        f, g, dp = phi(a)
        if not math.isfinite(f) or f > f0 + c1 * a * dphi0 or (trials > 1 and f >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, f, dp)
        if abs(dp) <= -c2 * dphi0:
            return a, f, g
        if dp >= 0:
            return zoom(a, f, dp, a_prev, f_prev, d_prev)
        a_prev, f_prev, d_prev = a, f, dp
        a = 2.0 * a
    return None


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def minimize(
    objective: Callable[[np.ndarray], tuple],
    x0,
    cfg: OptimizerConfig | None = None,
    callback: Callable | None = None,
) -> OptResult:
    """Minimise ``objective(x) -> (value, gradient)`` from ``x0``.

    Accepted steps strictly decrease the objective, so ``trace`` is
    non-increasing. Non-finite values during the line search shrink the step.
    """
    cfg = cfg or OptimizerConfig()
    fun = _Counter(objective)
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not math.isfinite(f):
        raise ValueError("objective is not finite at x0")
    trace = [f]
    pairs: deque = deque(maxlen=cfg.memory)
    status = Status.MAX_ITERS
    it = 0
    while True:
        if f < -DIVERGENCE_BOUND:
            status = Status.DIVERGED
            break
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= cfg.grad_tol:
            status = Status.CONVERGED
            break
        if it >= cfg.max_iters:
            break
        d = _two_loop(g, list(pairs))
        with np.errstate(over="ignore", invalid="ignore"):
            descent = g @ d < 0
        if not descent:
            pairs.clear()
            d = -g
        alpha0 = 1.0 if pairs else min(1.0, 1.0 / max(float(np.linalg.norm(g)), 1e-300))
        res = _line_search(fun, x, f, g, d, alpha0, cfg)
        if res is None and pairs:
            # retry once along steepest descent with fresh memory
            pairs.clear()
            d = -g
            res = _line_search(fun, x, f, g, d, min(1.0, 1.0 / float(np.linalg.norm(g))), cfg)
        if res is None or not res[1] < f:
            status = Status.LINE_SEARCH_FAILURE
            break
        alpha, f_new, g_new = res
        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            pairs.append((s, y, 1.0 / sy))
        x = x + s
        f_old, f, g = f, f_new, g_new
        it += 1
        trace.append(f)
        if callback is not None:
            callback(x, f)
        if abs(f_old - f) <= cfg.f_tol * max(abs(f_old), abs(f), 1.0):
            status = Status.CONVERGED
            break
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    return OptResult(x, f, gnorm, it, status, trace, fun.n)


def finite_diff_grad(fun: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g
