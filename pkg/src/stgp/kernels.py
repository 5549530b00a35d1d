"""Covariance functions over ``(x_km, y_km, t_hours)`` inputs.

Two leaf kernels and sum/product composition:

* ``PeriodicTime``: ``v * exp(-sin^2(pi (t - t') / T) / (2 l^2))`` on the time column.
* ``RbfSpace``: ``v * exp(-|s - s'|^2 / l^2)`` on the two space columns.
  Note the denominator is ``l^2``, not the more common ``2 l^2``.

Every leaf is linear in its variance ``v``, which is the only trainable
parameter. Internally a leaf is evaluated once as a unit-variance *base*
matrix and then scaled, so fixed-input callers (the variational model) can
cache bases and recombine them cheaply as variances change.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Union

import numpy as np

from . import _accel
from .errors import NonFiniteInput

# fixed hyperparameters: period 24 h, time lengthscale 8 h, space lengthscale 10 km
PERIOD_HOURS = 24.0
TIME_LENGTHSCALE = 8.0
SPACE_LENGTHSCALE = 10.0


@dataclass(frozen=True)
class KernelParams:
    variance: float = 1.0
    lengthscale: float = 1.0
    period: float | None = None
    trainable_variance: bool = True

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if self.period is not None and not self.period > 0:
            raise ValueError(f"period must be positive, got {self.period}")


@dataclass(frozen=True)
class PeriodicTime:
    params: KernelParams

    def __post_init__(self):
        if self.params.period is None:
            raise ValueError("PeriodicTime needs a period")

    def base(self, A, B):
        return _accel.periodic_unit(A[:, 2], B[:, 2], self.params.period, self.params.lengthscale)


@dataclass(frozen=True)
class RbfSpace:
    params: KernelParams

    def base(self, A, B):
        return _accel.rbf_unit(A[:, :2], B[:, :2], self.params.lengthscale)


@dataclass(frozen=True)
class Sum:
    children: tuple


@dataclass(frozen=True)
class Product:
    children: tuple


Leaf = Union[PeriodicTime, RbfSpace]
KernelExpr = Union[PeriodicTime, RbfSpace, Sum, Product]


def spatiotemporal_kernel(
    variances=(1.0, 1.0, 1.0, 1.0),
    period=PERIOD_HOURS,
    time_lengthscale=TIME_LENGTHSCALE,
    space_lengthscale=SPACE_LENGTHSCALE,
    interaction_time_lengthscale=None,
    interaction_space_lengthscale=None,
) -> Sum:
    """Marginal time + marginal space + time x space interaction.

    ``variances`` are for (time marginal, space marginal, time interaction,
    space interaction). Interaction lengthscales default to the marginal ones.
    """
    vt, vs, vti, vsi = variances
    lti = time_lengthscale if interaction_time_lengthscale is None else interaction_time_lengthscale
    lsi = space_lengthscale if interaction_space_lengthscale is None else interaction_space_lengthscale
    return Sum((
        PeriodicTime(KernelParams(vt, time_lengthscale, period)),
        RbfSpace(KernelParams(vs, space_lengthscale)),
        Product((
            PeriodicTime(KernelParams(vti, lti, period)),
            RbfSpace(KernelParams(vsi, lsi)),
        )),
    ))


# --------------------------------------------------------------------------
# tree helpers


def leaves(k: KernelExpr) -> list:
    if isinstance(k, (Sum, Product)):
        return [leaf for c in k.children for leaf in leaves(c)]
    return [k]


def trainable_leaves(k: KernelExpr) -> list:
    return [leaf for leaf in leaves(k) if leaf.params.trainable_variance]


def variances(k: KernelExpr, trainable_only: bool = True) -> np.ndarray:
    ls = trainable_leaves(k) if trainable_only else leaves(k)
    return np.array([leaf.params.variance for leaf in ls], dtype=float)


def with_variances(k: KernelExpr, values) -> KernelExpr:
    """Copy of ``k`` with trainable leaf variances replaced, in leaf order."""
    it = iter(np.asarray(values, dtype=float).tolist())

    def rebuild(node):
        if isinstance(node, (Sum, Product)):
            return type(node)(tuple(rebuild(c) for c in node.children))
        if node.params.trainable_variance:
            return replace(node, params=replace(node.params, variance=next(it)))
        return node

    out = rebuild(k)
    if next(it, None) is not None:
        raise ValueError("too many variances")
    return out


def time_period(k: KernelExpr) -> float | None:
    """Common period when every time-reading leaf is periodic with one period."""
    periods = {leaf.params.period for leaf in leaves(k) if isinstance(leaf, PeriodicTime)}
    return periods.pop() if len(periods) == 1 else None


def to_dict(k: KernelExpr) -> dict:
    if isinstance(k, (Sum, Product)):
        return {"type": type(k).__name__, "children": [to_dict(c) for c in k.children]}
    return {"type": type(k).__name__, **asdict(k.params)}


def from_dict(d: dict) -> KernelExpr:
    kind = d["type"]
    if kind in ("Sum", "Product"):
        cls = Sum if kind == "Sum" else Product
        return cls(tuple(from_dict(c) for c in d["children"]))
    params = KernelParams(
        variance=float(d["variance"]),
        lengthscale=float(d["lengthscale"]),
        period=None if d.get("period") is None else float(d["period"]),
        trainable_variance=bool(d.get("trainable_variance", True)),
    )
    return {"PeriodicTime": PeriodicTime, "RbfSpace": RbfSpace}[kind](params)


# --------------------------------------------------------------------------
# evaluation


def _check(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[1] != 3:
        raise ValueError(f"expected (n, 3) points, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput("kernel inputs must be finite")
    return A


def leaf_bases(k: KernelExpr, A, B) -> list:
    """Unit-variance matrix for every leaf, in leaf order."""
    A = _check(A)
    B = A if B is None else _check(B)
    return [leaf.base(A, B) for leaf in leaves(k)]


def leaf_base_diag(k: KernelExpr, A) -> list:
    n = len(_check(A))
    return [np.ones(n) for _ in leaves(k)]


def combine(k: KernelExpr, bases, with_grads: bool = False, values=None):
    """Assemble ``K`` (and d K / d variance per trainable leaf) from leaf bases.

    ``values`` optionally overrides the trainable leaf variances, so a fixed
    set of bases can be reused across parameter updates.
    """
    all_leaves = leaves(k)
    var = [leaf.params.variance for leaf in all_leaves]
    if values is not None:
        vals = iter(np.asarray(values, dtype=float).tolist())
        var = [next(vals) if leaf.params.trainable_variance else v for leaf, v in zip(all_leaves, var)]
    pos = iter(range(len(all_leaves)))

    def rec(node):
        if isinstance(node, Sum):
            parts = [rec(c) for c in node.children]
            K = parts[0][0]
            for p in parts[1:]:
                K = K + p[0]
            return K, [g for p in parts for g in p[1]]
        if isinstance(node, Product):
            parts = [rec(c) for c in node.children]
            K = parts[0][0]
            for p in parts[1:]:
                K = K * p[0]
            grads = []
            if with_grads:
                for ci, p in enumerate(parts):
                    others = None
                    for cj, q in enumerate(parts):
                        if cj != ci:
                            others = q[0] if others is None else others * q[0]
                    grads.extend(g * others for g in p[1])
            return K, grads
        i = next(pos)
        base = bases[i]
        K = var[i] * base
        grads = [base] if (with_grads and node.params.trainable_variance) else []
        return K, grads

    K, grads = rec(k)
    return (K, grads) if with_grads else K


def eval_matrix(k: KernelExpr, A, B=None) -> np.ndarray:
    return combine(k, leaf_bases(k, A, B))


def eval_diag(k: KernelExpr, A) -> np.ndarray:
    return combine(k, leaf_base_diag(k, A))


def eval_pair(k: KernelExpr, x, xp) -> float:
    return float(eval_matrix(k, np.reshape(x, (1, 3)), np.reshape(xp, (1, 3)))[0, 0])


def grad_variances(k: KernelExpr, A, B=None) -> list:
    """d K / d variance for every trainable leaf, in leaf order."""
    if not trainable_leaves(k):
        raise ValueError("kernel has no trainable variances")
    return combine(k, leaf_bases(k, A, B), with_grads=True)[1]


def add_jitter(M, jitter: float) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("add_jitter needs a square matrix")
    out = M.copy()
    out[np.diag_indices_from(out)] += jitter
    return out
