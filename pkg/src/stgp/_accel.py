"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``STGP_DISABLE_NUMBA`` is unset
(or ``0``). Both paths produce the same values up to last-ulp differences in
``sin``/``exp``; each path on its own is deterministic.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("STGP_DISABLE_NUMBA", "0") in ("", "0")


# --------------------------------------------------------------------------
# numpy implementations


def periodic_unit_numpy(ta, tb, period, lengthscale):
    d = ta[:, None] - tb[None, :]
    s = np.sin(np.pi * d / period)
    return np.exp(-(s * s) / (2.0 * lengthscale * lengthscale))


def rbf_unit_numpy(sa, sb, lengthscale):
    dx = sa[:, 0][:, None] - sb[:, 0][None, :]
    dy = sa[:, 1][:, None] - sb[:, 1][None, :]
    return np.exp(-(dx * dx + dy * dy) / (lengthscale * lengthscale))


def bin_index_numpy(values, edges):
    # half-open [edges[k], edges[k+1]); -1 outside
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[(idx < 0) | (idx >= len(edges) - 1)] = -1
    idx[~np.isfinite(values)] = -1
    return idx


def medic_gather_numpy(counts, test_t, test_c, offsets, hist_len):
    """Sum and number of gathered lookback values per test bin.

    ``counts`` is (n_time, n_cells); lookback index ``t - offset`` is gathered
    when ``0 <= idx < hist_len``. Returns ``(sums, ns, n_leaks)`` where
    ``n_leaks`` counts lookbacks at or beyond ``hist_len``.
    """
    idx = test_t[:, None] - offsets[None, :]
    leaks = int(np.count_nonzero(idx >= hist_len))
    ok = (idx >= 0) & (idx < hist_len)
    safe = np.where(ok, idx, 0)
    vals = counts[safe, test_c[:, None]]
    sums = np.where(ok, vals, 0).sum(axis=1).astype(np.float64)
    ns = ok.sum(axis=1).astype(np.int64)
    return sums, ns, leaks


# --------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def periodic_unit_numba(ta, tb, period, lengthscale):
        n = ta.shape[0]
        m = tb.shape[0]
        out = np.empty((n, m))
        denom = 2.0 * lengthscale * lengthscale
        for i in range(n):
            for j in range(m):
                s = np.sin(np.pi * (ta[i] - tb[j]) / period)
                out[i, j] = np.exp(-(s * s) / denom)
        return out

    @njit(cache=True)
    def rbf_unit_numba(sa, sb, lengthscale):
        n = sa.shape[0]
        m = sb.shape[0]
        out = np.empty((n, m))
        l2 = lengthscale * lengthscale
        for i in range(n):
            for j in range(m):
                dx = sa[i, 0] - sb[j, 0]
                dy = sa[i, 1] - sb[j, 1]
                out[i, j] = np.exp(-(dx * dx + dy * dy) / l2)
        return out

    @njit(cache=True)
    def bin_index_numba(values, edges):
        n = values.shape[0]
        nb = edges.shape[0] - 1
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            v = values[i]
            if not np.isfinite(v) or v < edges[0] or v >= edges[nb]:
                out[i] = -1
                continue
            lo = 0
            hi = nb
            # invariant: edges[lo] <= v < edges[hi]
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if edges[mid] <= v:
                    lo = mid
                else:
                    hi = mid
            out[i] = lo
        return out

    @njit(cache=True)
    def medic_gather_numba(counts, test_t, test_c, offsets, hist_len):
        k = test_t.shape[0]
        sums = np.zeros(k)
        ns = np.zeros(k, dtype=np.int64)
        leaks = 0
        for i in range(k):
            for g in range(offsets.shape[0]):
                idx = test_t[i] - offsets[g]
                if idx >= hist_len:
                    leaks += 1
                elif idx >= 0:
                    sums[i] += counts[idx, test_c[i]]
                    ns[i] += 1
        return sums, ns, leaks

else:  # pragma: no cover
    periodic_unit_numba = periodic_unit_numpy
    rbf_unit_numba = rbf_unit_numpy
    bin_index_numba = bin_index_numpy
    medic_gather_numba = medic_gather_numpy


# --------------------------------------------------------------------------
# dispatch


def periodic_unit(ta, tb, period, lengthscale):
    ta = np.ascontiguousarray(ta, dtype=np.float64)
    tb = np.ascontiguousarray(tb, dtype=np.float64)
    if USE_NUMBA:
        return periodic_unit_numba(ta, tb, float(period), float(lengthscale))
    return periodic_unit_numpy(ta, tb, period, lengthscale)


def rbf_unit(sa, sb, lengthscale):
    sa = np.ascontiguousarray(sa, dtype=np.float64)
    sb = np.ascontiguousarray(sb, dtype=np.float64)
    if USE_NUMBA:
        return rbf_unit_numba(sa, sb, float(lengthscale))
    return rbf_unit_numpy(sa, sb, lengthscale)


def bin_index(values, edges):
    values = np.ascontiguousarray(values, dtype=np.float64)
    edges = np.ascontiguousarray(edges, dtype=np.float64)
    if USE_NUMBA:
        return bin_index_numba(values, edges)
    return bin_index_numpy(values, edges)


def medic_gather(counts, test_t, test_c, offsets, hist_len):
    counts = np.ascontiguousarray(counts, dtype=np.float64)
    test_t = np.ascontiguousarray(test_t, dtype=np.int64)
    test_c = np.ascontiguousarray(test_c, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if USE_NUMBA:
        sums, ns, leaks = medic_gather_numba(counts, test_t, test_c, offsets, int(hist_len))
        return sums, ns, int(leaks)
    return medic_gather_numpy(counts, test_t, test_c, offsets, int(hist_len))
