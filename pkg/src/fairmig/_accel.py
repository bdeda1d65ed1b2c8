"""Hot kernels: numba-compiled with a pure numpy fallback.

The numba path is used when numba imports and neither ``FAIRMIG_DISABLE_NUMBA=1``
nor ``NUMBA_DISABLE_JIT=1`` is set at import time. Both implementations stay
importable under ``*_numba`` / ``*_numpy`` names so they can be compared.
"""
import os

import numpy as np
import scipy.sparse as sp

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _numba_requested():
    for var in ("FAIRMIG_DISABLE_NUMBA", "NUMBA_DISABLE_JIT"):
        if os.environ.get(var, "0").strip() not in ("", "0"):
            return False
    return True


USE_NUMBA = numba is not None and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations


def spmm_numpy(adj, dense):
    return np.asarray(adj @ dense)


def row_cosine_numpy(a, b, eps):
    raw_a = np.sqrt(np.einsum("ij,ij->i", a, a))
    raw_b = np.sqrt(np.einsum("ij,ij->i", b, b))
    na = np.maximum(raw_a, eps)
    nb = np.maximum(raw_b, eps)
    cos = np.einsum("ij,ij->i", a, b) / (na * nb)
    return cos, na, nb, raw_a > eps, raw_b > eps


def row_cosine_backward_numpy(a, b, cos, na, nb, live_a, live_b, g):
    inv = (g / (na * nb))[:, None]
    da = inv * b - ((g * cos * live_a) / (na * na))[:, None] * a
    db = inv * a - ((g * cos * live_b) / (nb * nb))[:, None] * b
    return da, db


def group_sums_numpy(z, groups, n_groups):
    out = np.zeros((n_groups, z.shape[1]))
    for k in range(n_groups):
        out[k] = z[groups == k].sum(axis=0)
    return out


def group_mean_std_numpy(values, groups, n_groups):
    counts = np.zeros(n_groups, dtype=np.int64)
    mu = np.full(n_groups, np.nan)
    sigma = np.full(n_groups, np.nan)
    for k in range(n_groups):
        vk = values[groups == k]
        counts[k] = vk.size
        if vk.size:
            mu[k] = vk.mean()
            sigma[k] = np.sqrt(np.mean((vk - mu[k]) ** 2))
    return counts, mu, sigma


# --------------------------------------------------------------------------
# numba implementations

if numba is not None:

    @numba.njit(cache=True)
    def _csr_spmm(indptr, indices, data, dense):
        n = indptr.shape[0] - 1
        out = np.zeros((n, dense.shape[1]))
        for i in range(n):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                v = data[p]
                for c in range(dense.shape[1]):
                    out[i, c] += v * dense[j, c]
        return out

    @numba.njit(cache=True)
    def _row_cosine(a, b, eps):
        n, d = a.shape
        cos = np.empty(n)
        na = np.empty(n)
        nb = np.empty(n)
        live_a = np.empty(n, dtype=np.bool_)
        live_b = np.empty(n, dtype=np.bool_)
        for i in range(n):
            saa = 0.0
            sbb = 0.0
            sab = 0.0
            for c in range(d):
                saa += a[i, c] * a[i, c]
                sbb += b[i, c] * b[i, c]
                sab += a[i, c] * b[i, c]
            ra = np.sqrt(saa)
            rb = np.sqrt(sbb)
            live_a[i] = ra > eps
            live_b[i] = rb > eps
            na[i] = ra if ra > eps else eps
            nb[i] = rb if rb > eps else eps
            cos[i] = sab / (na[i] * nb[i])
        return cos, na, nb, live_a, live_b

    @numba.njit(cache=True)
    def _row_cosine_backward(a, b, cos, na, nb, live_a, live_b, g):
        n, d = a.shape
        da = np.empty((n, d))
        db = np.empty((n, d))
        for i in range(n):
            inv = g[i] / (na[i] * nb[i])
            ca = g[i] * cos[i] / (na[i] * na[i]) if live_a[i] else 0.0
            cb = g[i] * cos[i] / (nb[i] * nb[i]) if live_b[i] else 0.0
            for c in range(d):
                da[i, c] = inv * b[i, c] - ca * a[i, c]
                db[i, c] = inv * a[i, c] - cb * b[i, c]
        return da, db

    @numba.njit(cache=True)
    def _group_sums(z, groups, n_groups):
        out = np.zeros((n_groups, z.shape[1]))
        for i in range(z.shape[0]):
            k = groups[i]
            for c in range(z.shape[1]):
                out[k, c] += z[i, c]
        return out

    @numba.njit(cache=True)
    def _group_mean_std(values, groups, n_groups):
        counts = np.zeros(n_groups, dtype=np.int64)
        sums = np.zeros(n_groups)
        for i in range(values.shape[0]):
            counts[groups[i]] += 1
            sums[groups[i]] += values[i]
        mu = np.full(n_groups, np.nan)
        for k in range(n_groups):
            if counts[k] > 0:
                mu[k] = sums[k] / counts[k]
        sq = np.zeros(n_groups)
        for i in range(values.shape[0]):
            dev = values[i] - mu[groups[i]]
            sq[groups[i]] += dev * dev
        sigma = np.full(n_groups, np.nan)
        for k in range(n_groups):
            if counts[k] > 0:
                sigma[k] = np.sqrt(sq[k] / counts[k])
        return counts, mu, sigma

    def spmm_numba(adj, dense):
        adj = sp.csr_matrix(adj) if not sp.isspmatrix_csr(adj) else adj
        return _csr_spmm(adj.indptr, adj.indices, adj.data.astype(np.float64, copy=False),
                         np.ascontiguousarray(dense, dtype=np.float64))

    def row_cosine_numba(a, b, eps):
        return _row_cosine(np.ascontiguousarray(a, dtype=np.float64),
                           np.ascontiguousarray(b, dtype=np.float64), float(eps))

    def row_cosine_backward_numba(a, b, cos, na, nb, live_a, live_b, g):
        return _row_cosine_backward(np.ascontiguousarray(a, dtype=np.float64),
                                    np.ascontiguousarray(b, dtype=np.float64),
                                    cos, na, nb, live_a, live_b,
                                    np.ascontiguousarray(g, dtype=np.float64))

    def group_sums_numba(z, groups, n_groups):
        return _group_sums(np.ascontiguousarray(z, dtype=np.float64),
                           np.ascontiguousarray(groups, dtype=np.int64), n_groups)

    def group_mean_std_numba(values, groups, n_groups):
        return _group_mean_std(np.ascontiguousarray(values, dtype=np.float64),
                               np.ascontiguousarray(groups, dtype=np.int64), n_groups)

else:  # pragma: no cover
    spmm_numba = spmm_numpy
    row_cosine_numba = row_cosine_numpy
    row_cosine_backward_numba = row_cosine_backward_numpy
    group_sums_numba = group_sums_numpy
    group_mean_std_numba = group_mean_std_numpy


if USE_NUMBA:
    spmm = spmm_numba
    row_cosine = row_cosine_numba
    row_cosine_backward = row_cosine_backward_numba
    group_sums = group_sums_numba
    group_mean_std = group_mean_std_numba
else:
    spmm = spmm_numpy
    row_cosine = row_cosine_numpy
    row_cosine_backward = row_cosine_backward_numpy
    group_sums = group_sums_numpy
    group_mean_std = group_mean_std_numpy
