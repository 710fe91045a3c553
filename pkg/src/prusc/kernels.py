"""Inner-loop kernels.

Each kernel exists twice: a loop version compiled with numba (``*_nb``) and a
vectorised numpy version (``*_np``). The public name points at the numba
version unless numba is missing or disabled through ``PRUSC_DISABLE_NUMBA``.
Both versions take float64 C-contiguous arrays.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

UNIFORM_CLAMP = 1e-12


# --- Gumbel-Sigmoid -------------------------------------------------------
# the loop version is kept for parity tests and benchmarks; it does not beat
# numpy's vectorised transcendentals, so the public name always uses numpy


def _gumbel_sigmoid_np(logits, u1, u2, tau):
    u1 = np.clip(u1, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    u2 = np.clip(u2, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    noise = np.log(np.log(u1) / np.log(u2))
    return 1.0 / (1.0 + np.exp(-(logits - noise) / tau))


@njit(cache=True)
def _gumbel_sigmoid_nb(logits, u1, u2, tau):
    out = np.empty_like(logits)
    lo = UNIFORM_CLAMP
    hi = 1.0 - UNIFORM_CLAMP
    flat_l = logits.ravel()
    flat_1 = u1.ravel()
    flat_2 = u2.ravel()
    flat_o = out.ravel()
    for i in range(flat_l.size):
        a = min(max(flat_1[i], lo), hi)
        b = min(max(flat_2[i], lo), hi)
        noise = np.log(np.log(a) / np.log(b))
        flat_o[i] = 1.0 / (1.0 + np.exp(-(flat_l[i] - noise) / tau))
    return out


# --- k-means --------------------------------------------------------------


def _assign_np(X, C):
    d = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d, axis=1)
    return labels.astype(np.int64), d[np.arange(X.shape[0]), labels]


@njit(cache=True)
def _assign_nb(X, C):
    n, dim = X.shape
    k = C.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n)
    for i in range(n):
        bd = np.inf
        bj = 0
        for j in range(k):
            acc = 0.0
            for t in range(dim):
                diff = X[i, t] - C[j, t]
                acc += diff * diff
            if acc < bd:
                bd = acc
                bj = j
        labels[i] = bj
        best[i] = bd
    return labels, best


def _centroid_sums_np(X, labels, k):
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


@njit(cache=True)
def _centroid_sums_nb(X, labels, k):
    n, dim = X.shape
    sums = np.zeros((k, dim))
    counts = np.zeros(k, dtype=np.int64)
    for i in range(n):
        j = labels[i]
        counts[j] += 1
        for t in range(dim):
            sums[j, t] += X[i, t]
    return sums, counts


def _sq_dist_to_np(X, c):
    return ((X - c[None, :]) ** 2).sum(axis=1)


@njit(cache=True)
def _sq_dist_to_nb(X, c):
    n, dim = X.shape
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for t in range(dim):
            diff = X[i, t] - c[t]
            acc += diff * diff
        out[i] = acc
    return out


def _sq_dist_rows_np(X, C, labels):
    return ((X - C[labels]) ** 2).sum(axis=1)


@njit(cache=True)
def _sq_dist_rows_nb(X, C, labels):
    n, dim = X.shape
    out = np.empty(n)
    for i in range(n):
        j = labels[i]
        acc = 0.0
        for t in range(dim):
            diff = X[i, t] - C[j, t]
            acc += diff * diff
        out[i] = acc
    return out


# --- optimiser updates ---------------------------------------------------
# one fused pass per parameter instead of several full-size temporaries


def _sgd_update_np(p, v, g, lr, momentum, weight_decay):
    v *= momentum
    v += g + weight_decay * p
    p -= lr * v


@njit(cache=True)
def _sgd_update_nb(p, v, g, lr, momentum, weight_decay):
    fp = p.ravel()
    fv = v.ravel()
    fg = g.ravel()
    for i in range(fp.size):
        fv[i] = momentum * fv[i] + (fg[i] + weight_decay * fp[i])
        fp[i] -= lr * fv[i]


def _adam_update_np(p, m, v, g, lr, b1, b2, c1, c2, eps):
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g**2
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@njit(cache=True)
def _adam_update_nb(p, m, v, g, lr, b1, b2, c1, c2, eps):
    fp = p.ravel()
    fm = m.ravel()
    fv = v.ravel()
    fg = g.ravel()
    for i in range(fp.size):
        fm[i] = b1 * fm[i] + (1 - b1) * fg[i]
        fv[i] = b2 * fv[i] + (1 - b2) * fg[i] ** 2
        fp[i] -= lr * (fm[i] / c1) / (np.sqrt(fv[i] / c2) + eps)


# --- group bookkeeping ----------------------------------------------------


def _group_counts_np(y, a, correct, n_classes, n_attr):
    g = y * n_attr + a
    size = n_classes * n_attr
    counts = np.bincount(g, minlength=size).reshape(n_classes, n_attr)
    hits = np.bincount(g, weights=correct.astype(np.float64), minlength=size)
    return counts.astype(np.int64), hits.reshape(n_classes, n_attr).astype(np.int64)


@njit(cache=True)
def _group_counts_nb(y, a, correct, n_classes, n_attr):
    counts = np.zeros((n_classes, n_attr), dtype=np.int64)
    hits = np.zeros((n_classes, n_attr), dtype=np.int64)
    for i in range(y.size):
        counts[y[i], a[i]] += 1
        if correct[i]:
            hits[y[i], a[i]] += 1
    return counts, hits


if HAVE_NUMBA:
    assign = _assign_nb
    centroid_sums = _centroid_sums_nb
    sq_dist_to = _sq_dist_to_nb
    sq_dist_rows = _sq_dist_rows_nb
    group_counts = _group_counts_nb
    sgd_update = _sgd_update_nb
    adam_update = _adam_update_nb
else:
    assign = _assign_np
    centroid_sums = _centroid_sums_np
    sq_dist_to = _sq_dist_to_np
    sq_dist_rows = _sq_dist_rows_np
    group_counts = _group_counts_np
    sgd_update = _sgd_update_np
    adam_update = _adam_update_np

gumbel_sigmoid = _gumbel_sigmoid_np

BACKEND = "numba" if HAVE_NUMBA else "numpy"
