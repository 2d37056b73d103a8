"""Hot inner loops, compiled with numba when available.

Set ``UNLEARNKIT_NUMBA=0`` before import to force the pure-numpy path.  Both
implementations of every kernel stay importable (``*_numba`` / ``*_numpy``)
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""

import os

import numpy as np

try:  # pragma: no cover - depends on environment
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("UNLEARNKIT_NUMBA", "1").lower() not in ("0", "false", "no")


def _njit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# -- grouping of sorted attribute values -------------------------------------


def scan_groups_numpy(xs, ys):
    """Group a sorted attribute column by distinct value.

    Returns ``(values, counts, positives)`` where ``positives`` counts label 1.
    """
    if xs.shape[0] == 0:
        return xs[:0].copy(), np.zeros(0, np.int64), np.zeros(0, np.int64)
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    counts = np.diff(np.r_[starts, xs.shape[0]]).astype(np.int64)
    pos = np.add.reduceat(ys.astype(np.int64), starts)
    return xs[starts].copy(), counts, pos


@_njit
def scan_groups_numba(xs, ys):
    n = xs.shape[0]
    values = np.empty(n, np.float64)
    counts = np.zeros(n, np.int64)
    pos = np.zeros(n, np.int64)
    g = -1
    for i in range(n):
        if g < 0 or xs[i] != values[g]:
            g += 1
            values[g] = xs[i]
        counts[g] += 1
        pos[g] += ys[i]
    return values[: g + 1].copy(), counts[: g + 1].copy(), pos[: g + 1].copy()


# -- flattened tree traversal --------------------------------------------------


def traverse_numpy(X, feature, threshold, left, right, value):
    n = X.shape[0]
    node = np.zeros(n, np.int64)
    active = np.flatnonzero(feature[node] >= 0)
    while active.size:
        nd = node[active]
        go_left = X[active, feature[nd]] <= threshold[nd]
        node[active] = np.where(go_left, left[nd], right[nd])
        active = active[feature[node[active]] >= 0]
    return value[node]


@_njit
def traverse_numba(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n, np.float64)
    for i in range(n):
        nd = 0
        while feature[nd] >= 0:
            if X[i, feature[nd]] <= threshold[nd]:
                nd = left[nd]
            else:
                nd = right[nd]
        out[i] = value[nd]
    return out


# -- detrended fluctuation ---------------------------------------------------


def dfa_fluctuations_numpy(profile, windows):
    """RMS of order-1 detrended residuals per window size.

    Non-overlapping segments are taken from both ends of the profile so no
    tail is discarded.
    """
    n = profile.shape[0]
    out = np.empty(windows.shape[0])
    for k, w in enumerate(windows):
        m = n // w
        segs = np.concatenate([profile[: m * w].reshape(m, w), profile[n - m * w :].reshape(m, w)])
        tc = np.arange(w, dtype=np.float64) - (w - 1) / 2.0
        mean = segs.mean(axis=1, keepdims=True)
        slope = (segs - mean) @ tc / (tc @ tc)
        resid = segs - mean - slope[:, None] * tc
        out[k] = np.sqrt(np.mean(resid**2))
    return out


@_njit
def dfa_fluctuations_numba(profile, windows):
    n = profile.shape[0]
    out = np.empty(windows.shape[0])
    for k in range(windows.shape[0]):
        w = windows[k]
        m = n // w
        tmean = (w - 1) / 2.0
        stt = 0.0
        for j in range(w):
            stt += (j - tmean) ** 2
        acc = 0.0
        for s in range(2 * m):
            base = s * w if s < m else n - (2 * m - s) * w
            ymean = 0.0
            for j in range(w):
                ymean += profile[base + j]
            ymean /= w
            sty = 0.0
            for j in range(w):
                sty += (j - tmean) * (profile[base + j] - ymean)
            slope = sty / stt
            for j in range(w):
                r = profile[base + j] - ymean - slope * (j - tmean)
                acc += r * r
        out[k] = np.sqrt(acc / (2 * m * w))
    return out


if USE_NUMBA:
    scan_groups = scan_groups_numba
    traverse = traverse_numba
    dfa_fluctuations = dfa_fluctuations_numba
else:
    scan_groups = scan_groups_numpy
    traverse = traverse_numpy
    dfa_fluctuations = dfa_fluctuations_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
