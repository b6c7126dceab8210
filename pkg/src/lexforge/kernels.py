"""Hot inner loops: GELU, CRF dynamic programs, exact signed-rank null, span overlap.

Each kernel exists twice: an explicit-loop version compiled with numba and a
vectorized numpy version. The public names dispatch on ``_accel.USE_NUMBA``;
both paths are importable directly (``*_loops`` / ``*_numpy``) for testing and
benchmarking.
"""

import math

import numpy as np
from scipy.special import erf

from . import _accel
from ._accel import njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# GELU (exact, erf form)
# --------------------------------------------------------------------------


@njit
def gelu_forward_loops(x):
    flat = x.ravel()
    y = np.empty_like(flat)
    cdf = np.empty_like(flat)
    for i in range(flat.shape[0]):
        c = 0.5 * (1.0 + math.erf(flat[i] * 0.7071067811865476))
        cdf[i] = c
        y[i] = flat[i] * c
    return y.reshape(x.shape), cdf.reshape(x.shape)


@njit
def gelu_backward_loops(dy, x, cdf):
    fd = dy.ravel()
    fx = x.ravel()
    fc = cdf.ravel()
    out = np.empty_like(fd)
    for i in range(fd.shape[0]):
        v = fx[i]
        out[i] = fd[i] * (fc[i] + v * math.exp(-0.5 * v * v) * 0.3989422804014327)
    return out.reshape(dy.shape)


def gelu_forward_numpy(x):
    cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    return x * cdf, cdf


def gelu_backward_numpy(dy, x, cdf):
    return dy * (cdf + x * np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI))


def gelu_forward(x):
    """``(gelu(x), Phi(x))``; the normal CDF is kept for the backward pass."""
    if _accel.USE_NUMBA:
        return gelu_forward_loops(np.ascontiguousarray(x))
    return gelu_forward_numpy(x)


def gelu_backward(dy, x, cdf):
    # the vectorized form is already memory-bound and beats the loop; see benchmarks/
    return gelu_backward_numpy(dy, x, cdf)


# --------------------------------------------------------------------------
# linear-chain CRF
# --------------------------------------------------------------------------


@njit
def crf_forward_loops(emissions, trans, start, end):
    T, L = emissions.shape
    alpha = np.empty((T, L), dtype=np.float64)
    for j in range(L):
        alpha[0, j] = start[j] + emissions[0, j]
    buf = np.empty(L, dtype=np.float64)
    for t in range(1, T):
        for j in range(L):
            m = -np.inf
            for i in range(L):
                buf[i] = alpha[t - 1, i] + trans[i, j]
                if buf[i] > m:
                    m = buf[i]
            s = 0.0
            for i in range(L):
                s += np.exp(buf[i] - m)
            alpha[t, j] = m + np.log(s) + emissions[t, j]
    m = -np.inf
    for j in range(L):
        buf[j] = alpha[T - 1, j] + end[j]
        if buf[j] > m:
            m = buf[j]
    s = 0.0
    for j in range(L):
        s += np.exp(buf[j] - m)
    return alpha, m + np.log(s)


@njit
def crf_backward_loops(emissions, trans, end):
    T, L = emissions.shape
    beta = np.empty((T, L), dtype=np.float64)
    for i in range(L):
        beta[T - 1, i] = end[i]
    buf = np.empty(L, dtype=np.float64)
    for t in range(T - 2, -1, -1):
        for i in range(L):
            m = -np.inf
            for j in range(L):
                buf[j] = trans[i, j] + emissions[t + 1, j] + beta[t + 1, j]
                if buf[j] > m:
                    m = buf[j]
            s = 0.0
            for j in range(L):
                s += np.exp(buf[j] - m)
            beta[t, i] = m + np.log(s)
    return beta


@njit
def crf_viterbi_loops(emissions, trans, start, end):
    T, L = emissions.shape
    score = np.empty((T, L), dtype=np.float64)
    back = np.zeros((T, L), dtype=np.int64)
    for j in range(L):
        score[0, j] = start[j] + emissions[0, j]
    for t in range(1, T):
        for j in range(L):
            best = score[t - 1, 0] + trans[0, j]
            arg = 0
            for i in range(1, L):
                cand = score[t - 1, i] + trans[i, j]
                if cand > best:
                    best = cand
                    arg = i
            score[t, j] = best + emissions[t, j]
            back[t, j] = arg
    path = np.empty(T, dtype=np.int64)
    best = score[T - 1, 0] + end[0]
    arg = 0
    for j in range(1, L):
        cand = score[T - 1, j] + end[j]
        if cand > best:
            best = cand
            arg = j
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def crf_forward_numpy(emissions, trans, start, end):
    T, L = emissions.shape
    alpha = np.empty((T, L), dtype=np.float64)
    alpha[0] = start + emissions[0]
    for t in range(1, T):
        alpha[t] = _logsumexp(alpha[t - 1][:, None] + trans, axis=0) + emissions[t]
    return alpha, float(_logsumexp(alpha[-1] + end, axis=0))


def crf_backward_numpy(emissions, trans, end):
    T, L = emissions.shape
    beta = np.empty((T, L), dtype=np.float64)
    beta[-1] = end
    for t in range(T - 2, -1, -1):
        beta[t] = _logsumexp(trans + (emissions[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


def crf_viterbi_numpy(emissions, trans, start, end):
    T, L = emissions.shape
    score = start + emissions[0]
    back = np.zeros((T, L), dtype=np.int64)
    for t in range(1, T):
        cand = score[:, None] + trans
        back[t] = np.argmax(cand, axis=0)  # first max -> lowest label id
        score = cand[back[t], np.arange(L)] + emissions[t]
    final = score + end
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(final))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, float(final[path[-1]])


def _as_f64(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def crf_forward(emissions, trans, start, end):
    """Log-space forward pass. Returns ``(log_alpha[T, L], log_Z)``."""
    args = _as_f64(emissions, trans, start, end)
    if _accel.USE_NUMBA:
        alpha, log_z = crf_forward_loops(*args)
        return alpha, float(log_z)
    return crf_forward_numpy(*args)


def crf_backward(emissions, trans, end):
    args = _as_f64(emissions, trans, end)
    if _accel.USE_NUMBA:
        return crf_backward_loops(*args)
    return crf_backward_numpy(*args)


def crf_viterbi(emissions, trans, start, end):
    """Best path and its score; ties resolve toward the lower label id."""
    args = _as_f64(emissions, trans, start, end)
    if _accel.USE_NUMBA:
        path, score = crf_viterbi_loops(*args)
        return path, float(score)
    return crf_viterbi_numpy(*args)


# --------------------------------------------------------------------------
# exact null distribution of the signed-rank sum
# --------------------------------------------------------------------------


@njit
def signed_rank_null_loops(doubled_ranks):
    n = doubled_ranks.shape[0]
    total = 0
    for k in range(n):
        total += doubled_ranks[k]
    counts = np.zeros(total + 1, dtype=np.int64)
    for mask in range(1 << n):
        s = 0
        for k in range(n):
            if (mask >> k) & 1:
                s += doubled_ranks[k]
        counts[s] += 1
    return counts


def signed_rank_null_numpy(doubled_ranks):
    n = doubled_ranks.shape[0]
    masks = np.arange(1 << n, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(n, dtype=np.int64)[None, :]) & 1
    sums = bits @ doubled_ranks
    return np.bincount(sums, minlength=int(doubled_ranks.sum()) + 1).astype(np.int64)


def signed_rank_null(doubled_ranks):
    """Count sign assignments by positive-rank sum (ranks doubled to stay integral).

    ``counts[s]`` is the number of the ``2**n`` assignments whose positive
    doubled-rank sum equals ``s``.
    """
    r = np.ascontiguousarray(doubled_ranks, dtype=np.int64)
    if _accel.USE_NUMBA:
        return signed_rank_null_loops(r)
    return signed_rank_null_numpy(r)


# --------------------------------------------------------------------------
# character span / token overlap
# --------------------------------------------------------------------------


@njit
def span_flags_loops(offsets, spans):
    n = offsets.shape[0]
    flags = np.zeros(n, dtype=np.int8)
    for t in range(n):
        b = offsets[t, 0]
        e = offsets[t, 1]
        if e <= b:
            continue
        for s in range(spans.shape[0]):
            if b < spans[s, 1] and spans[s, 0] < e:
                flags[t] = 1
                break
    return flags


def span_flags_numpy(offsets, spans):
    if len(offsets) == 0 or len(spans) == 0:
        return np.zeros(len(offsets), dtype=np.int8)
    b = offsets[:, 0][:, None]
    e = offsets[:, 1][:, None]
    hit = (b < spans[:, 1][None, :]) & (spans[:, 0][None, :] < e) & (e > b)
    return hit.any(axis=1).astype(np.int8)


def span_flags(offsets, spans):
    """1 where a token's half-open offset interval intersects any span."""
    off = np.ascontiguousarray(np.asarray(offsets, dtype=np.int64).reshape(-1, 2))
    sp = np.ascontiguousarray(np.asarray(spans, dtype=np.int64).reshape(-1, 2))
    if _accel.USE_NUMBA:
        return span_flags_loops(off, sp)
    return span_flags_numpy(off, sp)
