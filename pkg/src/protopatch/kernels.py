"""Hot array kernels: convolution, pooling, and patch-prototype distances.

Every kernel exists twice: an explicit-loop version compiled with numba's
@njit, and a vectorized pure-numpy version. The jitted path is used whenever
numba imports cleanly; set PROTOPATCH_NO_NUMBA=1 to force the numpy path
(the public names below are rebound at import time). Both paths accumulate
in the same order for the forward passes, so their outputs agree bit for bit
with a naive loop; backward passes agree to rounding.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

import os

import numpy as np


def _numba_disabled():
    return os.environ.get("PROTOPATCH_NO_NUMBA", "").strip().lower() in {
        "1", "true", "yes", "on",
    }


try:
    if _numba_disabled():
        raise ImportError("numba disabled via PROTOPATCH_NO_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):
        # no-op decorator so the loop variants stay importable
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


# ---------------------------------------------------------------------------
# conv1d, 'same' zero padding. Callers pass the already padded input
# (B, T + k - 1, Ci); outputs are (B, T, Co).

@njit(cache=True)
def conv1d_fwd_loops(xpad, w, b):
    k, ci_n, co_n = w.shape
    batch = xpad.shape[0]
    t_out = xpad.shape[1] - (k - 1)
    out = np.empty((batch, t_out, co_n))
    for bi in range(batch):
        for t in range(t_out):
            for co in range(co_n):
                acc = b[co]
                for dk in range(k):
                    for ci in range(ci_n):
                        acc += xpad[bi, t + dk, ci] * w[dk, ci, co]
                out[bi, t, co] = acc
    return out


def conv1d_fwd_numpy(xpad, w, b):
    k, ci_n, co_n = w.shape
    batch = xpad.shape[0]
    t_out = xpad.shape[1] - (k - 1)
    out = np.empty((batch, t_out, co_n))
    out[...] = b
    # accumulate tap by tap, channel by channel: same add order as the loops
    for dk in range(k):
        for ci in range(ci_n):
            out += xpad[:, dk:dk + t_out, ci, None] * w[dk, ci]
    return out


@njit(cache=True)
def conv1d_bwd_loops(xpad, w, gy):
    k, ci_n, co_n = w.shape
    batch = xpad.shape[0]
    t_out = gy.shape[1]
    gxpad = np.zeros_like(xpad)
    gw = np.zeros_like(w)
    gb = np.zeros(co_n)
    for bi in range(batch):
        for t in range(t_out):
            for co in range(co_n):
                g = gy[bi, t, co]
                gb[co] += g
                for dk in range(k):
                    for ci in range(ci_n):
                        gw[dk, ci, co] += xpad[bi, t + dk, ci] * g
                        gxpad[bi, t + dk, ci] += w[dk, ci, co] * g
    return gxpad, gw, gb


def conv1d_bwd_numpy(xpad, w, gy):
    k = w.shape[0]
    t_out = gy.shape[1]
    gxpad = np.zeros_like(xpad)
    gw = np.empty_like(w)
    gb = gy.sum(axis=(0, 1))
    for dk in range(k):
        seg = xpad[:, dk:dk + t_out, :]
        gw[dk] = np.einsum("bti,bto->io", seg, gy)
        gxpad[:, dk:dk + t_out, :] += np.einsum("bto,io->bti", gy, w[dk])
    return gxpad, gw, gb


# ---------------------------------------------------------------------------
# non-overlapping max pooling; window length == stride. The argmax keeps the
# first (lowest-index) maximum so the backward routing is deterministic.

@njit(cache=True)
def maxpool1d_fwd_loops(x, stride):
    batch, t_in, ch = x.shape
    t_out = t_in // stride
    out = np.empty((batch, t_out, ch))
    arg = np.empty((batch, t_out, ch), dtype=np.int64)
    for bi in range(batch):
        for to in range(t_out):
            base = to * stride
            for c in range(ch):
                best = x[bi, base, c]
                best_j = 0
                for j in range(1, stride):
                    v = x[bi, base + j, c]
                    if v > best:
                        best = v
                        best_j = j
                out[bi, to, c] = best
                arg[bi, to, c] = best_j
    return out, arg


def maxpool1d_fwd_numpy(x, stride):
    batch, t_in, ch = x.shape
    t_out = t_in // stride
    windows = x.reshape(batch, t_out, stride, ch)
    return windows.max(axis=2), windows.argmax(axis=2)


@njit(cache=True)
def maxpool1d_bwd_loops(arg, gy, stride):
    batch, t_out, ch = gy.shape
    gx = np.zeros((batch, t_out * stride, ch))
    for bi in range(batch):
        for to in range(t_out):
            base = to * stride
            for c in range(ch):
                gx[bi, base + arg[bi, to, c], c] = gy[bi, to, c]
    return gx


def maxpool1d_bwd_numpy(arg, gy, stride):
    batch, t_out, ch = gy.shape
    gx = np.zeros((batch, t_out, stride, ch))
    np.put_along_axis(gx, arg[:, :, None, :], gy[:, :, None, :], axis=2)
    return gx.reshape(batch, t_out * stride, ch)


# ---------------------------------------------------------------------------
# Euclidean distances between every patch of every sample and every
# prototype. patches: (B, Q, M) flattened windows, protos: (K, M);
# result (B, K, Q). Gradient at zero distance is defined as zero.

@njit(cache=True)
def pairwise_l2_fwd_loops(patches, protos):
    batch, q_n, m = patches.shape
    k_n = protos.shape[0]
    out = np.empty((batch, k_n, q_n))
    for bi in range(batch):
        for k in range(k_n):
            for q in range(q_n):
                acc = 0.0
                for j in range(m):
                    d = patches[bi, q, j] - protos[k, j]
                    acc += d * d
                out[bi, k, q] = np.sqrt(acc)
    return out


def pairwise_l2_fwd_numpy(patches, protos):
    diff = patches[:, None, :, :] - protos[None, :, None, :]
    return np.sqrt(np.einsum("bkqm,bkqm->bkq", diff, diff))


@njit(cache=True)
def pairwise_l2_bwd_loops(patches, protos, dist, gd):
    batch, q_n, m = patches.shape
    k_n = protos.shape[0]
    gpatches = np.zeros_like(patches)
    gprotos = np.zeros_like(protos)
    for bi in range(batch):
        for k in range(k_n):
            for q in range(q_n):
                d = dist[bi, k, q]
                g = gd[bi, k, q]
                if g != 0.0 and d > 0.0:
                    s = g / d
                    for j in range(m):
                        delta = (patches[bi, q, j] - protos[k, j]) * s
                        gpatches[bi, q, j] += delta
                        gprotos[k, j] -= delta
    return gpatches, gprotos


def pairwise_l2_bwd_numpy(patches, protos, dist, gd):
    diff = patches[:, None, :, :] - protos[None, :, None, :]
    scale = np.where(dist > 0.0, gd / np.where(dist > 0.0, dist, 1.0), 0.0)
    gpatches = np.einsum("bkq,bkqm->bqm", scale, diff)
    gprotos = -np.einsum("bkq,bkqm->km", scale, diff)
    return gpatches, gprotos


if NUMBA_ENABLED:
    BACKEND = "numba"
    conv1d_fwd = conv1d_fwd_loops
    conv1d_bwd = conv1d_bwd_loops
    maxpool1d_fwd = maxpool1d_fwd_loops
    maxpool1d_bwd = maxpool1d_bwd_loops
    pairwise_l2_fwd = pairwise_l2_fwd_loops
    pairwise_l2_bwd = pairwise_l2_bwd_loops
else:
    BACKEND = "numpy"
    conv1d_fwd = conv1d_fwd_numpy
    conv1d_bwd = conv1d_bwd_numpy
    maxpool1d_fwd = maxpool1d_fwd_numpy
    maxpool1d_bwd = maxpool1d_bwd_numpy
    pairwise_l2_fwd = pairwise_l2_fwd_numpy
    pairwise_l2_bwd = pairwise_l2_bwd_numpy
