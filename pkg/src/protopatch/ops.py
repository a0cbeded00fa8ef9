"""Differentiable operations for the encoder, decoder, prototype layer and
losses. Shapes follow the (batch, time, channel) convention; heavy inner
loops are delegated to :mod:`protopatch.kernels`."""

import numpy as np

from . import kernels
from .autodiff import Tensor, record
from .errors import DimensionError, NumericError, PreconditionError


def _require_finite(op, *tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# convolution / pooling / upsampling

def conv1d(x, w, b):
    """'Same'-padded 1d convolution: (B,T,Ci) x (k,Ci,Co) -> (B,T,Co).

    The kernel length must be odd so the zero padding is symmetric; output
    time equals input time.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"conv1d: input must be (batch,time,ch), got {x.shape}")
    if w.data.ndim != 3:
        raise DimensionError(f"conv1d: kernel must be (k,ch_in,ch_out), got {w.shape}")
    k, ci_n, co_n = w.shape
    if k % 2 == 0:
        raise PreconditionError(f"conv1d: kernel length (kernel axis 0) must be odd, got {k}")
    if x.shape[2] != ci_n:
        raise DimensionError(
            f"conv1d: input channels (input axis 2) = {x.shape[2]} but kernel "
            f"expects (kernel axis 1) = {ci_n}"
        )
    if b.shape != (co_n,):
        raise DimensionError(
            f"conv1d: bias (axis 0) must have length {co_n}, got {b.shape}"
        )
    pad = k // 2
    batch, t_in, _ = x.shape
    xpad = np.zeros((batch, t_in + 2 * pad, ci_n))
    xpad[:, pad:pad + t_in, :] = x.data
    out = Tensor(kernels.conv1d_fwd(xpad, w.data, b.data))

    def rule(g):
        gxpad, gw, gb = kernels.conv1d_bwd(xpad, w.data, np.ascontiguousarray(g))
        return gxpad[:, pad:pad + t_in, :], gw, gb

    return record(out, (x, w, b), rule)


def maxpool1d(x, stride):
    """Non-overlapping window max over time; window length == stride."""
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool1d: input must be (batch,time,ch), got {x.shape}")
    batch, t_in, ch = x.shape
    if stride < 1:
        raise PreconditionError(f"maxpool1d: stride must be >= 1, got {stride}")
    if t_in % stride != 0:
        raise PreconditionError(
            f"maxpool1d: time (axis 1) = {t_in} not divisible by stride {stride}"
        )
    vals, arg = kernels.maxpool1d_fwd(x.data, stride)
    out = Tensor(vals)

    def rule(g):
        return (kernels.maxpool1d_bwd(arg, np.ascontiguousarray(g), stride),)

    return record(out, (x,), rule)


def upsample1d(x, factor):
    """Nearest-neighbour repetition along time."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample1d: input must be (batch,time,ch), got {x.shape}")
    if factor < 1:
        raise PreconditionError(f"upsample1d: factor must be >= 1, got {factor}")
    batch, t_in, ch = x.shape
    out = Tensor(np.repeat(x.data, factor, axis=1))

    def rule(g):
        return (g.reshape(batch, t_in, factor, ch).sum(axis=2),)

    return record(out, (x,), rule)


# ---------------------------------------------------------------------------
# pointwise / dense

def relu(x):
    _require_finite("relu", x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def rule(g):
        return (g * mask,)

    return record(out, (x,), rule)


def affine(x, w, b):
    """x @ w + b for a single vector (n,) or a batch (B,n)."""
    _require_finite("affine", x, w, b)
    if x.data.ndim not in (1, 2):
        raise DimensionError(f"affine: input must be 1d or 2d, got {x.shape}")
    n, m = w.shape
    if x.shape[-1] != n:
        raise DimensionError(
            f"affine: input features (last axis) = {x.shape[-1]} but weight "
            f"(axis 0) = {n}"
        )
    if b.shape != (m,):
        raise DimensionError(f"affine: bias must have length {m}, got {b.shape}")
    if x.data.ndim == 1:
        out = Tensor(np.einsum("n,nm->m", x.data, w.data) + b.data)

        def rule(g):
            gx = np.einsum("m,nm->n", g, w.data)
            gw = np.einsum("n,m->nm", x.data, g)
            return gx, gw, g.copy()

    else:
        out = Tensor(np.einsum("bn,nm->bm", x.data, w.data) + b.data)

        def rule(g):
            gx = np.einsum("bm,nm->bn", g, w.data)
            gw = np.einsum("bn,bm->nm", x.data, g)
            return gx, gw, g.sum(axis=0)

    return record(out, (x, w, b), rule)


def softmax(x):
    """Row softmax over the last axis, computed with max subtraction."""
    _require_finite("softmax", x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def rule(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return record(out, (x,), rule)


# ---------------------------------------------------------------------------
# distances and losses

def l2_distance(a, b):
    """Euclidean norm of a-b over all elements; gradient at a == b is zero."""
    if a.size != b.size:
        raise DimensionError(
            f"l2_distance: lengths differ ({a.size} vs {b.size})"
        )
    diff = a.data.reshape(-1) - b.data.reshape(-1)
    d = float(np.sqrt((diff * diff).sum()))
    out = Tensor(d)

    def rule(g):
        if d == 0.0:
            z = np.zeros_like(a.data)
            return z, np.zeros_like(b.data)
        s = float(g) / d
        ga = (s * diff).reshape(a.shape)
        return ga, -ga.reshape(b.shape)

    return record(out, (a, b), rule)


def mse(a, b):
    """Mean squared difference over all elements."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = Tensor((diff * diff).sum() / n)

    def rule(g):
        ga = (2.0 * float(g) / n) * diff
        return ga, -ga

    return record(out, (a, b), rule)


def cross_entropy(logits, labels):
    """Mean negative log softmax probability at the true label.

    Accepts a single (C,) row with an int label or a (B,C) batch with an
    int array of length B.
    """
    data = logits.data
    single = data.ndim == 1
    rows = data[None, :] if single else data
    if rows.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 1d or 2d, got {logits.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    batch, n_classes = rows.shape
    if lab.shape != (batch,):
        raise DimensionError(
            f"cross_entropy: {batch} logit rows but {lab.shape} labels"
        )
    if lab.min() < 0 or lab.max() >= n_classes:
        raise PreconditionError(
            f"cross_entropy: label out of range [0, {n_classes})"
        )
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per_row = lse - z[np.arange(batch), lab]
    out = Tensor(per_row.mean())

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(batch), lab] -= 1.0
        gl = p * (float(g) / batch)
        return (gl[0] if single else gl,)

    return record(out, (logits,), rule)


def sliding_windows(z, length):
    """All stride-1 windows of `length` time steps: (B,T,C) -> (B,Q,length,C)."""
    if z.data.ndim != 3:
        raise DimensionError(f"sliding_windows: input must be (batch,time,ch), got {z.shape}")
    batch, t_in, ch = z.shape
    if t_in < length:
        raise PreconditionError(
            f"sliding_windows: time (axis 1) = {t_in} shorter than window {length}"
        )
    q_n = t_in - length + 1
    vals = np.empty((batch, q_n, length, ch))
    for j in range(length):
        vals[:, :, j, :] = z.data[:, j:j + q_n, :]
    out = Tensor(vals)

    def rule(g):
        gz = np.zeros((batch, t_in, ch))
        for j in range(length):
            gz[:, j:j + q_n, :] += g[:, :, j, :]
        return (gz,)

    return record(out, (z,), rule)


def pairwise_distances(patches, protos):
    """L2 distance of every patch to every prototype: -> (B, K, Q)."""
    if patches.shape[2:] != protos.shape[1:]:
        raise DimensionError(
            f"pairwise_distances: patch shape {patches.shape[2:]} != "
            f"prototype shape {protos.shape[1:]}"
        )
    batch, q_n = patches.shape[:2]
    k_n = protos.shape[0]
    pf = np.ascontiguousarray(patches.data.reshape(batch, q_n, -1))
    rf = np.ascontiguousarray(protos.data.reshape(k_n, -1))
    dist = kernels.pairwise_l2_fwd(pf, rf)
    out = Tensor(dist)

    def rule(g):
        gp, gr = kernels.pairwise_l2_bwd(pf, rf, dist, np.ascontiguousarray(g))
        return gp.reshape(patches.shape), gr.reshape(protos.shape)

    return record(out, (patches, protos), rule)


def similarity(dist, epsilon):
    """Reciprocal-shift similarity 1 / (d + epsilon), entries in (0, 1/eps]."""
    if epsilon <= 0.0:
        raise PreconditionError(f"similarity: epsilon must be > 0, got {epsilon}")
    sim = 1.0 / (dist.data + epsilon)
    out = Tensor(sim)

    def rule(g):
        return (-g * sim * sim,)

    return record(out, (dist,), rule)


def evidence_logits(sim, weights):
    """Per-class evidence: logit_c = sum_{k,q} sim[k,q] * w[k,q,c]."""
    single = sim.data.ndim == 2
    s = sim.data[None] if single else sim.data
    if s.shape[1:] != weights.shape[:2]:
        raise DimensionError(
            f"evidence_logits: similarity grid {s.shape[1:]} does not match "
            f"weight grid {weights.shape[:2]}"
        )
    vals = np.einsum("bkq,kqc->bc", s, weights.data)
    out = Tensor(vals[0] if single else vals)

    def rule(g):
        gb = g[None] if single else g
        gs = np.einsum("bc,kqc->bkq", gb, weights.data)
        gw = np.einsum("bkq,bc->kqc", s, gb)
        return (gs[0] if single else gs), gw

    return record(out, (sim, weights), rule)


def min_over(x, axis):
    """Minimum along one axis; backward routes to the first argmin."""
    vals = x.data.min(axis=axis)
    arg = x.data.argmin(axis=axis)
    out = Tensor(vals)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        return (gx,)

    return record(out, (x,), rule)


def class_masked_min(dist, class_of, labels, other=False):
    """Per-patch minimum over prototypes of the own (or other) class.

    dist: (B,K,Q); class_of: (K,) int; labels: (B,) int -> (B,Q).
    """
    class_of = np.asarray(class_of, dtype=np.int64)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    mask = class_of[None, :] == labels[:, None]
    if other:
        mask = ~mask
    if not mask.any(axis=1).all():
        which = "other-class" if other else "own-class"
        raise PreconditionError(f"class_masked_min: a sample has no {which} prototype")
    masked = np.where(mask[:, :, None], dist.data, np.inf)
    vals = masked.min(axis=1)
    arg = masked.argmin(axis=1)
    out = Tensor(vals)

    def rule(g):
        gx = np.zeros_like(dist.data)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return record(out, (dist,), rule)


def nearest_other_prototype(protos):
    """For each prototype, L2 distance to its nearest distinct prototype: -> (K,).

    Gradient at a zero distance (duplicated prototypes) is zero.
    """
    k_n = protos.shape[0]
    if k_n < 2:
        raise PreconditionError("nearest_other_prototype: needs at least 2 prototypes")
    flat = protos.data.reshape(k_n, -1)
    diff = flat[:, None, :] - flat[None, :, :]
    dmat = np.sqrt(np.einsum("kjm,kjm->kj", diff, diff))
    np.fill_diagonal(dmat, np.inf)
    vals = dmat.min(axis=1)
    arg = dmat.argmin(axis=1)
    out = Tensor(vals)

    def rule(g):
        s = np.where(vals > 0.0, g / np.where(vals > 0.0, vals, 1.0), 0.0)
        delta = s[:, None] * (flat - flat[arg])
        gflat = delta.copy()
        np.add.at(gflat, arg, -delta)
        return (gflat.reshape(protos.shape),)

    return record(out, (protos,), rule)


def mean_all(x):
    """Mean over every element, as a scalar tensor."""
    n = x.size
    out = Tensor(x.data.sum() / n)

    def rule(g):
        return (np.full_like(x.data, float(g) / n),)

    return record(out, (x,), rule)


def neg_log1p(x):
    """-log(1 + x) for a scalar tensor."""
    v = x.item()
    out = Tensor(-np.log1p(v))

    def rule(g):
        return (np.asarray(-float(g) / (1.0 + v)),)

    return record(out, (x,), rule)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def rule(g):
        return (g.reshape(x.shape),)

    return record(out, (x,), rule)


def take_index(x, index):
    """Select one subtensor along axis 0."""
    if not 0 <= index < x.shape[0]:
        raise PreconditionError(f"take_index: {index} out of range [0, {x.shape[0]})")
    out = Tensor(x.data[index])

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record(out, (x,), rule)
