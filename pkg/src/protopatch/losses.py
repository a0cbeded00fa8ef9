"""Distance measures, component losses and the combined training objective.

Distances are L2 norms between flattened latent patches. The minimum-style
quantities (nearest prototype, nearest patch, nearest own-/other-class
prototype) backpropagate through the first argmin only. The combined loss is

    total = lc*H + lmse*MSE + lp2s*Lp2s + ls2p*Ls2p + ldiv*Ldiv
            + lclst*Lclst + lsep*Lsep

with sample-indexed terms averaged over the batch and the diversity term
added once per step. Lp2s/Ls2p pull prototypes and patches toward each
other, Ldiv = -log(1 + mean nearest-neighbour prototype distance) pushes
prototypes apart, and Lclst/Lsep make them class-specific.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import NumericError, PreconditionError
from .model import PatchGrid


@dataclass
class LossWeights:
    lambda_c: float = 10.0
    lambda_mse: float = 1.0
    lambda_p2s: float = 1.0
    lambda_s2p: float = 1.0
    lambda_div: float = 1.0
    lambda_clst: float = 1.0
    lambda_sep: float = 1.0


COMPONENT_NAMES = ("cross_entropy", "mse", "l_p2s", "l_s2p", "l_div", "l_clst", "l_sep")


@dataclass
class LossBreakdown:
    """The seven weighted components and their sum, as scalar tensors."""

    cross_entropy: Tensor
    mse: Tensor
    l_p2s: Tensor
    l_s2p: Tensor
    l_div: Tensor
    l_clst: Tensor
    l_sep: Tensor
    total: Tensor

    def values(self):
        out = {name: getattr(self, name).item() for name in COMPONENT_NAMES}
        out["total"] = self.total.item()
        return out


def _as_batch_grid(grid):
    patches = grid.patches if isinstance(grid, PatchGrid) else grid
    if patches.data.ndim == 3:
        patches = ops.reshape(patches, (1,) + patches.shape)
    return patches


def _distances(grid, bank):
    return ops.pairwise_distances(_as_batch_grid(grid), bank.protos)


# -- single-element distances ------------------------------------------------

def d_s2p(s, bank):
    """Distance from one patch to its nearest prototype."""
    if bank.size < 1:
        raise PreconditionError("prototype bank is empty")
    dist = ops.pairwise_distances(ops.reshape(s, (1, 1) + s.shape), bank.protos)
    return ops.reshape(ops.min_over(dist, axis=1), ())


def d_p2s(p, grid):
    """Distance from one prototype to the nearest patch of the grid."""
    patches = _as_batch_grid(grid)
    if patches.size == 0:
        raise PreconditionError("patch grid is empty")
    dist = ops.pairwise_distances(patches, ops.reshape(p, (1,) + p.shape))
    flat = ops.reshape(dist, (dist.size,))
    return ops.reshape(ops.min_over(flat, axis=0), ())


def d_p2p(bank, index):
    """Distance from prototype `index` to the nearest *other* prototype."""
    vals = ops.nearest_other_prototype(bank.protos)
    return ops.take_index(vals, index)


def d_clst(s, y, bank):
    """Distance from a patch to the nearest prototype of class y."""
    dist = ops.pairwise_distances(ops.reshape(s, (1, 1) + s.shape), bank.protos)
    mins = ops.class_masked_min(dist, bank.class_of, np.array([y]), other=False)
    return ops.reshape(mins, ())


def d_sep(s, y, bank):
    """Distance from a patch to the nearest prototype of any other class."""
    dist = ops.pairwise_distances(ops.reshape(s, (1, 1) + s.shape), bank.protos)
    mins = ops.class_masked_min(dist, bank.class_of, np.array([y]), other=True)
    return ops.reshape(mins, ())


# -- batch reductions over a precomputed (B, K, Q) distance grid -------------

def p2s_from_distances(dist):
    return ops.mean_all(ops.min_over(dist, axis=2))


def s2p_from_distances(dist):
    return ops.mean_all(ops.min_over(dist, axis=1))


def clst_from_distances(dist, labels, class_of):
    return ops.mean_all(ops.class_masked_min(dist, class_of, labels, other=False))


def sep_from_distances(dist, labels, class_of):
    inner = ops.mean_all(ops.class_masked_min(dist, class_of, labels, other=True))
    return -1.0 * inner


# -- component losses ---------------------------------------------------------

def loss_p2s(grid, bank):
    """Mean over prototypes (and samples) of the nearest-patch distance."""
    return p2s_from_distances(_distances(grid, bank))


def loss_s2p(grid, bank):
    """Mean over patches of the nearest-prototype distance."""
    return s2p_from_distances(_distances(grid, bank))


def loss_div(bank):
    """-log(1 + mean nearest-neighbour distance); <= 0, lower = more diverse."""
    if bank.size < 2:
        raise PreconditionError("diversity needs at least 2 prototypes")
    return ops.neg_log1p(ops.mean_all(ops.nearest_other_prototype(bank.protos)))


def loss_clst(grid, y, bank):
    """Mean over patches of the nearest own-class prototype distance."""
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return clst_from_distances(_distances(grid, bank), labels, bank.class_of)


def loss_sep(grid, y, bank):
    """Negative mean over patches of the nearest other-class distance."""
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return sep_from_distances(_distances(grid, bank), labels, bank.class_of)


def patch_loss(outputs, x, y, bank, weights):
    """Combined objective for one batch of forward outputs.

    `x` is the input batch the reconstruction is compared against; `y` the
    int label array. Raises NumericError naming the first non-finite
    component.
    """
    labels = np.atleast_1d(np.asarray(y, dtype=np.int64))
    ce = ops.cross_entropy(outputs.logits, labels)
    if outputs.reconstruction is not None:
        mse_term = ops.mse(outputs.reconstruction, x)
    else:
        mse_term = Tensor(0.0)
    dist = outputs.distances
    if dist.data.ndim == 2:
        dist = ops.reshape(dist, (1,) + dist.shape)
    p2s = p2s_from_distances(dist)
    s2p = s2p_from_distances(dist)
    div = loss_div(bank)
    clst = clst_from_distances(dist, labels, bank.class_of)
    sep = sep_from_distances(dist, labels, bank.class_of)

    total = (
        weights.lambda_c * ce
        + weights.lambda_mse * mse_term
        + weights.lambda_p2s * p2s
        + weights.lambda_s2p * s2p
        + weights.lambda_div * div
        + weights.lambda_clst * clst
        + weights.lambda_sep * sep
    )
    breakdown = LossBreakdown(
        cross_entropy=ce, mse=mse_term, l_p2s=p2s, l_s2p=s2p,
        l_div=div, l_clst=clst, l_sep=sep, total=total,
    )
    for name in COMPONENT_NAMES:
        if not np.isfinite(getattr(breakdown, name).item()):
            raise NumericError(f"loss component {name} is non-finite")
    return breakdown
