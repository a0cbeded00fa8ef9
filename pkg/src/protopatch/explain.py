"""Instance explanations, prototype grounding, and the two sanity protocols:
substitution (swap input windows for decoded prototypes, re-classify) and
closeness (latent distance between each prototype and its nearest real
training patch)."""

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import PreconditionError, UnsupportedOperationError
from .model import receptive_window


def _softmax_np(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PatchAttribution:
    prototype_id: int
    position: int                 # latent position q
    input_window: tuple           # [start, end) input steps
    contribution: float           # sim[k,q] * w[k,q,predicted]
    prototype_class: int


@dataclass
class Explanation:
    sample_id: int
    predicted_class: int
    true_class: int               # -1 when unknown
    attributions: list            # descending contribution
    overall_distribution: np.ndarray    # (C,)
    patch_distributions: np.ndarray     # (Q, C)
    misclassified: bool


@dataclass
class SubstitutionResult:
    modified: np.ndarray          # (T, ch)
    original_prediction: int
    prediction: int
    replaced_fraction: float      # of the un-padded input
    aligned: bool
    windows: list = field(default_factory=list)   # (q, prototype_id, start, end)


@dataclass
class SanityRow:
    mode: str
    data_replaced_percent: float
    equal_prediction_percent: float
    original_accuracy: float
    modified_accuracy: float


@dataclass
class SanityReport:
    dataset: str
    rows: list                    # best_same_class row, then most_different


@dataclass
class ClosenessEntry:
    variant: str                  # "with_decoder" / "without_decoder"
    mean_distance: float


@dataclass
class ClosenessReport:
    dataset: str
    entries: list


def _forward_grids(model, x):
    """sim (K,Q), logits (C) of one (T,ch) sample, without recording."""
    out = model.forward(Tensor(x), with_reconstruction=False)
    return out.similarities.data, out.logits.data


def explain_sample(model, x, top_r, sample_id=0, true_class=None):
    """Rank every (prototype, position) pair by its share of the predicted
    logit and attach the position-resolved class distributions."""
    sim, logits = _forward_grids(model, x)
    if not np.all(np.isfinite(logits)):
        raise PreconditionError("model produced non-finite logits")
    w = model.weights.w.data
    pred = int(logits.argmax())
    position_evidence = np.einsum("kq,kqc->qc", sim, w)
    contrib = sim * w[:, :, pred]

    k_n, q_n = sim.shape
    flat_order = np.argsort(-contrib, axis=None, kind="stable")
    count = min(top_r, k_n * q_n)
    attributions = []
    for flat in flat_order[:count]:
        k, q = divmod(int(flat), q_n)
        attributions.append(PatchAttribution(
            prototype_id=k,
            position=q,
            input_window=receptive_window(model.config, q),
            contribution=float(contrib[k, q]),
            prototype_class=int(model.bank.class_of[k]),
        ))
    return Explanation(
        sample_id=sample_id,
        predicted_class=pred,
        true_class=-1 if true_class is None else int(true_class),
        attributions=attributions,
        overall_distribution=_softmax_np(logits),
        patch_distributions=_softmax_np(position_evidence),
        misclassified=(true_class is not None and pred != int(true_class)),
    )


def decode_prototype(model, k):
    """Input-space rendering of latent prototype k: (patch_len * 2^blocks, ch)."""
    if not hasattr(model, "decode"):
        raise UnsupportedOperationError("this model has no decoder")
    z = Tensor(model.bank.protos.data[k])
    return model.decode(z).data


def _latent_patch_matrix(model, dataset, chunk=256):
    """Flattened latent windows of every sample: (N, Q, patch_len*C_l)."""
    cfg = model.config
    q_n, length = cfg.num_positions, cfg.patch_len
    out = np.empty((dataset.n_samples, q_n, length * cfg.latent_channels))
    for start in range(0, dataset.n_samples, chunk):
        z = model.encode(Tensor(dataset.samples[start:start + chunk])).data
        for j in range(length):
            out[start:start + len(z), :, j * cfg.latent_channels:(j + 1) * cfg.latent_channels] = \
                z[:, j:j + q_n, :]
    return out


def representative_patch(model, k, dataset):
    """Training patch nearest the latent prototype: (sample id, q, distance).

    Ties break toward the lowest (sample id, q).
    """
    if dataset.n_samples == 0:
        raise PreconditionError("dataset is empty")
    patches = _latent_patch_matrix(model, dataset)
    proto = model.bank.protos.data[k].reshape(-1)
    diff = patches - proto
    dists = np.sqrt(np.einsum("nqm,nqm->nq", diff, diff))
    flat = int(dists.argmin())          # first minimum in row-major order
    sid, q = divmod(flat, dists.shape[1])
    return sid, q, float(dists[sid, q])


def closeness(model, dataset):
    """Mean over prototypes of the representative-patch distance."""
    patches = _latent_patch_matrix(model, dataset).reshape(-1,
        model.config.patch_len * model.config.latent_channels)
    total = 0.0
    for k in range(model.bank.size):
        diff = patches - model.bank.protos.data[k].reshape(-1)
        total += float(np.sqrt(np.einsum("nm,nm->n", diff, diff)).min())
    return total / model.bank.size


def substitute_and_reclassify(model, x, mode="best_same_class", top_r=None,
                              align=True, orig_length=None):
    """Replace the strongest-evidence input windows with decoded prototypes.

    Positions are ranked by |their additive share of the predicted logit|;
    at each selected position the replacing prototype has the largest
    (best_same_class) or smallest (most_different) signed contribution.
    Overlaps resolve in rank order; optional per-channel mean alignment
    removes the offset between the original window and the decoded patch.
    """
    cfg = model.config
    q_n = cfg.num_positions
    if top_r is None:
        top_r = math.ceil(q_n / 2)
    if top_r > q_n:
        warnings.warn(f"top_r {top_r} clipped to {q_n} positions")
        top_r = q_n
    if mode not in ("best_same_class", "most_different"):
        raise PreconditionError(f"unknown substitution mode {mode!r}")
    if orig_length is None:
        orig_length = x.shape[0]

    sim, logits = _forward_grids(model, x)
    pred = int(logits.argmax())
    contrib = sim * model.weights.w.data[:, :, pred]       # (K, Q)
    strength = np.abs(contrib.sum(axis=0))                 # (Q,)
    order = np.argsort(-strength, kind="stable")[:top_r]

    modified = x.copy()
    claimed = np.zeros(x.shape[0], dtype=bool)
    windows = []
    for q in order:
        q = int(q)
        if mode == "best_same_class":
            k = int(contrib[:, q].argmax())
        else:
            k = int(contrib[:, q].argmin())
        start, end = receptive_window(cfg, q)
        decoded = decode_prototype(model, k)
        if align:
            decoded = decoded + (x[start:end].mean(axis=0) - decoded.mean(axis=0))
        free = ~claimed[start:end]
        modified[start:end][free] = decoded[free]
        claimed[start:end] = True
        windows.append((q, k, start, end))

    if windows:
        _, new_logits = _forward_grids(model, modified)
        new_pred = int(new_logits.argmax())
    else:
        new_pred = pred
    fraction = float(claimed[:orig_length].sum()) / orig_length
    return SubstitutionResult(
        modified=modified,
        original_prediction=pred,
        prediction=new_pred,
        replaced_fraction=fraction,
        aligned=align,
        windows=windows,
    )


def sanity_replacement(model, dataset, top_r=None, align=True, threads=1):
    """Aggregate substitution over a test set for both modes (one table row pair)."""
    if dataset.n_samples == 0:
        raise PreconditionError("test set is empty")

    def run_one(args):
        x, mode = args
        return substitute_and_reclassify(
            model, x, mode=mode, top_r=top_r, align=align,
            orig_length=dataset.orig_length,
        )

    rows = []
    for mode in ("best_same_class", "most_different"):
        tasks = [(dataset.samples[i], mode) for i in range(dataset.n_samples)]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run_one, tasks))
        else:
            results = [run_one(t) for t in tasks]
        orig_pred = np.array([r.original_prediction for r in results])
        new_pred = np.array([r.prediction for r in results])
        fractions = np.array([r.replaced_fraction for r in results])
        rows.append(SanityRow(
            mode=mode,
            data_replaced_percent=float(fractions.mean() * 100.0),
            equal_prediction_percent=float((new_pred == orig_pred).mean() * 100.0),
            original_accuracy=float((orig_pred == dataset.labels).mean() * 100.0),
            modified_accuracy=float((new_pred == dataset.labels).mean() * 100.0),
        ))
    return SanityReport(dataset=dataset.name, rows=rows)


# ---------------------------------------------------------------------------
# plot-ready CSV exports

def _fmt(v):
    return repr(float(v))


def write_explanation_dir(directory, x, explanation, substitution=None):
    """One directory per sample: series, attributions, distributions."""
    os.makedirs(directory, exist_ok=True)
    n_ch = x.shape[1]
    modified = substitution.modified if substitution is not None else x
    with open(os.path.join(directory, "series.csv"), "w", encoding="utf-8") as fh:
        cols = ["t"]
        for c in range(n_ch):
            cols += [f"ch{c}_original", f"ch{c}_modified"]
        fh.write(",".join(cols) + "\n")
        for t in range(x.shape[0]):
            row = [str(t)]
            for c in range(n_ch):
                row += [_fmt(x[t, c]), _fmt(modified[t, c])]
            fh.write(",".join(row) + "\n")
    with open(os.path.join(directory, "attributions.csv"), "w", encoding="utf-8") as fh:
        fh.write("rank,prototype_id,class,q,window_start,window_end,contribution\n")
        for rank, att in enumerate(explanation.attributions):
            fh.write(",".join([
                str(rank), str(att.prototype_id), str(att.prototype_class),
                str(att.position), str(att.input_window[0]),
                str(att.input_window[1]), _fmt(att.contribution),
            ]) + "\n")
    with open(os.path.join(directory, "class_distribution.csv"), "w", encoding="utf-8") as fh:
        fh.write("class,probability\n")
        for c, p in enumerate(explanation.overall_distribution):
            fh.write(f"{c},{_fmt(p)}\n")
    with open(os.path.join(directory, "patch_distributions.csv"), "w", encoding="utf-8") as fh:
        n_classes = explanation.patch_distributions.shape[1]
        fh.write("q," + ",".join(f"class_{c}" for c in range(n_classes)) + "\n")
        for q, dist in enumerate(explanation.patch_distributions):
            fh.write(str(q) + "," + ",".join(_fmt(p) for p in dist) + "\n")


def write_sanity_csv(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dataset,mode,data_replaced,equal_prediction,"
                 "original_accuracy,modified_accuracy\n")
        for report in reports:
            for row in report.rows:
                fh.write(",".join([
                    report.dataset, row.mode,
                    _fmt(row.data_replaced_percent),
                    _fmt(row.equal_prediction_percent),
                    _fmt(row.original_accuracy),
                    _fmt(row.modified_accuracy),
                ]) + "\n")


def write_closeness_csv(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dataset,with_decoder,without_decoder,improvement_percent\n")
        for report in reports:
            by_variant = {e.variant: e.mean_distance for e in report.entries}
            with_dec = by_variant.get("with_decoder")
            without_dec = by_variant.get("without_decoder")
            improvement = ""
            if with_dec is not None and without_dec is not None and with_dec > 0:
                improvement = _fmt((without_dec - with_dec) / with_dec * 100.0)
            fh.write(",".join([
                report.dataset,
                _fmt(with_dec) if with_dec is not None else "",
                _fmt(without_dec) if without_dec is not None else "",
                improvement,
            ]) + "\n")
