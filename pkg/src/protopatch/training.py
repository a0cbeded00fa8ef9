"""Two-stage training: features and prototypes first with the class weights
frozen, then the class weights alone with everything else frozen.

Stage 2 optimizes only the classification term: every other component of
the combined loss is constant in the weight tensor, so the gradients agree
exactly (asserted by the test suite) and the similarity grids can be
precomputed once. Convergence means `patience` epochs without improvement
of the validation total loss; the best-validation parameters are restored
afterwards. All shuffling comes from counter-based streams keyed off the
config seed, so a rerun is bit-identical.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tape, Tensor
from .data import (
    STREAM_SHUFFLE_BASELINE,
    STREAM_SHUFFLE_STAGE1,
    STREAM_SHUFFLE_STAGE2,
    split,
    stream_rng,
)
from .errors import DimensionError, NumericError, PreconditionError, TrainingError
from .losses import COMPONENT_NAMES, LossWeights, patch_loss


@dataclass
class TrainConfig:
    seed: int = 7
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs_stage1: int = 200
    max_epochs_stage2: int = 50
    patience: int = 15
    validation_fraction: float = 0.2
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise PreconditionError("validation_fraction must be in (0, 1)")
        if self.patience < 1:
            raise PreconditionError("patience must be >= 1")
        if self.batch_size < 1:
            raise PreconditionError("batch_size must be >= 1")


class Adam:
    """Adaptive-moment estimation with bias correction."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}"
                )
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    train: dict
    val: dict
    train_acc: float
    val_acc: float


@dataclass
class TrainReport:
    records: list
    stage1_epochs: int
    stage2_epochs: int
    wall_seconds: float
    checkpoint_path: str = ""
    batch_components: list = field(default_factory=list)
    test_accuracy: float = float("nan")


def report_to_csv(report, path):
    cols = ["stage", "epoch"]
    cols += [f"train_{n}" for n in COMPONENT_NAMES] + ["train_total"]
    cols += [f"val_{n}" for n in COMPONENT_NAMES] + ["val_total"]
    cols += ["train_acc", "val_acc"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for rec in report.records:
            row = [str(rec.stage), str(rec.epoch)]
            row += [repr(rec.train.get(n, 0.0)) for n in COMPONENT_NAMES]
            row += [repr(rec.train.get("total", 0.0))]
            row += [repr(rec.val.get(n, 0.0)) for n in COMPONENT_NAMES]
            row += [repr(rec.val.get("total", 0.0))]
            row += [repr(rec.train_acc), repr(rec.val_acc)]
            fh.write(",".join(row) + "\n")


class _Snapshot:
    def __init__(self, params):
        self._params = dict(params)
        self.capture()

    def capture(self):
        self._copies = {k: t.data.copy() for k, t in self._params.items()}

    def restore(self):
        for k, t in self._params.items():
            t.data = self._copies[k].copy()


def _batch_indices(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _weighted_mean(sums, weights_total):
    return {k: v / weights_total for k, v in sums.items()}


def evaluate_prototype(model, dataset, weights, chunk=256):
    """Full loss breakdown and accuracy over a dataset, no recording."""
    sums = {name: 0.0 for name in COMPONENT_NAMES}
    sums["total"] = 0.0
    correct = 0
    include_recon = weights.lambda_mse != 0.0
    for start in range(0, dataset.n_samples, chunk):
        xb = Tensor(dataset.samples[start:start + chunk])
        yb = dataset.labels[start:start + chunk]
        out = model.forward(xb, with_reconstruction=include_recon)
        bd = patch_loss(out, xb, yb, model.bank, weights)
        vals = bd.values()
        for k, v in vals.items():
            sums[k] += v * len(yb)
        correct += int((out.logits.data.argmax(axis=1) == yb).sum())
    comps = _weighted_mean(sums, dataset.n_samples)
    return comps, correct / dataset.n_samples


def evaluate_accuracy(model, dataset, chunk=256):
    correct = 0
    for start in range(0, dataset.n_samples, chunk):
        xb = Tensor(dataset.samples[start:start + chunk])
        if model.kind == "prototype":
            logits = model.forward(xb, with_reconstruction=False).logits
        else:
            logits = model.forward(xb)
        correct += int(
            (logits.data.argmax(axis=1) == dataset.labels[start:start + chunk]).sum()
        )
    return correct / dataset.n_samples


def _resolve_split(dataset, config, val_dataset):
    if val_dataset is not None:
        return dataset, val_dataset
    return split(dataset, config.validation_fraction, config.seed)


def train_stage1(model, dataset, config, val_dataset=None, start_epoch=0,
                 batch_log=None):
    """Train everything except the prototype weights; returns epoch records."""
    config.validate()
    train_ds, val_ds = _resolve_split(dataset, config, val_dataset)
    if train_ds.n_samples == 0:
        raise TrainingError("empty training set")
    params = {n: t for n, t in model.params().items() if n != "proto_weights"}
    opt = Adam(params, config.learning_rate)
    best = _Snapshot(params)
    best_val = float("inf")
    since_improve = 0
    records = []
    include_recon = config.loss_weights.lambda_mse != 0.0

    for e in range(config.max_epochs_stage1):
        rng = stream_rng(config.seed, STREAM_SHUFFLE_STAGE1, counter=e)
        sums = {name: 0.0 for name in COMPONENT_NAMES}
        sums["total"] = 0.0
        correct = 0
        for idx in _batch_indices(train_ds.n_samples, config.batch_size, rng):
            xb = Tensor(train_ds.samples[idx])
            yb = train_ds.labels[idx]
            try:
                with Tape() as tape:
                    out = model.forward(xb, with_reconstruction=include_recon)
                    bd = patch_loss(out, xb, yb, model.bank, config.loss_weights)
                    tape.backward(bd.total)
            except NumericError as exc:
                raise TrainingError(str(exc), epoch=start_epoch + e) from exc
            opt.step()
            opt.zero_grad()
            vals = bd.values()
            if batch_log is not None:
                batch_log.append(vals)
            for k, v in vals.items():
                sums[k] += v * len(yb)
            correct += int((out.logits.data.argmax(axis=1) == yb).sum())
        train_comp = _weighted_mean(sums, train_ds.n_samples)
        train_acc = correct / train_ds.n_samples
        val_comp, val_acc = evaluate_prototype(model, val_ds, config.loss_weights)
        records.append(EpochRecord(1, start_epoch + e, train_comp, val_comp,
                                   train_acc, val_acc))
        if val_comp["total"] < best_val:
            best_val = val_comp["total"]
            best.capture()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break
    best.restore()
    return records


def _precompute_similarities(model, dataset, chunk=256):
    grids = np.empty(
        (dataset.n_samples, model.config.num_prototypes, model.config.num_positions)
    )
    for start in range(0, dataset.n_samples, chunk):
        xb = Tensor(dataset.samples[start:start + chunk])
        out = model.forward(xb, with_reconstruction=False)
        grids[start:start + len(out.logits.data)] = out.similarities.data
    return grids


def _ce_acc_from_grids(grids, w, labels):
    logits = np.einsum("nkq,kqc->nc", grids, w)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ce = float((lse - z[np.arange(len(labels)), labels]).mean())
    acc = float((logits.argmax(axis=1) == labels).mean())
    return ce, acc


def train_stage2(model, dataset, config, val_dataset=None, start_epoch=0,
                 batch_log=None):
    """Train only the prototype weights on the classification term.

    All other loss components are constant in the weight tensor with the
    rest of the network frozen; they are evaluated once and carried through
    the epoch records unchanged.
    """
    config.validate()
    train_ds, val_ds = _resolve_split(dataset, config, val_dataset)
    w = model.weights.w
    opt = Adam({"proto_weights": w}, config.learning_rate)
    best = _Snapshot({"proto_weights": w})
    best_val = float("inf")
    since_improve = 0
    records = []
    lam_c = config.loss_weights.lambda_c

    grids_train = _precompute_similarities(model, train_ds)
    grids_val = _precompute_similarities(model, val_ds)
    train_const, _ = evaluate_prototype(model, train_ds, config.loss_weights)
    val_const, _ = evaluate_prototype(model, val_ds, config.loss_weights)
    train_rest = train_const["total"] - lam_c * train_const["cross_entropy"]
    val_rest = val_const["total"] - lam_c * val_const["cross_entropy"]

    for e in range(config.max_epochs_stage2):
        rng = stream_rng(config.seed, STREAM_SHUFFLE_STAGE2, counter=e)
        ce_sum = 0.0
        correct = 0
        for idx in _batch_indices(train_ds.n_samples, config.batch_size, rng):
            sims = Tensor(grids_train[idx])
            yb = train_ds.labels[idx]
            try:
                with Tape() as tape:
                    logits = ops.evidence_logits(sims, w)
                    ce = ops.cross_entropy(logits, yb)
                    loss = lam_c * ce
                    tape.backward(loss)
            except NumericError as exc:
                raise TrainingError(str(exc), epoch=start_epoch + e) from exc
            opt.step()
            opt.zero_grad()
            ce_val = ce.item()
            if not np.isfinite(ce_val):
                raise TrainingError("non-finite loss", epoch=start_epoch + e)
            ce_sum += ce_val * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            if batch_log is not None:
                vals = dict(train_const)
                vals["cross_entropy"] = ce_val
                vals["total"] = lam_c * ce_val + train_rest
                batch_log.append(vals)
        train_ce = ce_sum / train_ds.n_samples
        train_comp = dict(train_const)
        train_comp["cross_entropy"] = train_ce
        train_comp["total"] = lam_c * train_ce + train_rest
        val_ce, val_acc = _ce_acc_from_grids(grids_val, w.data, val_ds.labels)
        val_comp = dict(val_const)
        val_comp["cross_entropy"] = val_ce
        val_comp["total"] = lam_c * val_ce + val_rest
        records.append(EpochRecord(2, start_epoch + e, train_comp, val_comp,
                                   correct / train_ds.n_samples, val_acc))
        if val_comp["total"] < best_val:
            best_val = val_comp["total"]
            best.capture()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break
    best.restore()
    return records


def train_two_stage(model, dataset, config, val_dataset=None):
    """Stage 1 then stage 2; returns the combined TrainReport."""
    t0 = time.perf_counter()
    train_ds, val_ds = _resolve_split(dataset, config, val_dataset)
    batch_log = []
    rec1 = train_stage1(model, train_ds, config, val_dataset=val_ds,
                        start_epoch=0, batch_log=batch_log)
    rec2 = train_stage2(model, train_ds, config, val_dataset=val_ds,
                        start_epoch=len(rec1), batch_log=batch_log)
    return TrainReport(
        records=rec1 + rec2,
        stage1_epochs=len(rec1),
        stage2_epochs=len(rec2),
        wall_seconds=time.perf_counter() - t0,
        batch_components=batch_log,
    )


def train_baseline(model, dataset, config, val_dataset=None):
    """Single-stage cross-entropy training of the plain convolutional net."""
    config.validate()
    t0 = time.perf_counter()
    train_ds, val_ds = _resolve_split(dataset, config, val_dataset)
    params = model.params()
    opt = Adam(params, config.learning_rate)
    best = _Snapshot(params)
    best_val = float("inf")
    since_improve = 0
    records = []
    batch_log = []

    for e in range(config.max_epochs_stage1):
        rng = stream_rng(config.seed, STREAM_SHUFFLE_BASELINE, counter=e)
        ce_sum = 0.0
        correct = 0
        for idx in _batch_indices(train_ds.n_samples, config.batch_size, rng):
            xb = Tensor(train_ds.samples[idx])
            yb = train_ds.labels[idx]
            try:
                with Tape() as tape:
                    logits = model.forward(xb)
                    ce = ops.cross_entropy(logits, yb)
                    tape.backward(ce)
            except NumericError as exc:
                raise TrainingError(str(exc), epoch=e) from exc
            opt.step()
            opt.zero_grad()
            ce_val = ce.item()
            if not np.isfinite(ce_val):
                raise TrainingError("non-finite loss", epoch=e)
            ce_sum += ce_val * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            batch_log.append({"cross_entropy": ce_val, "total": ce_val})
        val_ce_sum = 0.0
        val_correct = 0
        for start in range(0, val_ds.n_samples, 256):
            xb = Tensor(val_ds.samples[start:start + 256])
            yb = val_ds.labels[start:start + 256]
            logits = model.forward(xb)
            val_ce_sum += ops.cross_entropy(logits, yb).item() * len(yb)
            val_correct += int((logits.data.argmax(axis=1) == yb).sum())
        val_ce = val_ce_sum / val_ds.n_samples
        records.append(EpochRecord(
            1, e,
            {"cross_entropy": ce_sum / train_ds.n_samples,
             "total": ce_sum / train_ds.n_samples},
            {"cross_entropy": val_ce, "total": val_ce},
            correct / train_ds.n_samples,
            val_correct / val_ds.n_samples,
        ))
        if val_ce < best_val:
            best_val = val_ce
            best.capture()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break
    best.restore()
    return TrainReport(
        records=records,
        stage1_epochs=len(records),
        stage2_epochs=0,
        wall_seconds=time.perf_counter() - t0,
        batch_components=batch_log,
    )
