"""Dataset ingestion, synthesis, normalization, padding and splits.

File formats:
  * label-first rows, tab or comma separated, one line per sample
    (single-channel series);
  * ``sample,label,channel,v0,v1,...`` header with one row per
    (sample, channel) for multichannel series.

All randomness is drawn from counter-based Philox streams keyed by
(seed, stream id), so every consumer of a seed gets an independent,
replayable stream.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, PreconditionError

# fixed stream ids hung off the single user seed
STREAM_DATA = 0xD0
STREAM_TEST_SPLIT = 0xA0
STREAM_VAL_SPLIT = 0xA1
STREAM_INIT = 0xB0
STREAM_SHUFFLE_STAGE1 = 0xC0
STREAM_SHUFFLE_STAGE2 = 0xC1
STREAM_SHUFFLE_BASELINE = 0xC2


def stream_rng(seed, stream, counter=0):
    """Independent generator for (seed, stream), optionally advanced by counter."""
    bitgen = np.random.Philox(
        key=np.array([seed, stream], dtype=np.uint64),
        counter=np.array([0, 0, 0, counter], dtype=np.uint64),
    )
    return np.random.Generator(bitgen)


@dataclass
class Dataset:
    """A fixed-length labelled collection of multichannel series."""

    samples: np.ndarray            # (N, T, C) float64
    labels: np.ndarray             # (N,) int64
    class_count: int
    name: str = "dataset"
    orig_length: int = 0           # time steps before padding; 0 -> current T
    label_mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 3:
            raise PreconditionError(
                f"samples must be (n, time, ch), got {self.samples.shape}"
            )
        if self.labels.shape != (self.samples.shape[0],):
            raise PreconditionError("one label per sample required")
        if self.orig_length == 0:
            self.orig_length = self.samples.shape[1]
        counts = np.bincount(self.labels, minlength=self.class_count)
        if self.class_count < 1 or (counts == 0).any():
            raise PreconditionError("every class needs at least one sample")

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def length(self):
        return self.samples.shape[1]

    @property
    def channels(self):
        return self.samples.shape[2]


def _remap_labels(raw):
    uniq = sorted(set(raw))
    mapping = {orig: i for i, orig in enumerate(uniq)}
    ids = np.array([mapping[v] for v in raw], dtype=np.int64)
    return ids, mapping


def load_ucr_tsv(path):
    """Load label-first rows (tab or comma separated), one line per sample."""
    rows, raw_labels = [], []
    t_len = None
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            sep = "\t" if "\t" in line else ","
            parts = [p for p in line.split(sep) if p.strip() != ""]
            try:
                nums = [float(p) for p in parts]
            except ValueError:
                raise ParseError("unparseable number", line=ln) from None
            if len(nums) < 2:
                raise ParseError("need a label and at least one value", line=ln)
            if t_len is None:
                t_len = len(nums) - 1
            elif len(nums) - 1 != t_len:
                raise ParseError(
                    f"ragged row: expected {t_len} values, got {len(nums) - 1}",
                    line=ln,
                )
            raw_labels.append(nums[0])
            rows.append(nums[1:])
    if not rows:
        raise ParseError(f"{path}: no samples found")
    ids, mapping = _remap_labels(raw_labels)
    samples = np.asarray(rows, dtype=np.float64)[:, :, None]
    return Dataset(samples, ids, len(mapping), name=str(path), label_mapping=mapping)


def load_multichannel_csv(path):
    """Load ``sample,label,channel,v0,...`` rows, one per (sample, channel)."""
    per_sample = {}
    sample_labels = {}
    t_len = None
    with open(path, "r", encoding="utf-8") as fh:
        header = None
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if header is None:
                header = line.split(",")
                if header[:3] != ["sample", "label", "channel"]:
                    raise ParseError(
                        "header must start with sample,label,channel", line=ln
                    )
                continue
            parts = line.split(",")
            if len(parts) < 4:
                raise ParseError("need sample,label,channel and values", line=ln)
            try:
                sid = int(parts[0])
                label = float(parts[1])
                chan = int(parts[2])
                values = [float(p) for p in parts[3:]]
            except ValueError:
                raise ParseError("unparseable number", line=ln) from None
            if t_len is None:
                t_len = len(values)
            elif len(values) != t_len:
                raise ParseError(
                    f"ragged row: expected {t_len} values, got {len(values)}",
                    line=ln,
                )
            if sid in sample_labels and sample_labels[sid] != label:
                raise ParseError(f"sample {sid} has conflicting labels", line=ln)
            sample_labels[sid] = label
            if chan in per_sample.setdefault(sid, {}):
                raise ParseError(f"duplicate channel {chan} for sample {sid}", line=ln)
            per_sample[sid][chan] = values
    if not per_sample:
        raise ParseError(f"{path}: no samples found")
    n_ch = max(max(chans) for chans in per_sample.values()) + 1
    sids = sorted(per_sample)
    samples = np.empty((len(sids), t_len, n_ch), dtype=np.float64)
    for i, sid in enumerate(sids):
        chans = per_sample[sid]
        for c in range(n_ch):
            if c not in chans:
                raise ParseError(f"sample {sid} is missing channel {c}")
            samples[i, :, c] = chans[c]
    ids, mapping = _remap_labels([sample_labels[sid] for sid in sids])
    return Dataset(samples, ids, len(mapping), name=str(path), label_mapping=mapping)


def load_any(path):
    """Dispatch on the header line: multichannel csv or label-first rows."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.startswith("sample,label,channel"):
        return load_multichannel_csv(path)
    return load_ucr_tsv(path)


def write_ucr_tsv(dataset, path):
    if dataset.channels != 1:
        raise PreconditionError("label-first format holds single-channel series only")
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in zip(dataset.samples, dataset.labels):
            vals = "\t".join(f"{v:.17g}" for v in x[:, 0])
            fh.write(f"{y}\t{vals}\n")


def write_multichannel_csv(dataset, path):
    t_len = dataset.length
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sample,label,channel," + ",".join(f"v{i}" for i in range(t_len)) + "\n")
        for sid, (x, y) in enumerate(zip(dataset.samples, dataset.labels)):
            for c in range(dataset.channels):
                vals = ",".join(f"{v:.17g}" for v in x[:, c])
                fh.write(f"{sid},{y},{c},{vals}\n")


@dataclass
class SyntheticAnomalyConfig:
    """Two-class point-anomaly task: 50 steps, 3 channels."""

    n_samples: int = 2000
    length: int = 50
    channels: int = 3
    anomaly_magnitude: float = 4.0   # in units of the channel's std
    seed: int = 0


def generate_anomaly(config):
    """Smooth two-sinusoid channels; positive samples get one shifted step.

    The two frequency bands are kept disjoint so the base signal can never
    cancel to near zero, which keeps every non-anomalous step comfortably
    under |z| = 3 while the injected step lands above it.
    """
    n, length, n_ch = config.n_samples, config.length, config.channels
    rng = stream_rng(config.seed, STREAM_DATA)
    t = np.arange(length, dtype=np.float64) / length
    samples = np.empty((n, length, n_ch))
    labels = np.arange(n, dtype=np.int64) % 2
    for i in range(n):
        for c in range(n_ch):
            f1 = rng.uniform(1.0, 2.0)
            f2 = rng.uniform(2.5, 4.0)
            ph1, ph2 = rng.uniform(0.0, 2.0 * np.pi, size=2)
            base = np.sin(2 * np.pi * f1 * t + ph1) + np.sin(2 * np.pi * f2 * t + ph2)
            noise = rng.normal(0.0, 0.1 * base.std(), size=length)
            samples[i, :, c] = base + noise
        if labels[i] == 1:
            c = int(rng.integers(n_ch))
            step = int(rng.integers(length))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            samples[i, step, c] += sign * config.anomaly_magnitude * samples[i, :, c].std()
    return Dataset(samples, labels, 2, name="anomaly")


def split(dataset, fraction, seed, stream=STREAM_VAL_SPLIT):
    """Stratified split into (rest, held_out); held_out gets `fraction`."""
    if not 0.0 < fraction < 1.0:
        raise PreconditionError(f"fraction must be in (0, 1), got {fraction}")
    rng = stream_rng(seed, stream)
    rest_idx, held_idx = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < 2:
            raise PreconditionError(f"class {c} has fewer than 2 samples")
        perm = rng.permutation(idx.size)
        n_held = int(round(fraction * idx.size))
        n_held = min(max(n_held, 1), idx.size - 1)
        held_idx.extend(idx[perm[:n_held]])
        rest_idx.extend(idx[perm[n_held:]])
    return _subset(dataset, sorted(rest_idx)), _subset(dataset, sorted(held_idx))


def _subset(dataset, indices):
    idx = np.asarray(indices, dtype=np.int64)
    return Dataset(
        dataset.samples[idx],
        dataset.labels[idx],
        dataset.class_count,
        name=dataset.name,
        orig_length=dataset.orig_length,
        label_mapping=dict(dataset.label_mapping),
    )


@dataclass
class ChannelStats:
    mean: np.ndarray   # (C,)
    std: np.ndarray    # (C,)


def channel_stats(dataset):
    """Per-channel mean/std over all samples and time steps."""
    flat = dataset.samples.reshape(-1, dataset.channels)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    return ChannelStats(mean=mean, std=np.where(std > 0.0, std, 1.0))


def znormalize(dataset, stats):
    normed = (dataset.samples - stats.mean) / stats.std
    return Dataset(
        normed,
        dataset.labels,
        dataset.class_count,
        name=dataset.name,
        orig_length=dataset.orig_length,
        label_mapping=dict(dataset.label_mapping),
    )


def pad_to_multiple(dataset, multiple):
    """Right-pad with the last value so time is a multiple of `multiple`.

    The pre-padding length is kept in orig_length; padded steps never alter
    original values and are excluded from replacement accounting downstream.
    """
    t_len = dataset.length
    target = int(math.ceil(t_len / multiple)) * multiple
    if target == t_len:
        return dataset
    tail = np.repeat(dataset.samples[:, -1:, :], target - t_len, axis=1)
    padded = np.concatenate([dataset.samples, tail], axis=1)
    return Dataset(
        padded,
        dataset.labels,
        dataset.class_count,
        name=dataset.name,
        orig_length=t_len,
        label_mapping=dict(dataset.label_mapping),
    )
