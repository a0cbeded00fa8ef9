"""Command-line front end: train, eval, explain, sanity, gen-data.

Configuration is plain ``key=value`` lines (``#`` comments); command-line
flags override file values. Every run directory receives the effective
configuration plus a content hash of its input data, so a run can be
replayed bit-identically from the directory alone. Exit codes: 0 success,
1 parse/config error, 2 training failure.
"""

import argparse
import hashlib
import math
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    STREAM_INIT,
    STREAM_TEST_SPLIT,
    STREAM_VAL_SPLIT,
    SyntheticAnomalyConfig,
    channel_stats,
    generate_anomaly,
    load_any,
    pad_to_multiple,
    split,
    stream_rng,
    write_multichannel_csv,
    znormalize,
)
from .errors import (
    CheckpointError,
    NumericError,
    ParseError,
    PreconditionError,
    TrainingError,
)
from .explain import (
    ClosenessEntry,
    ClosenessReport,
    closeness,
    explain_sample,
    sanity_replacement,
    substitute_and_reclassify,
    write_closeness_csv,
    write_explanation_dir,
    write_sanity_csv,
)
from .losses import LossWeights
from .model import ConvBaseline, ModelConfig, PatchPrototypeNet
from .training import (
    TrainConfig,
    evaluate_accuracy,
    report_to_csv,
    train_baseline,
    train_two_stage,
)


@dataclass
class RunConfig:
    """Flat key=value view of every tunable."""

    # model
    conv_blocks: int = 3
    latent_channels: int = 16
    patch_len: int = 2
    prototypes_per_class: int = 4
    epsilon_sim: float = 1e-4
    # training
    seed: int = 7
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs_stage1: int = 200
    max_epochs_stage2: int = 50
    patience: int = 15
    validation_fraction: float = 0.2
    threads: int = 1
    # loss weights
    lambda_c: float = 10.0
    lambda_mse: float = 1.0
    lambda_p2s: float = 1.0
    lambda_s2p: float = 1.0
    lambda_div: float = 1.0
    lambda_clst: float = 1.0
    lambda_sep: float = 1.0
    # synthetic data
    n_samples: int = 2000
    synthetic_length: int = 50
    synthetic_channels: int = 3
    anomaly_magnitude: float = 4.0
    test_fraction: float = 0.25
    # explanation machinery; 0 means "use the model default"
    top_r: int = 0

    def loss_weights(self):
        return LossWeights(
            lambda_c=self.lambda_c, lambda_mse=self.lambda_mse,
            lambda_p2s=self.lambda_p2s, lambda_s2p=self.lambda_s2p,
            lambda_div=self.lambda_div, lambda_clst=self.lambda_clst,
            lambda_sep=self.lambda_sep,
        )

    def train_config(self):
        return TrainConfig(
            seed=self.seed, batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_epochs_stage1=self.max_epochs_stage1,
            max_epochs_stage2=self.max_epochs_stage2,
            patience=self.patience,
            validation_fraction=self.validation_fraction,
            loss_weights=self.loss_weights(),
        )

    def synthetic_config(self):
        return SyntheticAnomalyConfig(
            n_samples=self.n_samples, length=self.synthetic_length,
            channels=self.synthetic_channels,
            anomaly_magnitude=self.anomaly_magnitude, seed=self.seed,
        )


def load_run_config(path=None):
    cfg = RunConfig()
    if path is None:
        return cfg
    by_name = {f.name: f for f in fields(RunConfig)}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"expected key=value, got {line!r}", line=ln)
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in by_name:
                raise ParseError(f"unknown configuration key {key!r}", line=ln)
            caster = by_name[key].type
            try:
                setattr(cfg, key, int(value) if caster is int else float(value))
            except ValueError:
                raise ParseError(f"bad value for {key}: {value!r}", line=ln) from None
    return cfg


def _apply_overrides(cfg, args):
    for name in ("seed", "threads", "top_r"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _sha256_dataset(dataset):
    digest = hashlib.sha256()
    digest.update(dataset.samples.tobytes())
    digest.update(dataset.labels.tobytes())
    return digest.hexdigest()


def _sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_effective_config(path, cfg, extra):
    lines = [f"{k}={v}" for k, v in sorted(extra.items())]
    lines += [f"{f.name}={getattr(cfg, f.name)}" for f in fields(RunConfig)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_input(args, cfg):
    """Returns (train+val raw, test raw or None, content hash, name)."""
    if getattr(args, "synthetic_anomaly", False) and getattr(args, "data", None):
        raise PreconditionError("give either --data or --synthetic-anomaly, not both")
    if getattr(args, "synthetic_anomaly", False):
        full = generate_anomaly(cfg.synthetic_config())
        trainval, test = split(full, cfg.test_fraction, cfg.seed,
                               stream=STREAM_TEST_SPLIT)
        return trainval, test, _sha256_dataset(full), full.name
    if getattr(args, "data", None):
        ds = load_any(args.data)
        name = os.path.splitext(os.path.basename(args.data))[0]
        ds.name = name
        return ds, None, _sha256_file(args.data), name
    raise PreconditionError("a dataset is required: --data PATH or --synthetic-anomaly")


def _prepare_for_training(cfg, trainval, test):
    """Validation split, train-only normalization statistics, padding."""
    train_raw, val_raw = split(trainval, cfg.validation_fraction, cfg.seed,
                               stream=STREAM_VAL_SPLIT)
    stats = channel_stats(train_raw)
    multiple = 2 ** cfg.conv_blocks
    train = pad_to_multiple(znormalize(train_raw, stats), multiple)
    val = pad_to_multiple(znormalize(val_raw, stats), multiple)
    test_p = None
    if test is not None:
        test_p = pad_to_multiple(znormalize(test, stats), multiple)
    return train, val, test_p, stats


def _write_accuracy_csv(path, model_kind, dataset_name, accuracy):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("model,dataset,accuracy\n")
        fh.write(f"{model_kind},{dataset_name},{accuracy!r}\n")


def cmd_train(args):
    cfg = _apply_overrides(load_run_config(args.config), args)
    trainval, test, data_hash, name = _load_input(args, cfg)
    train, val, test_p, stats = _prepare_for_training(cfg, trainval, test)
    model_config = ModelConfig(
        input_length=train.length,
        input_channels=train.channels,
        num_classes=train.class_count,
        conv_blocks=cfg.conv_blocks,
        latent_channels=cfg.latent_channels,
        patch_len=cfg.patch_len,
        prototypes_per_class=cfg.prototypes_per_class,
        epsilon_sim=cfg.epsilon_sim,
    )
    rng = stream_rng(cfg.seed, STREAM_INIT)
    train_config = cfg.train_config()
    if args.baseline:
        model = ConvBaseline(model_config, rng)
        report = train_baseline(model, train, train_config, val_dataset=val)
    else:
        model = PatchPrototypeNet(model_config, rng)
        report = train_two_stage(model, train, train_config, val_dataset=val)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(ckpt_path, model, stats, orig_length=train.orig_length)
    report.checkpoint_path = ckpt_path
    report_to_csv(report, os.path.join(args.out, "report.csv"))
    if test_p is not None:
        report.test_accuracy = evaluate_accuracy(model, test_p)
        _write_accuracy_csv(os.path.join(args.out, "accuracy.csv"),
                            model.kind, name, report.test_accuracy)
    _write_effective_config(
        os.path.join(args.out, "config.txt"), cfg,
        {"command": "train", "dataset": name, "input_sha256": data_hash,
         "model_kind": model.kind, "input_length": train.length,
         "input_channels": train.channels, "num_classes": train.class_count},
    )
    last = report.records[-1]
    print(f"trained {model.kind} model for {len(report.records)} epochs "
          f"({report.wall_seconds:.1f}s), final val_acc={last.val_acc:.4f}")
    if test_p is not None:
        print(f"test accuracy: {report.test_accuracy:.4f}")
    return 0


def _load_eval_data(args, cfg, model, stats):
    """Test-role dataset, normalized with the checkpoint statistics."""
    if getattr(args, "synthetic_anomaly", False):
        full = generate_anomaly(cfg.synthetic_config())
        _, test = split(full, cfg.test_fraction, cfg.seed, stream=STREAM_TEST_SPLIT)
        ds = test
    elif getattr(args, "data", None):
        ds = load_any(args.data)
        ds.name = os.path.splitext(os.path.basename(args.data))[0]
    else:
        raise PreconditionError("a dataset is required: --data PATH or --synthetic-anomaly")
    mc = model.config
    if ds.channels != mc.input_channels:
        raise CheckpointError(
            f"checkpoint expects {mc.input_channels} channels, data has {ds.channels}"
        )
    if ds.class_count != mc.num_classes:
        raise CheckpointError(
            f"checkpoint expects {mc.num_classes} classes, data has {ds.class_count}"
        )
    prepared = pad_to_multiple(znormalize(ds, stats), 2 ** mc.conv_blocks)
    if prepared.length != mc.input_length:
        raise CheckpointError(
            f"checkpoint expects length {mc.input_length}, data pads to "
            f"{prepared.length}"
        )
    return prepared


def cmd_eval(args):
    cfg = _apply_overrides(load_run_config(args.config), args)
    model, stats, _ = load_checkpoint(args.checkpoint)
    dataset = _load_eval_data(args, cfg, model, stats)
    accuracy = evaluate_accuracy(model, dataset)
    os.makedirs(args.out, exist_ok=True)
    _write_accuracy_csv(os.path.join(args.out, "accuracy.csv"),
                        model.kind, dataset.name, accuracy)
    print(f"{model.kind} accuracy on {dataset.name}: {accuracy:.4f}")
    return 0


def _require_prototype(model):
    if model.kind != "prototype":
        raise CheckpointError("this command needs a prototype-model checkpoint")


def cmd_explain(args):
    cfg = _apply_overrides(load_run_config(args.config), args)
    model, stats, _ = load_checkpoint(args.checkpoint)
    _require_prototype(model)
    dataset = _load_eval_data(args, cfg, model, stats)
    if not args.samples:
        raise PreconditionError("--samples LIST is required")
    try:
        ids = [int(s) for s in args.samples.split(",") if s.strip() != ""]
    except ValueError:
        raise PreconditionError(f"bad --samples list {args.samples!r}") from None
    bad = [i for i in ids if not 0 <= i < dataset.n_samples]
    if bad:
        raise PreconditionError(f"sample ids out of range: {bad}")
    q_n = model.config.num_positions
    k_n = model.config.num_prototypes
    attr_top = cfg.top_r if cfg.top_r > 0 else k_n * q_n
    sub_top = cfg.top_r if cfg.top_r > 0 else None
    os.makedirs(args.out, exist_ok=True)
    for sid in ids:
        x = dataset.samples[sid]
        explanation = explain_sample(model, x, attr_top, sample_id=sid,
                                     true_class=int(dataset.labels[sid]))
        substitution = substitute_and_reclassify(
            model, x, mode="best_same_class", top_r=sub_top,
            orig_length=dataset.orig_length,
        )
        write_explanation_dir(os.path.join(args.out, f"sample_{sid}"),
                              x, explanation, substitution)
    print(f"wrote {len(ids)} explanation directories to {args.out}")
    return 0


def cmd_sanity(args):
    cfg = _apply_overrides(load_run_config(args.config), args)
    model, stats, _ = load_checkpoint(args.checkpoint)
    _require_prototype(model)
    test = _load_eval_data(args, cfg, model, stats)

    # the closeness protocol scans *training* patches
    if getattr(args, "synthetic_anomaly", False):
        full = generate_anomaly(cfg.synthetic_config())
        trainval, _ = split(full, cfg.test_fraction, cfg.seed, stream=STREAM_TEST_SPLIT)
        train_raw, _ = split(trainval, cfg.validation_fraction, cfg.seed,
                             stream=STREAM_VAL_SPLIT)
    elif args.train_data:
        train_raw = load_any(args.train_data)
    else:
        train_raw = load_any(args.data)
    train = pad_to_multiple(znormalize(train_raw, stats),
                            2 ** model.config.conv_blocks)

    top_r = cfg.top_r if cfg.top_r > 0 else None
    report = sanity_replacement(model, test, top_r=top_r, threads=cfg.threads)
    report.dataset = test.name
    os.makedirs(args.out, exist_ok=True)
    write_sanity_csv(os.path.join(args.out, "sanity.csv"), [report])

    entries = [ClosenessEntry("with_decoder", closeness(model, train))]
    if args.without_decoder:
        other, other_stats, _ = load_checkpoint(args.without_decoder)
        _require_prototype(other)
        other_train = pad_to_multiple(znormalize(train_raw, other_stats),
                                      2 ** other.config.conv_blocks)
        entries.append(ClosenessEntry("without_decoder",
                                      closeness(other, other_train)))
    write_closeness_csv(os.path.join(args.out, "closeness.csv"),
                        [ClosenessReport(dataset=test.name, entries=entries)])
    for row in report.rows:
        print(f"{row.mode}: replaced {row.data_replaced_percent:.2f}% "
              f"equal_pred {row.equal_prediction_percent:.2f}% "
              f"acc {row.original_accuracy:.2f} -> {row.modified_accuracy:.2f}")
    print(f"closeness: " + ", ".join(
        f"{e.variant}={e.mean_distance:.4f}" for e in entries))
    return 0


def cmd_gen_data(args):
    cfg = _apply_overrides(load_run_config(args.config), args)
    full = generate_anomaly(cfg.synthetic_config())
    trainval, test = split(full, cfg.test_fraction, cfg.seed,
                           stream=STREAM_TEST_SPLIT)
    os.makedirs(args.out, exist_ok=True)
    write_multichannel_csv(trainval, os.path.join(args.out, "train.csv"))
    write_multichannel_csv(test, os.path.join(args.out, "test.csv"))
    print(f"wrote {trainval.n_samples} train and {test.n_samples} test samples "
          f"to {args.out}")
    return 0


class _Parser(argparse.ArgumentParser):
    # config/usage problems are exit code 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.prog + ": error: " + message)


def build_parser():
    parser = _Parser(prog="protopatch",
                     description="patch-prototype time-series classification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, dataset=False):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--top-r", dest="top_r", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if dataset:
            p.add_argument("--data", default=None, help="dataset file")
            p.add_argument("--synthetic-anomaly", action="store_true")

    p_train = sub.add_parser("train", help="train a model, write checkpoint+report")
    common(p_train, dataset=True)
    p_train.add_argument("--baseline", action="store_true",
                         help="train the non-interpretable twin instead")

    p_eval = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    common(p_eval, checkpoint=True, dataset=True)

    p_explain = sub.add_parser("explain", help="per-sample explanation exports")
    common(p_explain, checkpoint=True, dataset=True)
    p_explain.add_argument("--samples", default=None,
                           help="comma-separated sample ids")

    p_sanity = sub.add_parser("sanity", help="substitution and closeness checks")
    common(p_sanity, checkpoint=True, dataset=True)
    p_sanity.add_argument("--train-data", default=None,
                          help="training-role dataset for closeness")
    p_sanity.add_argument("--without-decoder", default=None,
                          help="second checkpoint trained with lambda_mse=0")

    p_gen = sub.add_parser("gen-data", help="write the synthetic task to csv")
    common(p_gen)

    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "sanity": cmd_sanity,
    "gen-data": cmd_gen_data,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except (ParseError, PreconditionError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, NumericError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
