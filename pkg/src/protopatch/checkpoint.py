"""Flat binary checkpoint container.

Layout (all integers little-endian u32, floats little-endian f64):

    magic "P2EX" | version | kind | input_length | input_channels |
    num_classes | conv_blocks | latent_channels | patch_len |
    prototypes_per_class | orig_length | epsilon_sim (f64) |
    entry_count | entries...

Each entry: name_len | name utf-8 | rank | dims... | values (f64).
Model parameters, the prototype class assignment and the normalization
statistics are all stored as entries, so a load round-trips bit for bit.
"""

import struct

import numpy as np

from .data import ChannelStats, stream_rng
from .errors import CheckpointError
from .model import ConvBaseline, ModelConfig, PatchPrototypeNet

MAGIC = b"P2EX"
VERSION = 1
_KINDS = {"prototype": 0, "baseline": 1}
_HEADER = struct.Struct("<10I d I")   # 10 ints, epsilon, entry count


def _entry_bytes(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    encoded = name.encode("utf-8")
    head = struct.pack("<I", len(encoded)) + encoded
    head += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, model, stats, orig_length):
    cfg = model.config
    entries = {name: t.data for name, t in model.params().items()}
    if model.kind == "prototype":
        entries["class_of"] = model.bank.class_of.astype(np.float64)
    entries["norm_mean"] = stats.mean
    entries["norm_std"] = stats.std
    blob = MAGIC + _HEADER.pack(
        VERSION,
        _KINDS[model.kind],
        cfg.input_length,
        cfg.input_channels,
        cfg.num_classes,
        cfg.conv_blocks,
        cfg.latent_channels,
        cfg.patch_len,
        cfg.prototypes_per_class,
        orig_length,
        cfg.epsilon_sim,
        len(entries),
    )
    with open(path, "wb") as fh:
        fh.write(blob)
        for name, arr in entries.items():
            fh.write(_entry_bytes(name, arr))


def load_checkpoint(path):
    """Returns (model, ChannelStats, orig_length)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    fields = _HEADER.unpack_from(raw, 4)
    version, kind_id = fields[0], fields[1]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (input_length, input_channels, num_classes, conv_blocks,
     latent_channels, patch_len, prototypes_per_class, orig_length) = fields[2:10]
    epsilon_sim, entry_count = fields[10], fields[11]

    offset = 4 + _HEADER.size
    entries = {}
    for _ in range(entry_count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        entries[name] = values.reshape(dims).copy()

    config = ModelConfig(
        input_length=input_length,
        input_channels=input_channels,
        num_classes=num_classes,
        conv_blocks=conv_blocks,
        latent_channels=latent_channels,
        patch_len=patch_len,
        prototypes_per_class=prototypes_per_class,
        epsilon_sim=epsilon_sim,
    )
    kind = {v: k for k, v in _KINDS.items()}[kind_id]
    rng = stream_rng(0, 0)   # placeholder init; every parameter is overwritten
    model = (PatchPrototypeNet if kind == "prototype" else ConvBaseline)(config, rng)
    for name, tensor in model.params().items():
        if name not in entries:
            raise CheckpointError(f"{path}: missing parameter {name}")
        arr = entries.pop(name)
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {arr.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = np.ascontiguousarray(arr)
    if kind == "prototype":
        model.bank.class_of = entries.pop("class_of").astype(np.int64)
    try:
        stats = ChannelStats(mean=entries.pop("norm_mean"), std=entries.pop("norm_std"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from None
    return model, stats, orig_length
