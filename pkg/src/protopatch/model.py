"""The patch-prototype classifier and its non-interpretable twin.

The encoder is a stack of conv(k=3) + relu + maxpool(2) blocks; the decoder
mirrors it with nearest-neighbour upsampling + conv, so it is fully
convolutional and can decode a standalone latent patch of any length. The
prototype layer holds K learnable latent patches; classification evidence is
the full similarity grid weighted by a learnable (prototype, position, class)
tensor rather than per-patch minima only, which is what the position-resolved
weight layer requires.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import DimensionError, PreconditionError

KERNEL_SIZE = 3
POOL_STRIDE = 2


@dataclass
class ModelConfig:
    input_length: int
    input_channels: int
    num_classes: int
    conv_blocks: int = 3
    latent_channels: int = 16
    patch_len: int = 2
    prototypes_per_class: int = 4
    epsilon_sim: float = 1e-4

    @property
    def pool_factor(self):
        return POOL_STRIDE ** self.conv_blocks

    @property
    def latent_length(self):
        return self.input_length // self.pool_factor

    @property
    def num_prototypes(self):
        return self.num_classes * self.prototypes_per_class

    @property
    def num_positions(self):
        return self.latent_length - self.patch_len + 1

    def validate(self):
        if self.input_length % self.pool_factor != 0:
            raise PreconditionError(
                f"input_length {self.input_length} not divisible by "
                f"{self.pool_factor} (= {POOL_STRIDE}^{self.conv_blocks})"
            )
        if self.latent_length < self.patch_len:
            raise PreconditionError(
                f"latent length {self.latent_length} shorter than patch_len "
                f"{self.patch_len}"
            )
        for name in ("input_channels", "num_classes", "conv_blocks",
                     "latent_channels", "patch_len", "prototypes_per_class"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"{name} must be >= 1")
        if self.epsilon_sim <= 0.0:
            raise PreconditionError("epsilon_sim must be > 0")


class PrototypeBank:
    """K learnable latent patches plus their class assignment."""

    def __init__(self, protos, class_of):
        self.protos = protos
        self.class_of = np.ascontiguousarray(class_of, dtype=np.int64)
        if self.protos.shape[0] != self.class_of.shape[0]:
            raise DimensionError("one class label per prototype required")

    @classmethod
    def initialize(cls, config, rng):
        shape = (config.num_prototypes, config.patch_len, config.latent_channels)
        protos = Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)
        class_of = np.repeat(
            np.arange(config.num_classes, dtype=np.int64),
            config.prototypes_per_class,
        )
        return cls(protos, class_of)

    @property
    def size(self):
        return self.protos.shape[0]


class PrototypeWeights:
    """Evidence weights per (prototype, latent position, class).

    Initialized to +1 at the prototype's own class and -0.5 elsewhere,
    uniformly over positions.
    """

    def __init__(self, w):
        self.w = w

    @classmethod
    def initialize(cls, config, class_of):
        arr = np.full(
            (config.num_prototypes, config.num_positions, config.num_classes),
            -0.5,
        )
        arr[np.arange(config.num_prototypes), :, class_of] = 1.0
        return cls(Tensor(arr, requires_grad=True))


@dataclass
class PatchGrid:
    """All stride-1 latent windows of one sample, in position order."""

    patches: Tensor   # (Q, patch_len, latent_channels)


@dataclass
class ForwardOutputs:
    logits: Tensor
    reconstruction: Tensor
    patches: Tensor
    similarities: Tensor
    distances: Tensor


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_encoder(config, rng):
    params = {}
    ch_in = config.input_channels
    for i in range(config.conv_blocks):
        ch_out = config.latent_channels
        params[f"enc{i}_w"] = Tensor(
            _glorot(rng, (KERNEL_SIZE, ch_in, ch_out),
                    KERNEL_SIZE * ch_in, KERNEL_SIZE * ch_out),
            requires_grad=True,
        )
        params[f"enc{i}_b"] = Tensor(np.zeros(ch_out), requires_grad=True)
        ch_in = ch_out
    return params


def _init_decoder(config, rng):
    params = {}
    ch_in = config.latent_channels
    for i in range(config.conv_blocks):
        last = i == config.conv_blocks - 1
        ch_out = config.input_channels if last else config.latent_channels
        params[f"dec{i}_w"] = Tensor(
            _glorot(rng, (KERNEL_SIZE, ch_in, ch_out),
                    KERNEL_SIZE * ch_in, KERNEL_SIZE * ch_out),
            requires_grad=True,
        )
        params[f"dec{i}_b"] = Tensor(np.zeros(ch_out), requires_grad=True)
        ch_in = ch_out
    return params


class PatchPrototypeNet:
    """Encoder + fully-convolutional decoder + prototype evidence classifier."""

    kind = "prototype"

    def __init__(self, config, rng):
        config.validate()
        self.config = config
        self._enc = _init_encoder(config, rng)
        self._dec = _init_decoder(config, rng)
        self.bank = PrototypeBank.initialize(config, rng)
        self.weights = PrototypeWeights.initialize(config, self.bank.class_of)

    def params(self):
        out = dict(self._enc)
        out.update(self._dec)
        out["prototypes"] = self.bank.protos
        out["proto_weights"] = self.weights.w
        return out

    def _check_channels(self, x):
        if x.shape[-1] != self.config.input_channels:
            raise DimensionError(
                f"input channels (last axis) = {x.shape[-1]}, model expects "
                f"{self.config.input_channels}"
            )

    def encode(self, x):
        """(T, ch) or (B, T, ch) -> latent (T_l, C_l) or (B, T_l, C_l)."""
        single = x.data.ndim == 2
        h = ops.reshape(x, (1,) + x.shape) if single else x
        self._check_channels(h)
        for i in range(self.config.conv_blocks):
            h = ops.conv1d(h, self._enc[f"enc{i}_w"], self._enc[f"enc{i}_b"])
            h = ops.relu(h)
            h = ops.maxpool1d(h, POOL_STRIDE)
        return ops.reshape(h, h.shape[1:]) if single else h

    def decode(self, z):
        """Latent of any time length >= 1 back to input space."""
        single = z.data.ndim == 2
        h = ops.reshape(z, (1,) + z.shape) if single else z
        if h.shape[-1] != self.config.latent_channels:
            raise DimensionError(
                f"latent channels (last axis) = {h.shape[-1]}, model expects "
                f"{self.config.latent_channels}"
            )
        for i in range(self.config.conv_blocks):
            h = ops.upsample1d(h, POOL_STRIDE)
            h = ops.conv1d(h, self._dec[f"dec{i}_w"], self._dec[f"dec{i}_b"])
            if i < self.config.conv_blocks - 1:
                h = ops.relu(h)
        return ops.reshape(h, h.shape[1:]) if single else h

    def extract_patches(self, z):
        """All stride-1 windows of one latent (T_l, C_l) as a PatchGrid."""
        zb = ops.reshape(z, (1,) + z.shape)
        windows = ops.sliding_windows(zb, self.config.patch_len)
        return PatchGrid(ops.reshape(windows, windows.shape[1:]))

    def forward(self, x, with_reconstruction=True):
        """Full pass; single-sample inputs give single-sample outputs."""
        single = x.data.ndim == 2
        xb = ops.reshape(x, (1,) + x.shape) if single else x
        self._check_channels(xb)
        z = self.encode(xb)
        recon = self.decode(z) if with_reconstruction else None
        patches = ops.sliding_windows(z, self.config.patch_len)
        dist = ops.pairwise_distances(patches, self.bank.protos)
        sim = ops.similarity(dist, self.config.epsilon_sim)
        logits = ops.evidence_logits(sim, self.weights.w)
        if single:
            logits = ops.reshape(logits, logits.shape[1:])
            patches = ops.reshape(patches, patches.shape[1:])
            dist = ops.reshape(dist, dist.shape[1:])
            sim = ops.reshape(sim, sim.shape[1:])
            if recon is not None:
                recon = ops.reshape(recon, recon.shape[1:])
        return ForwardOutputs(
            logits=logits,
            reconstruction=recon,
            patches=patches,
            similarities=sim,
            distances=dist,
        )


class ConvBaseline:
    """Same encoder, flatten + dense classifier, no decoder, no prototypes."""

    kind = "baseline"

    def __init__(self, config, rng):
        config.validate()
        self.config = config
        self._enc = _init_encoder(config, rng)
        feat = config.latent_length * config.latent_channels
        self._dense_w = Tensor(
            _glorot(rng, (feat, config.num_classes), feat, config.num_classes),
            requires_grad=True,
        )
        self._dense_b = Tensor(np.zeros(config.num_classes), requires_grad=True)

    def params(self):
        out = dict(self._enc)
        out["dense_w"] = self._dense_w
        out["dense_b"] = self._dense_b
        return out

    def encode(self, x):
        single = x.data.ndim == 2
        h = ops.reshape(x, (1,) + x.shape) if single else x
        if h.shape[-1] != self.config.input_channels:
            raise DimensionError(
                f"input channels (last axis) = {h.shape[-1]}, model expects "
                f"{self.config.input_channels}"
            )
        for i in range(self.config.conv_blocks):
            h = ops.conv1d(h, self._enc[f"enc{i}_w"], self._enc[f"enc{i}_b"])
            h = ops.relu(h)
            h = ops.maxpool1d(h, POOL_STRIDE)
        return ops.reshape(h, h.shape[1:]) if single else h

    def forward(self, x):
        single = x.data.ndim == 2
        xb = ops.reshape(x, (1,) + x.shape) if single else x
        z = self.encode(xb)
        flat = ops.reshape(z, (z.shape[0], z.shape[1] * z.shape[2]))
        logits = ops.affine(flat, self._dense_w, self._dense_b)
        return ops.reshape(logits, logits.shape[1:]) if single else logits


def similarity_grid(grid, bank, epsilon_sim):
    """Similarity of one sample's patches to every prototype: (K, Q)."""
    patches = grid.patches if isinstance(grid, PatchGrid) else grid
    batched = ops.reshape(patches, (1,) + patches.shape)
    dist = ops.pairwise_distances(batched, bank.protos)
    sim = ops.similarity(dist, epsilon_sim)
    return ops.reshape(sim, sim.shape[1:])


def logits_from_grid(sim, weights):
    """Class evidence for one sample's (K, Q) similarity grid."""
    w = weights.w if isinstance(weights, PrototypeWeights) else weights
    return ops.evidence_logits(sim, w)


def receptive_window(config, q):
    """Input-space interval [start, end) covered by latent position q.

    Uses the pooling stride only; convolution kernel halos are ignored, so
    the window is the exact span the substitution machinery swaps out.
    """
    if not 0 <= q < config.num_positions:
        raise PreconditionError(
            f"position {q} out of range [0, {config.num_positions})"
        )
    r = config.pool_factor
    return q * r, (q + config.patch_len) * r
