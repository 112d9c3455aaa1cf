"""Gaussian-mixture-prior autoencoder with a fixed-variance latent sampler."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import diffmath as dm
from .diffmath import Node, ShapeError

#: MNIST latent noise variance; also the default everywhere else.
DEFAULT_NOISE_VARIANCE = 1.0 / 3000.0

CHECKPOINT_MAGIC = b"GMVA"
CHECKPOINT_VERSION = 1

Array = Union[np.ndarray, Node]


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class MixturePrior:
    """Equal-weight isotropic mixture whose means are zero-padded one-hot vectors."""

    num_classes: int
    latent_dim: int
    variance: float = DEFAULT_NOISE_VARIANCE
    means: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.latent_dim < self.num_classes:
            raise ValueError(f"latent_dim {self.latent_dim} < num_classes {self.num_classes}")
        if not self.variance > 0:
            raise ValueError("prior variance must be positive")
        means = np.zeros((self.num_classes, self.latent_dim))
        means[np.arange(self.num_classes), np.arange(self.num_classes)] = 1.0
        object.__setattr__(self, "means", _frozen(means))

    @property
    def class_weights(self) -> np.ndarray:
        return np.full(self.num_classes, 1.0 / self.num_classes)


@dataclass(frozen=True)
class NoiseSpec:
    """Isotropic latent noise; constant for the model's lifetime, so is the encoder entropy."""

    variance: float
    dim: int

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("noise variance must be non-negative")

    def entropy(self) -> float:
        return 0.5 * self.dim * math.log(2.0 * math.pi * math.e * self.variance)


@dataclass(frozen=True)
class Layer:
    weight: Array  # (out, in)
    bias: Array  # (out,)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(dm._val(self.weight).shape)


def run_encoder(layers: Sequence[Layer], x: Array) -> Array:
    h = x
    for i, layer in enumerate(layers):
        h = dm.affine(h, layer.weight, layer.bias)
        if i < len(layers) - 1:
            h = dm.relu(h)
    return h


def run_decoder(layers: Sequence[Layer], z: Array) -> Array:
    h = z
    for i, layer in enumerate(layers):
        h = dm.affine(h, layer.weight, layer.bias)
        h = dm.sigmoid(h) if i == len(layers) - 1 else dm.relu(h)
    return h


@dataclass(frozen=True)
class GmvaeModel:
    encoder: tuple[Layer, ...]
    decoder: tuple[Layer, ...]
    prior: MixturePrior
    noise: NoiseSpec

    def __post_init__(self):
        if not self.encoder or not self.decoder:
            raise ValueError("encoder and decoder need at least one layer")
        if self.encoder[-1].shape[0] != self.prior.latent_dim:
            raise ShapeError(f"encoder output width {self.encoder[-1].shape[0]} != latent_dim {self.prior.latent_dim}")
        if self.decoder[0].shape[1] != self.prior.latent_dim:
            raise ShapeError(f"decoder input width {self.decoder[0].shape[1]} != latent_dim {self.prior.latent_dim}")
        if self.decoder[-1].shape[0] != self.input_dim:
            raise ShapeError(f"decoder output width {self.decoder[-1].shape[0]} != input_dim {self.input_dim}")
        if self.noise.dim != self.prior.latent_dim:
            raise ShapeError("noise dimension must equal latent_dim")

    @property
    def input_dim(self) -> int:
        return self.encoder[0].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.prior.latent_dim

    @property
    def num_classes(self) -> int:
        return self.prior.num_classes

    @property
    def means(self) -> np.ndarray:
        return self.prior.means

    # parameters -----------------------------------------------------------

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for part, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                params[f"{part}.{i}.weight"] = dm._val(layer.weight)
                params[f"{part}.{i}.bias"] = dm._val(layer.bias)
        return params

    def with_parameters(self, params) -> "GmvaeModel":
        """Copy of the model with every layer taken from ``params`` (arrays or tape nodes)."""

        def build(part, layers):
            return tuple(
                Layer(_maybe_freeze(params[f"{part}.{i}.weight"]), _maybe_freeze(params[f"{part}.{i}.bias"]))
                for i in range(len(layers))
            )

        return GmvaeModel(build("encoder", self.encoder), build("decoder", self.decoder), self.prior, self.noise)

    def bind(self, tape: dm.Tape) -> "GmvaeModel":
        """Register every parameter on ``tape`` so losses can be differentiated w.r.t. them."""
        return self.with_parameters({n: tape.variable(v, name=n) for n, v in self.named_parameters().items()})

    # inference ------------------------------------------------------------

    def encode(self, x: Array) -> Array:
        _check_width("encode", x, self.input_dim)
        return run_encoder(self.encoder, x)

    def decode(self, z: Array) -> Array:
        _check_width("decode", z, self.latent_dim)
        return run_decoder(self.decoder, z)

    def reconstruct(self, x: Array) -> Array:
        return self.decode(self.encode(x))


def _maybe_freeze(v):
    return v if isinstance(v, Node) else _frozen(v)


def _check_width(name, x, width):
    shape = dm._val(x).shape
    if not shape or shape[-1] != width:
        raise ShapeError(f"{name}: expected trailing dimension {width}, got shape {shape}")


def init_model(
    input_dim: int,
    num_classes: int,
    latent_dim: int | None = None,
    encoder_hidden: Sequence[int] = (128, 64),
    decoder_hidden: Sequence[int] = (64, 128),
    noise_variance: float = DEFAULT_NOISE_VARIANCE,
    prior_variance: float | None = None,
    seed: int = 0,
    zero_final_encoder: bool = False,
) -> GmvaeModel:
    """Randomly initialised model (He-normal weights, zero biases).

    ``prior_variance`` defaults to ``noise_variance``.
    """
    d = num_classes if latent_dim is None else latent_dim
    rng = np.random.default_rng(seed)

    def stack(widths):
        layers = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            layers.append(Layer(_frozen(w), _frozen(np.zeros(fan_out))))
        return layers

    encoder = stack([input_dim, *encoder_hidden, d])
    decoder = stack([d, *decoder_hidden, input_dim])
    if zero_final_encoder:
        out, inp = encoder[-1].shape
        encoder[-1] = Layer(_frozen(np.zeros((out, inp))), _frozen(np.zeros(out)))
    prior = MixturePrior(num_classes, d, noise_variance if prior_variance is None else prior_variance)
    return GmvaeModel(tuple(encoder), tuple(decoder), prior, NoiseSpec(noise_variance, d))


def sample_latent(z_mean, noise: NoiseSpec, rng) -> np.ndarray:
    """``z_mean + eps`` with ``eps ~ N(0, variance * I)``; ``rng`` is a seed or a Generator."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    z_mean = np.asarray(z_mean, dtype=np.float64)
    return z_mean + math.sqrt(noise.variance) * rng.standard_normal(z_mean.shape)


def reconstruction_error(model: GmvaeModel, x) -> np.ndarray | float:
    """Squared L2 between ``x`` and its noiseless reconstruction; one value per row for batches."""
    x = np.asarray(x, dtype=np.float64)
    diff = x - model.reconstruct(x)
    err = np.sum(diff * diff, axis=-1)
    return float(err) if x.ndim == 1 else err


def mixture_log_density(prior: MixturePrior, z, variance: float | None = None) -> np.ndarray | float:
    """Log density of the equal-weight mixture at ``z`` (rows of ``z`` for batches)."""
    var = prior.variance if variance is None else variance
    z = np.asarray(z, dtype=np.float64)
    sq = dm._sqdist_fwd(z, prior.means)
    d = prior.latent_dim
    comp = -0.5 * sq / var - 0.5 * d * math.log(2.0 * math.pi * var) - math.log(prior.num_classes)
    out = dm._lse_fwd(comp, -1)
    return float(out) if z.ndim == 1 else out


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def checkpoint_bytes(model: GmvaeModel) -> bytes:
    d = model.latent_dim
    for layer in model.encoder[:-1]:
        if layer.shape[0] == d:
            # the reader splits encoder/decoder at the first width-d layer
            raise ValueError(f"encoder hidden width {d} equals latent_dim; checkpoint would be ambiguous")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IIII", CHECKPOINT_VERSION, model.input_dim, d, model.num_classes),
        struct.pack("<dd", model.noise.variance, model.prior.variance),
        struct.pack("<I", len(model.encoder) + len(model.decoder)),
    ]
    for layer in (*model.encoder, *model.decoder):
        w, b = dm._val(layer.weight), dm._val(layer.bias)
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(model.means, dtype="<f8").tobytes())
    return b"".join(parts)


class CheckpointError(ValueError):
    pass


def model_from_bytes(blob: bytes) -> GmvaeModel:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, input_dim, d, k = struct.unpack("<IIII", take(16))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    noise_var, prior_var = struct.unpack("<dd", take(16))
    (n_layers,) = struct.unpack("<I", take(4))
    layers = []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", take(8))
        w = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols)
        b = np.frombuffer(take(8 * rows), dtype="<f8")
        layers.append(Layer(_frozen(w), _frozen(b)))
    means = np.frombuffer(take(8 * k * d), dtype="<f8").reshape(k, d)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")

    split = next((i + 1 for i, layer in enumerate(layers) if layer.shape[0] == d), None)
    if split is None or split >= len(layers):
        raise CheckpointError("cannot locate the encoder/decoder boundary")
    prior = MixturePrior(k, d, prior_var)
    if not np.array_equal(prior.means, means):
        raise CheckpointError("stored means are not the one-hot mixture means")
    model = GmvaeModel(tuple(layers[:split]), tuple(layers[split:]), prior, NoiseSpec(noise_var, d))
    if model.input_dim != input_dim:
        raise CheckpointError("input_dim does not match the first layer")
    return model


def save_checkpoint(model: GmvaeModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> GmvaeModel:
    return model_from_bytes(Path(path).read_bytes())
