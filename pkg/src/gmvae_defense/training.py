"""Losses, Adam, and the training loop."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import diffmath as dm
from .data import UNLABELED, Dataset, split_semi_supervised
from .diffmath import Gradients, Tape
from .gmvae import DEFAULT_NOISE_VARIANCE, GmvaeModel, init_model

STATS_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    semi_supervised: bool = False
    labeled_per_class: Optional[int] = None
    warmup_epochs: int = 300  # labeled-only epochs before interleaving; semi-supervised mode only
    latent_dim: Optional[int] = None
    encoder_hidden: tuple[int, ...] = (128, 64)
    decoder_hidden: tuple[int, ...] = (64, 128)
    noise_variance: float = DEFAULT_NOISE_VARIANCE

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.labeled_per_class is not None and self.labeled_per_class < 1:
            raise ValueError("labeled_per_class must be positive")
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(self.decoder_hidden))


@dataclass
class TrainStats:
    """Per-epoch curves plus per-sample terms of the final model on the training set.

    ``latent_sq_dist`` is the squared distance to the true-class mean, or to the
    nearest mean for unlabeled samples.  Both per-sample arrays use the
    noiseless encoder/decoder composition, matching the selector.
    """

    epoch_loss: list[float] = field(default_factory=list)
    epoch_recon: list[float] = field(default_factory=list)
    epoch_latent: list[float] = field(default_factory=list)
    labeled_count: list[int] = field(default_factory=list)
    unlabeled_count: list[int] = field(default_factory=list)
    latent_sq_dist: np.ndarray = field(default_factory=lambda: np.zeros(0))
    recon_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_json(self) -> str:
        payload = {
            "schema_version": STATS_SCHEMA_VERSION,
            "epoch_loss": self.epoch_loss,
            "epoch_recon": self.epoch_recon,
            "epoch_latent": self.epoch_latent,
            "labeled_count": self.labeled_count,
            "unlabeled_count": self.unlabeled_count,
            "latent_sq_dist": [float(v) for v in self.latent_sq_dist],
            "recon_errors": [float(v) for v in self.recon_errors],
        }
        return json.dumps(payload, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainStats":
        raw = json.loads(text)
        if raw.get("schema_version") != STATS_SCHEMA_VERSION:
            raise ValueError(f"unsupported stats schema {raw.get('schema_version')!r}")
        return cls(
            epoch_loss=list(raw["epoch_loss"]),
            epoch_recon=list(raw["epoch_recon"]),
            epoch_latent=list(raw["epoch_latent"]),
            labeled_count=list(raw["labeled_count"]),
            unlabeled_count=list(raw["unlabeled_count"]),
            latent_sq_dist=np.array(raw["latent_sq_dist"], dtype=np.float64),
            recon_errors=np.array(raw["recon_errors"], dtype=np.float64),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TrainStats":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _reduce(per_sample, batched: bool):
    return dm.mean(per_sample) if batched else per_sample


def supervised_terms(model: GmvaeModel, x, y, eps):
    """Reconstruction and latent terms of the supervised loss, per sample."""
    y = np.asarray(y)
    if np.any((y < 0) | (y >= model.num_classes)):
        raise ValueError(f"unknown label in {np.unique(y)}; expected 0..{model.num_classes - 1}")
    z = model.encode(x)
    recon = dm.sum_squares(dm.sub(x, model.decode(dm.add(z, eps))), axis=-1)
    latent = dm.sum_squares(dm.sub(z, model.means[y]), axis=-1)
    return recon, latent


def supervised_loss(model: GmvaeModel, x, y, eps, alpha: float = 1.0):
    """``||x - g(f(x) + eps)||^2 + alpha * ||f(x) - mu_y||^2``, averaged over a batch.

    Returns a tape node when ``model`` or ``x`` lives on a tape.
    """
    recon, latent = supervised_terms(model, x, y, eps)
    return _reduce(dm.add(recon, dm.mul(alpha, latent)), np.ndim(dm._val(x)) == 2)


def unlabeled_terms(model: GmvaeModel, x, eps):
    z = model.encode(x)
    recon = dm.sum_squares(dm.sub(x, model.decode(dm.add(z, eps))), axis=-1)
    # soft minimum of squared distances: -log sum_c exp(-d_c)
    softmin = dm.mul(-1.0, dm.logsumexp(dm.mul(-1.0, dm.sq_dist_to_centers(z, model.means)), axis=-1))
    return recon, softmin


def unlabeled_loss(model: GmvaeModel, x, eps, alpha: float = 1.0):
    """Reconstruction plus ``alpha`` times the soft minimum of squared distances to all means."""
    recon, softmin = unlabeled_terms(model, x, eps)
    return _reduce(dm.add(recon, dm.mul(alpha, softmin)), np.ndim(dm._val(x)) == 2)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.items()}, {n: np.zeros_like(p) for n, p in params.items()}, 0)


def adam_step(params: dict, grads: Gradients, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update; returns new ``(params, state)`` without mutating inputs."""
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise dm.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_params[name] = p - config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batch_loss(model, x, y, eps, alpha):
    labeled = y != UNLABELED
    n = len(y)
    total, recon_sum, latent_sum = None, 0.0, 0.0
    if labeled.any():
        r, l = supervised_terms(model, x[labeled], y[labeled], eps[labeled])
        part = dm.sum(dm.add(r, dm.mul(alpha, l)))
        total = part
        recon_sum += float(np.sum(dm._val(r)))
        latent_sum += float(np.sum(dm._val(l)))
    if not labeled.all():
        r, s = unlabeled_terms(model, x[~labeled], eps[~labeled])
        part = dm.sum(dm.add(r, dm.mul(alpha, s)))
        total = part if total is None else dm.add(total, part)
        recon_sum += float(np.sum(dm._val(r)))
        latent_sum += float(np.sum(dm._val(s)))
    return dm.mul(total, 1.0 / n), recon_sum, latent_sum


def per_sample_statistics(model: GmvaeModel, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless ``(latent squared distance, reconstruction error)`` for every sample."""
    x = dataset.images
    z = model.encode(x)
    dists = dm._sqdist_fwd(z, model.means)
    y = dataset.labels
    latent = np.where(y != UNLABELED, dists[np.arange(len(y)), np.maximum(y, 0)], dists.min(axis=1))
    diff = x - model.decode(z)
    return latent, np.sum(diff * diff, axis=1)


def _run_epochs(model, params, state, dataset, config, epochs, rng, stats, progress):
    noise_std = np.sqrt(model.noise.variance)
    x_all, y_all = dataset.images, dataset.labels
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum = recon_sum = latent_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            eps = noise_std * rng.standard_normal((len(idx), model.latent_dim))
            tape = Tape()
            bound = model.with_parameters({k: tape.variable(v, name=k) for k, v in params.items()})
            loss, r, l = _batch_loss(bound, x_all[idx], y_all[idx], eps, config.alpha)
            grads = dm.backward(tape, loss)
            params, state = adam_step(params, grads, state, config)
            loss_sum += float(loss.value) * len(idx)
            recon_sum += r
            latent_sum += l
        if stats is None:
            continue
        labeled = int(np.count_nonzero(y_all != UNLABELED))
        stats.epoch_loss.append(loss_sum / n)
        stats.epoch_recon.append(recon_sum / n)
        stats.epoch_latent.append(latent_sum / n)
        stats.labeled_count.append(labeled)
        stats.unlabeled_count.append(n - labeled)
        if progress is not None:
            progress(
                {
                    "epoch": epoch + 1,
                    "loss": stats.epoch_loss[-1],
                    "recon": stats.epoch_recon[-1],
                    "latent": stats.epoch_latent[-1],
                }
            )
    return params, state


def train(
    dataset: Dataset,
    config: TrainConfig = TrainConfig(),
    progress: Optional[Callable[[dict], None]] = None,
    model: Optional[GmvaeModel] = None,
) -> tuple[GmvaeModel, TrainStats]:
    """Fit a model with mini-batch Adam.

    Labeled samples use the supervised loss and unlabeled ones the soft-min
    loss; in semi-supervised mode ``labeled_per_class`` labels per class are
    kept and the rest dropped first.  Both kinds share shuffled mini-batches,
    after ``warmup_epochs`` passes over the labeled subset alone.
    Fresh latent noise is drawn for every sample at every step.
    ``progress`` receives one record per epoch.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.semi_supervised:
        if config.labeled_per_class is None:
            raise ValueError("semi-supervised training needs labeled_per_class")
        dataset = split_semi_supervised(dataset, config.labeled_per_class, config.seed)
    if model is None:
        model = init_model(
            dataset.input_dim,
            dataset.num_classes,
            latent_dim=config.latent_dim,
            encoder_hidden=config.encoder_hidden,
            decoder_hidden=config.decoder_hidden,
            noise_variance=config.noise_variance,
            seed=config.seed,
        )
    rng = np.random.default_rng(config.seed + 1)
    params = model.named_parameters()
    state = AdamState.zeros(params)
    stats = TrainStats()
    if config.semi_supervised and config.warmup_epochs:
        # settle each class on its own mean before unlabeled samples join
        warm = dataset.subset(np.flatnonzero(dataset.labeled_mask))
        params, state = _run_epochs(model, params, state, warm, config, config.warmup_epochs, rng, None, None)
    params, state = _run_epochs(model, params, state, dataset, config, config.epochs, rng, stats, progress)

    model = model.with_parameters(params)
    stats.latent_sq_dist, stats.recon_errors = per_sample_statistics(model, dataset)
    return model, stats


def train_config_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["encoder_hidden"] = list(config.encoder_hidden)
    out["decoder_hidden"] = list(config.decoder_hidden)
    return out
