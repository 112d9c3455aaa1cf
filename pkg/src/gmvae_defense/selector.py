"""Nearest-mean classification with a latent and a reconstruction reject threshold."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import gammainc

from . import diffmath as dm
from .gmvae import GmvaeModel
from .training import TrainStats

#: Two-sided 3-sigma mass of a standard normal.
DEFAULT_CONFIDENCE = 0.9973

LATENT_OUTLIER = "latent_outlier"
RECONSTRUCTION_OUTLIER = "reconstruction_outlier"
BOTH = "both"
FOOLING = "fooling"


@dataclass(frozen=True)
class Thresholds:
    tau_enc: float  # on the squared Mahalanobis distance
    tau_dec: float
    confidence: float = DEFAULT_CONFIDENCE

    def __post_init__(self):
        if not self.tau_enc > 0:
            raise ValueError("tau_enc must be positive")
        if not self.tau_dec >= 0:
            raise ValueError("tau_dec must be non-negative")

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, "tau_enc": self.tau_enc, "tau_dec": self.tau_dec, "confidence": self.confidence}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Thresholds":
        raw = json.loads(text)
        return cls(float(raw["tau_enc"]), float(raw["tau_dec"]), float(raw.get("confidence", DEFAULT_CONFIDENCE)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Thresholds":
        return cls.from_json(Path(path).read_text())


#: Thresholds that accept everything.
NO_THRESHOLDS = Thresholds(math.inf, math.inf, 1.0)


@dataclass(frozen=True)
class Decision:
    """Outcome of selective classification.

    ``label`` is always the nearest-mean prediction; it is only reported as
    the verdict when ``accepted``.
    """

    accepted: bool
    label: int
    mahalanobis_sq: float
    recon_error: float
    reason: Optional[str] = None
    z_mean: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.accepted and self.reason is not None:
            raise ValueError("accepted decisions carry no reject reason")
        if not self.accepted and self.reason is None:
            raise ValueError("rejected decisions need a reason")

    @property
    def verdict(self) -> str:
        return "accept" if self.accepted else "reject"

    def to_record(self) -> dict:
        return {
            "verdict": self.verdict,
            "label": int(self.label) if self.accepted else None,
            "reason": self.reason,
            "mahalanobis_sq": float(self.mahalanobis_sq),
            "recon_error": float(self.recon_error),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record())


def classify(model: GmvaeModel, x) -> int | np.ndarray:
    """Index of the nearest mixture mean to ``encode(x)``; ties go to the lowest index."""
    z = model.encode(np.asarray(x, dtype=np.float64))
    return nearest_mean(model.means, z)


def nearest_mean(means: np.ndarray, z) -> int | np.ndarray:
    d = dm._sqdist_fwd(np.asarray(z, dtype=np.float64), means)
    label = np.argmin(d, axis=-1)
    return int(label) if np.ndim(label) == 0 else label


def mahalanobis_sq(z, mu, variance: float):
    """``||z - mu||^2 / variance``, row-wise for batches."""
    if not variance > 0:
        raise ValueError("variance must be positive")
    diff = np.asarray(z, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    return np.sum(diff * diff, axis=-1) / variance


def chi_square_cdf(x: float, dof: int) -> float:
    return float(gammainc(0.5 * dof, 0.5 * x)) if x > 0 else 0.0


def chi_square_critical(dof: int, p: float, tol: float = 1e-10) -> float:
    """The ``p``-quantile of the chi-square distribution, by bisection on its CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if dof < 1:
        raise ValueError("degrees of freedom must be positive")
    lo, hi = 0.0, max(1.0, float(dof))
    while chi_square_cdf(hi, dof) < p:
        lo, hi = hi, 2.0 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if chi_square_cdf(mid, dof) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate(stats: TrainStats, latent_dim: int, confidence: float = DEFAULT_CONFIDENCE) -> Thresholds:
    """Chi-square critical value for the latent check, mean + 3 std of training reconstruction errors for the decoder check."""
    errors = np.asarray(stats.recon_errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("cannot calibrate from empty training statistics")
    return Thresholds(chi_square_critical(latent_dim, confidence), float(errors.mean() + 3.0 * errors.std()), confidence)


@dataclass(frozen=True)
class BatchDecisions:
    """Vectorised decisions for a batch of inputs."""

    labels: np.ndarray
    mahalanobis_sq: np.ndarray
    recon_errors: np.ndarray
    latent_ok: np.ndarray
    recon_ok: np.ndarray
    z: np.ndarray

    @property
    def accepted(self) -> np.ndarray:
        return self.latent_ok & self.recon_ok

    def reasons(self) -> list[Optional[str]]:
        return [_reason(a, b) for a, b in zip(self.latent_ok, self.recon_ok)]

    def decision(self, i: int) -> Decision:
        return Decision(
            bool(self.accepted[i]),
            int(self.labels[i]),
            float(self.mahalanobis_sq[i]),
            float(self.recon_errors[i]),
            _reason(self.latent_ok[i], self.recon_ok[i]),
            self.z[i],
        )

    def __len__(self):
        return len(self.labels)


def _reason(latent_ok, recon_ok) -> Optional[str]:
    if latent_ok and recon_ok:
        return None
    if not latent_ok and not recon_ok:
        return BOTH
    return LATENT_OUTLIER if not latent_ok else RECONSTRUCTION_OUTLIER


def selective_classify_batch(model: GmvaeModel, thresholds: Thresholds, x) -> BatchDecisions:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = model.encode(x)
    labels = nearest_mean(model.means, z)
    labels = np.atleast_1d(labels)
    mahal = mahalanobis_sq(z, model.means[labels], model.prior.variance)
    diff = x - model.decode(z)
    recon = np.sum(diff * diff, axis=-1)
    return BatchDecisions(labels, mahal, recon, mahal <= thresholds.tau_enc, recon <= thresholds.tau_dec, z)


def selective_classify(model: GmvaeModel, thresholds: Thresholds, x) -> Decision:
    """Accept the nearest-mean label only if both the latent and reconstruction checks pass."""
    return selective_classify_batch(model, thresholds, np.asarray(x, dtype=np.float64)[None, :]).decision(0)
