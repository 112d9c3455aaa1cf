"""Label recovery for rejected inputs by searching the decoder's latent space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffmath as dm
from .gmvae import GmvaeModel
from .optim import backtracking_descent
from .selector import FOOLING, Decision, Thresholds, mahalanobis_sq, nearest_mean


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 300
    step_size: float = 0.01
    starts: Optional[np.ndarray] = None  # (S, d); defaults to the mixture means

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")


@dataclass
class InversionResult:
    z: np.ndarray  # (S, d) final point per start
    errors: np.ndarray  # (S,)
    traces: np.ndarray  # (steps + 1, S)
    winner: int
    decision: Optional[Decision] = None

    @property
    def z_star(self) -> np.ndarray:
        return self.z[self.winner]


def _recon_objective(model, targets):
    def objective(z, rows):
        return dm.sum_squares(dm.sub(model.decode(z), targets[rows]), axis=-1)

    return objective


def invert_decoder(model: GmvaeModel, x, z_init, config: InversionConfig = InversionConfig()):
    """Minimise ``||decode(z) - x||^2`` from ``z_init``; returns ``(z*, error)`` (row-wise for batches).

    The descent never accepts an increase, so the returned point is the best
    one seen and its error never exceeds the error at ``z_init``.
    """
    x = np.asarray(x, dtype=np.float64)
    z0 = np.asarray(z_init, dtype=np.float64)
    single = x.ndim == 1
    xb, zb = np.atleast_2d(x), np.atleast_2d(z0)
    res = backtracking_descent(_recon_objective(model, xb), zb, config.steps, config.step_size)
    if single:
        return res.x[0], float(res.value[0])
    return res.x, res.value


def _starts(model, config):
    return model.means if config.starts is None else np.atleast_2d(np.asarray(config.starts, dtype=np.float64))


def invert_from_starts(model: GmvaeModel, x, config: InversionConfig = InversionConfig()) -> list[InversionResult]:
    """Run one inversion per start for each row of ``x``; starts are independent."""
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    starts = _starts(model, config)
    n, s = len(xb), len(starts)
    targets = np.repeat(xb, s, axis=0)
    z0 = np.tile(starts, (n, 1))
    res = backtracking_descent(_recon_objective(model, targets), z0, config.steps, config.step_size)
    out = []
    for i in range(n):
        rows = slice(i * s, (i + 1) * s)
        errors = res.value[rows]
        # argmin breaks ties toward the lowest start index
        out.append(InversionResult(res.x[rows], errors, res.trace[:, rows], int(np.argmin(errors))))
    return out


def _decide(model, thresholds, result: InversionResult) -> Decision:
    z = result.z_star
    label = nearest_mean(model.means, z)
    mahal = float(mahalanobis_sq(z, model.means[label], model.prior.variance))
    err = float(result.errors[result.winner])
    ok = thresholds is None or (mahal <= thresholds.tau_enc and err <= thresholds.tau_dec)
    return Decision(bool(ok), int(label), mahal, err, None if ok else FOOLING, z)


def reclassify_batch(model: GmvaeModel, thresholds: Optional[Thresholds], x, config: InversionConfig = InversionConfig()) -> list[InversionResult]:
    """Inversion results with ``decision`` filled in; ``thresholds=None`` accepts everything."""
    results = invert_from_starts(model, x, config)
    for r in results:
        r.decision = _decide(model, thresholds, r)
    return results


def reclassify(model: GmvaeModel, thresholds: Thresholds, x, config: InversionConfig = InversionConfig()) -> Decision:
    """Label ``x`` by the mean nearest its best decoder pre-image.

    The input is rejected as a fooling sample when that pre-image is a latent
    outlier or still reconstructs ``x`` poorly.
    """
    return reclassify_batch(model, thresholds, np.asarray(x, dtype=np.float64)[None, :], config)[0].decision


def reclassify_accept_always(model: GmvaeModel, x, config: InversionConfig = InversionConfig()) -> int:
    """Same search as :func:`reclassify`, but the label is returned unconditionally."""
    return reclassify_batch(model, None, np.asarray(x, dtype=np.float64)[None, :], config)[0].decision.label
