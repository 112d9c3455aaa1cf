"""Encoder-only gradient attacks and full white-box attacks on the defended model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import diffmath as dm
from .gmvae import GmvaeModel
from .optim import backtracking_descent
from .selector import BatchDecisions, Decision, Thresholds, selective_classify_batch

EVADED = "evaded"
REJECTED = "rejected"
CORRECT = "correct"


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters.

    ``steps`` and ``step_size`` default per attack: PGD/MIM use 40 steps of
    ``2.5 * epsilon / steps``; the white-box attacks use 500 backtracking
    steps starting from a trial length of 0.01.
    """

    epsilon: float = 0.1
    steps: Optional[int] = None
    step_size: Optional[float] = None
    a: float = 2.0
    b: float = 2.0
    decay: float = 1.0
    eta_weight: float = 1.0
    latent_weighting: str = "inverse"
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if not (self.a > 1 and self.b > 1):
            raise ValueError("exponents a and b must exceed 1")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.latent_weighting not in ("inverse", "covariance"):
            raise ValueError("latent_weighting must be 'inverse' or 'covariance'")

    def iterative(self) -> tuple[int, float]:
        steps = 40 if self.steps is None else self.steps
        size = 2.5 * self.epsilon / steps if self.step_size is None else self.step_size
        return steps, size

    def whitebox(self) -> tuple[int, float]:
        return (500 if self.steps is None else self.steps), (0.01 if self.step_size is None else self.step_size)


@dataclass
class AttackResult:
    """Adversarial inputs (one row per attacked input) and the selector's verdicts."""

    x_adv: np.ndarray
    perturbation: np.ndarray
    decisions: Optional[BatchDecisions] = None
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    objective: Optional[np.ndarray] = None

    @property
    def decision(self) -> Decision:
        if self.decisions is None:
            raise ValueError("attack was run without thresholds")
        return self.decisions.decision(0)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _finish(model, thresholds, x0, x_adv, single, trace=None, objective=None) -> AttackResult:
    decisions = None if thresholds is None else selective_classify_batch(model, thresholds, x_adv)
    if single:
        return AttackResult(x_adv[0], x_adv[0] - x0[0], decisions, np.zeros((0, 0)) if trace is None else trace, objective)
    return AttackResult(x_adv, x_adv - x0, decisions, np.zeros((0, 0)) if trace is None else trace, objective)


# ---------------------------------------------------------------------------
# encoder-only attacks
# ---------------------------------------------------------------------------


def encoder_attack_loss(model: GmvaeModel, x, y_true):
    """Cross-entropy of softmax(-||f(x) - mu_c||^2) against ``y_true``; summed over a batch."""
    z = model.encode(x)
    dist = dm.sq_dist_to_centers(z, model.means)
    onehot = np.eye(model.num_classes)[np.asarray(y_true)]
    picked = dm.sum(dm.mul(dist, onehot), axis=-1)
    per_sample = dm.add(picked, dm.logsumexp(dm.mul(-1.0, dist), axis=-1))
    return dm.sum(per_sample)


def _loss_grad(model, x, y):
    tape = dm.Tape()
    node = tape.variable(x, name="x")
    return dm.backward(tape, encoder_attack_loss(model, node, y))["x"]


def fgsm(model: GmvaeModel, x, y_true, epsilon: float, thresholds: Thresholds | None = None) -> AttackResult:
    """One signed-gradient ascent step of size ``epsilon`` on the encoder loss, clipped to [0, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x0, single = _as_batch(x)
    y = np.atleast_1d(y_true)
    x_adv = np.clip(x0 + epsilon * np.sign(_loss_grad(model, x0, y)), 0.0, 1.0)
    return _finish(model, thresholds, x0, x_adv, single)


def _iterate(model, x0, y, epsilon, steps, size, decay):
    x_adv = x0.copy()
    momentum = np.zeros_like(x0)
    for _ in range(steps):
        g = _loss_grad(model, x_adv, y)
        if decay is not None:
            norm = np.sum(np.abs(g), axis=1, keepdims=True)
            momentum = decay * momentum + g / np.where(norm > 0, norm, 1.0)
            g = momentum
        x_adv = x_adv + size * np.sign(g)
        x_adv = np.clip(x_adv, x0 - epsilon, x0 + epsilon)
        x_adv = np.clip(x_adv, 0.0, 1.0)
    return x_adv


def pgd(model: GmvaeModel, x, y_true, config: AttackConfig, thresholds: Thresholds | None = None) -> AttackResult:
    """Signed-gradient ascent projected onto the L-inf ball of radius ``epsilon`` and onto [0, 1]."""
    x0, single = _as_batch(x)
    steps, size = config.iterative()
    x_adv = _iterate(model, x0, np.atleast_1d(y_true), config.epsilon, steps, size, None)
    return _finish(model, thresholds, x0, x_adv, single)


def momentum_iterative(model: GmvaeModel, x, y_true, config: AttackConfig, thresholds: Thresholds | None = None) -> AttackResult:
    """PGD whose direction is the sign of accumulated L1-normalised gradients."""
    x0, single = _as_batch(x)
    steps, size = config.iterative()
    x_adv = _iterate(model, x0, np.atleast_1d(y_true), config.epsilon, steps, size, config.decay)
    return _finish(model, thresholds, x0, x_adv, single)


# ---------------------------------------------------------------------------
# white-box attacks
# ---------------------------------------------------------------------------


def _latent_penalty(model, z, targets, weighting):
    sq = dm.sum_squares(dm.sub(z, model.means[targets]), axis=-1)
    var = model.prior.variance
    return dm.mul(sq, 1.0 / var if weighting == "inverse" else var)


def whitebox_terms(model: GmvaeModel, thresholds: Thresholds, x, targets, config: AttackConfig):
    """Threshold-normalised reconstruction and latent terms, before exponentiation."""
    z = model.encode(x)
    recon = dm.sum_squares(dm.sub(x, model.decode(z)), axis=-1)
    latent = _latent_penalty(model, z, np.asarray(targets), config.latent_weighting)
    return dm.mul(recon, 1.0 / thresholds.tau_dec), dm.mul(latent, 1.0 / thresholds.tau_enc)


def fooling_objective(model: GmvaeModel, thresholds: Thresholds, x, targets, config: AttackConfig):
    """Per-row ``(recon / tau_dec)^a + (latent / tau_enc)^b``."""
    r, l = whitebox_terms(model, thresholds, x, targets, config)
    return dm.add(dm.power(r, config.a), dm.power(l, config.b))


def adversarial_objective(model: GmvaeModel, thresholds: Thresholds, x_o, eta, targets, config: AttackConfig):
    """Fooling objective at ``x_o + eta`` plus ``eta_weight * ||eta||^2``."""
    x = dm.add(x_o, eta)
    base = fooling_objective(model, thresholds, x, targets, config)
    return dm.add(base, dm.mul(config.eta_weight, dm.sum_squares(eta, axis=-1)))


def whitebox_adversarial(
    model: GmvaeModel, thresholds: Thresholds, x_o, target_class, config: AttackConfig = AttackConfig()
) -> AttackResult:
    """Targeted attack aware of encoder, decoder and both thresholds.

    The perturbation starts at zero and follows projected backtracking
    gradient descent; ``x_o + eta`` is kept inside [0, 1].
    """
    x0, single = _as_batch(x_o)
    targets = np.broadcast_to(np.atleast_1d(target_class), (len(x0),)).copy()
    steps, size = config.whitebox()

    def objective(eta, rows):
        return adversarial_objective(model, thresholds, x0[rows], eta, targets[rows], config)

    def project(eta, rows):
        return np.clip(x0[rows] + eta, 0.0, 1.0) - x0[rows]

    res = backtracking_descent(objective, np.zeros_like(x0), steps, size, project)
    x_adv = np.clip(x0 + res.x, 0.0, 1.0)
    return _finish(model, thresholds, x0, x_adv, single, res.trace, res.value)


def whitebox_fooling(
    model: GmvaeModel, thresholds: Thresholds, target_class, config: AttackConfig = AttackConfig(), count: Optional[int] = None
) -> AttackResult:
    """Optimise an image from uniform noise until it passes as ``target_class``.

    ``target_class`` may be an array of targets (one image each); ``count``
    repeats a single target.  Noise is drawn from ``config.seed``.
    """
    targets = np.atleast_1d(np.asarray(target_class))
    if count is not None:
        targets = np.repeat(targets, count)
    rng = np.random.default_rng(config.seed)
    x0 = rng.uniform(0.0, 1.0, size=(len(targets), model.input_dim))
    steps, size = config.whitebox()

    def objective(x, rows):
        return fooling_objective(model, thresholds, x, targets[rows], config)

    res = backtracking_descent(objective, x0, steps, size, lambda x, rows: np.clip(x, 0.0, 1.0))
    single = np.ndim(target_class) == 0 and count is None
    return _finish(model, thresholds, x0, res.x, single, res.trace, res.value)


def outcomes(decisions: BatchDecisions, y_true=None) -> np.ndarray:
    """``evaded``/``rejected``/``correct`` per row; without labels every acceptance counts as evaded."""
    accepted = decisions.accepted
    out = np.where(accepted, EVADED, REJECTED).astype(object)
    if y_true is not None:
        out[accepted & (decisions.labels == np.asarray(y_true))] = CORRECT
    return out


def with_seed(config: AttackConfig, seed: int) -> AttackConfig:
    return replace(config, seed=seed)
