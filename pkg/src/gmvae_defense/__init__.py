"""Gaussian-mixture autoencoder classifier with input rejection and latent-space reclassification."""

from .attacks import AttackConfig, AttackResult, fgsm, momentum_iterative, pgd, whitebox_adversarial, whitebox_fooling
from .data import UNLABELED, Dataset, SyntheticSpec, gen_synthetic, load_idx, write_idx
from .gmvae import GmvaeModel, init_model, load_checkpoint, save_checkpoint
from .reclassify import InversionConfig, reclassify, reclassify_accept_always
from .selector import Decision, Thresholds, calibrate, chi_square_critical, classify, selective_classify
from .training import TrainConfig, TrainStats, train

__all__ = [
    "AttackConfig",
    "AttackResult",
    "Dataset",
    "Decision",
    "GmvaeModel",
    "InversionConfig",
    "SyntheticSpec",
    "Thresholds",
    "TrainConfig",
    "TrainStats",
    "UNLABELED",
    "calibrate",
    "chi_square_critical",
    "classify",
    "fgsm",
    "gen_synthetic",
    "init_model",
    "load_checkpoint",
    "load_idx",
    "momentum_iterative",
    "pgd",
    "reclassify",
    "reclassify_accept_always",
    "save_checkpoint",
    "selective_classify",
    "train",
    "whitebox_adversarial",
    "whitebox_fooling",
    "write_idx",
]
