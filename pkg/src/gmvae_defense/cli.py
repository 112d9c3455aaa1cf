"""Command-line interface: train, eval, sweep, attack, reclassify, gen-data, calibrate.

Settings come from built-in defaults, then an optional flat JSON ``--config``
file whose keys are the long flag names with underscores, then flags.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attacks as atk
from . import reports
from .data import Dataset, IdxError, SyntheticSpec, gen_synthetic, load_idx, write_idx
from .gmvae import DEFAULT_NOISE_VARIANCE, CheckpointError, load_checkpoint, save_checkpoint
from .reclassify import InversionConfig
from .selector import DEFAULT_CONFIDENCE, Thresholds, calibrate
from .training import TrainConfig, TrainStats, train

COMMANDS = ("train", "eval", "sweep", "attack", "reclassify", "gen-data", "calibrate")
ATTACKS = ("fgsm", "pgd", "mim", "whitebox", "fooling")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    out_dir: str = "runs"
    seed: int = 0
    # dataset: synthetic unless IDX paths are given
    classes: int = 4
    side: int = 16
    train_per_class: int = 500
    test_per_class: int = 200
    data_noise: float = 0.1
    data_seed: int = 0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    # training
    epochs: int = TrainConfig.epochs
    alpha: float = 1.0
    lr: float = 1e-3
    batch_size: int = 64
    semi_supervised: bool = False
    labeled_per_class: Optional[int] = None
    warmup_epochs: int = TrainConfig.warmup_epochs
    latent_dim: Optional[int] = None
    noise_variance: float = DEFAULT_NOISE_VARIANCE
    log_csv: Optional[str] = None
    # model and thresholds
    checkpoint: Optional[str] = None
    stats: Optional[str] = None
    thresholds: Optional[str] = None
    confidence: float = DEFAULT_CONFIDENCE
    tau_enc: Optional[float] = None
    tau_dec: Optional[float] = None
    # attacks
    attack: str = "fgsm"
    epsilon: float = 0.1
    steps: Optional[int] = None
    step_size: Optional[float] = None
    a: float = 2.0
    b: float = 2.0
    decay: float = 1.0
    eta_weight: float = 1.0
    latent_weighting: str = "inverse"
    samples_per_class: Optional[int] = None
    fooling_per_class: int = 50
    epsilons: list = field(default_factory=lambda: list(reports.DEFAULT_EPSILONS))
    dump_rejected: bool = False
    # reclassification
    dump: Optional[str] = None
    inversion_steps: int = 300
    inversion_step_size: float = 0.01

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "model.gmva"

    @property
    def stats_path(self) -> Path:
        return Path(self.stats) if self.stats else self.checkpoint_path.with_suffix(".stats.json")

    def uses_idx(self, split: str) -> bool:
        return getattr(self, f"{split}_images") is not None or getattr(self, f"{split}_labels") is not None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha,
            learning_rate=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            semi_supervised=self.semi_supervised,
            labeled_per_class=self.labeled_per_class,
            warmup_epochs=self.warmup_epochs,
            latent_dim=self.latent_dim,
            noise_variance=self.noise_variance,
        )

    def attack_config(self) -> atk.AttackConfig:
        return atk.AttackConfig(
            epsilon=self.epsilon,
            steps=self.steps,
            step_size=self.step_size,
            a=self.a,
            b=self.b,
            decay=self.decay,
            eta_weight=self.eta_weight,
            latent_weighting=self.latent_weighting,
            seed=self.seed,
        )

    def synthetic(self, split: str) -> SyntheticSpec:
        per_class = self.train_per_class if split == "train" else self.test_per_class
        seed = self.data_seed if split == "train" else self.data_seed + 1
        return SyntheticSpec(self.classes, per_class, self.side, self.data_noise, seed)


_FIELDS = {f.name for f in fields(RunConfig)} - {"command"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add(group, name, **kw):
    group.add_argument(_flag(name), dest=name, default=argparse.SUPPRESS, **kw)


def _common(p):
    p.add_argument("--config", default=None, help="flat JSON settings file; flags win")
    _add(p, "out_dir", help="output directory (default runs)")
    _add(p, "seed", type=int)


def _data_args(p):
    g = p.add_argument_group("data")
    for name, typ in (("classes", int), ("side", int), ("train_per_class", int), ("test_per_class", int), ("data_noise", float), ("data_seed", int)):
        _add(g, name, type=typ)
    for name in ("train_images", "train_labels", "test_images", "test_labels"):
        _add(g, name, metavar="PATH")


def _model_args(p, thresholds=True):
    g = p.add_argument_group("model")
    _add(g, "checkpoint", metavar="PATH")
    _add(g, "stats", metavar="PATH")
    if thresholds:
        _add(g, "thresholds", metavar="PATH", help="thresholds JSON; otherwise calibrated from the stats file")
        _add(g, "tau_enc", type=float)
        _add(g, "tau_dec", type=float)
    _add(g, "confidence", type=float)


def _attack_args(g):
    _add(g, "epsilon", type=float)
    _add(g, "steps", type=int)
    _add(g, "step_size", type=float)
    _add(g, "a", type=float)
    _add(g, "b", type=float)
    _add(g, "decay", type=float)
    _add(g, "eta_weight", type=float)
    _add(g, "latent_weighting", choices=("inverse", "covariance"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gmvae-defense", description="Generative classifier with a reject option, attacks and reclassification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write checkpoint plus stats")
    _common(p)
    _data_args(p)
    g = p.add_argument_group("training")
    for name, typ in (("epochs", int), ("alpha", float), ("lr", float), ("batch_size", int), ("labeled_per_class", int), ("warmup_epochs", int), ("latent_dim", int), ("noise_variance", float)):
        _add(g, name, type=typ)
    _add(g, "semi_supervised", action="store_true")
    _add(g, "log_csv", metavar="PATH")
    _add(g, "checkpoint", metavar="PATH")
    _add(g, "stats", metavar="PATH")

    p = sub.add_parser("eval", help="selective classification report on the test split")
    _common(p)
    _data_args(p)
    _model_args(p)
    _add(p, "dump_rejected", action="store_true")

    p = sub.add_parser("sweep", help="FGSM over an epsilon grid")
    _common(p)
    _data_args(p)
    _model_args(p)
    _add(p, "epsilons", type=float, nargs="+")
    _add(p, "dump_rejected", action="store_true")

    p = sub.add_parser("attack", help="run one attack over a sample/target grid")
    _common(p)
    _data_args(p)
    _model_args(p)
    g = p.add_argument_group("attack")
    _add(g, "attack", choices=ATTACKS)
    _attack_args(g)
    _add(g, "samples_per_class", type=int)
    _add(g, "fooling_per_class", type=int)
    _add(g, "dump_rejected", action="store_true")

    p = sub.add_parser("reclassify", help="reclassify a rejected-sample dump")
    _common(p)
    _model_args(p)
    _add(p, "dump", metavar="SIDECAR.json")
    _add(p, "inversion_steps", type=int)
    _add(p, "inversion_step_size", type=float)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as IDX files")
    _common(p)
    _data_args(p)

    p = sub.add_parser("calibrate", help="derive thresholds from training stats")
    _common(p)
    _model_args(p, thresholds=False)
    return parser


def parse_config(argv: Sequence[str]) -> RunConfig:
    ns = vars(build_parser().parse_args(list(argv)))
    command = ns.pop("command")
    config_path = ns.pop("config", None)
    settings = {}
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(raw) - _FIELDS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        settings.update(raw)
    settings.update(ns)
    cfg = replace(RunConfig(), command=command, **settings)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.attack not in ATTACKS:
        raise UsageError(f"unknown attack {cfg.attack!r}; choose from {', '.join(ATTACKS)}")
    for split in ("train", "test"):
        if cfg.uses_idx(split) and (getattr(cfg, f"{split}_images") is None or getattr(cfg, f"{split}_labels") is None):
            raise UsageError(f"--{split}-images and --{split}-labels must be given together")
    if cfg.semi_supervised and cfg.labeled_per_class is None:
        raise UsageError("--semi-supervised needs --labeled-per-class")
    if cfg.command == "reclassify" and cfg.dump is None:
        raise UsageError("reclassify needs --dump")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _dataset(cfg: RunConfig, split: str) -> Dataset:
    if cfg.uses_idx(split):
        return load_idx(getattr(cfg, f"{split}_images"), getattr(cfg, f"{split}_labels"), cfg.classes)
    return gen_synthetic(cfg.synthetic(split))


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_model(cfg: RunConfig):
    return load_checkpoint(_require(cfg.checkpoint_path, "checkpoint"))


def _thresholds(cfg: RunConfig, model) -> Thresholds:
    if cfg.thresholds is not None:
        th = Thresholds.load(_require(Path(cfg.thresholds), "thresholds file"))
    else:
        stats = TrainStats.load(_require(cfg.stats_path, "training stats"))
        th = calibrate(stats, model.latent_dim, cfg.confidence)
    if cfg.tau_enc is not None or cfg.tau_dec is not None:
        th = Thresholds(th.tau_enc if cfg.tau_enc is None else cfg.tau_enc, th.tau_dec if cfg.tau_dec is None else cfg.tau_dec, th.confidence)
    return th


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


EVAL_FIELDS = ("index", "true_label", "predicted", "verdict", "reason", "mahalanobis_sq", "recon_error")
SWEEP_FIELDS = ("epsilon", "accuracy", "error", "rejection")
ATTACK_FIELDS = (
    "sample", "true_label", "target", "setting", "outcome", "predicted", "reason",
    "final_objective", "eta_linf", "eta_l2", "mahalanobis_sq", "recon_error", "inspect",
)  # fmt: skip
RECLASSIFY_FIELDS = ("index", "detected_by", "winning_class", "recon_error", "mahalanobis_sq", "accepted", "true_label")
TRAIN_LOG_FIELDS = ("epoch", "loss", "recon", "latent")


def _dump_rejected(path_prefix: Path, dataset_shape, images, decisions, true_labels, meta) -> Optional[Path]:
    rejected = ~decisions.accepted
    rows, cols = dataset_shape
    detected = [d for d, r in zip(reports.detected_by(decisions), rejected) if r]
    labels = [None if t is None else int(t) for t, r in zip(true_labels, rejected) if r]
    path_prefix.parent.mkdir(parents=True, exist_ok=True)
    _, sidecar = reports.write_dump(path_prefix, images[rejected], rows, cols, labels, detected, meta)
    return sidecar


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> dict:
    dataset = _dataset(cfg, "train")
    out = _out(cfg)
    log = []

    def progress(rec):
        log.append(rec)
        _emit(rec)

    model, stats = train(dataset, cfg.train_config(), progress=progress)
    ckpt = cfg.checkpoint_path
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    stats.save(cfg.stats_path)
    if cfg.log_csv is not None:
        reports.write_csv(cfg.log_csv, log, TRAIN_LOG_FIELDS)
    summary = {
        "checkpoint": str(ckpt),
        "stats": str(cfg.stats_path),
        "labeled": stats.labeled_count[-1] if stats.labeled_count else 0,
        "unlabeled": stats.unlabeled_count[-1] if stats.unlabeled_count else 0,
        "out_dir": str(out),
    }
    _emit(summary)
    return summary


def cmd_eval(cfg: RunConfig) -> dict:
    model = _load_model(cfg)
    th = _thresholds(cfg, model)
    test = _dataset(cfg, "test")
    plain, _ = reports.evaluate(model, None, test)
    gated, decisions = reports.evaluate(model, th, test)
    out = _out(cfg)
    payload = {"schema_version": reports.SCHEMA_VERSION, "unthresholded": plain.to_dict(), "thresholded": gated.to_dict()}
    reports.write_json(out / "eval.json", payload)
    reports.write_csv(out / "eval_samples.csv", reports.sample_rows(decisions, test.labels), EVAL_FIELDS)
    if cfg.dump_rejected:
        meta = {"source": "eval", "total": gated.total, "accepted_correct": gated.correct}
        _dump_rejected(out / "dumps" / "eval-rejected", (test.rows, test.cols), test.images, decisions, test.labels, meta)
    _emit({k: {m: payload[k][m] for m in ("accuracy", "error", "rejection")} for k in ("unthresholded", "thresholded")})
    return payload


def _eps_tag(eps: float) -> str:
    return f"{eps:.2f}"


def cmd_sweep(cfg: RunConfig) -> list:
    model = _load_model(cfg)
    th = _thresholds(cfg, model)
    test = _dataset(cfg, "test")
    rows, results = reports.fgsm_sweep(model, th, test, [float(e) for e in cfg.epsilons])
    out = _out(cfg)
    reports.write_csv(out / "sweep.csv", rows, SWEEP_FIELDS)
    if cfg.dump_rejected:
        for eps, res in zip(cfg.epsilons, results):
            meta = {"source": "fgsm", "epsilon": float(eps), "total": len(test)}
            _dump_rejected(out / "dumps" / f"fgsm-eps{_eps_tag(eps)}", (test.rows, test.cols), res.x_adv, res.decisions, test.labels, meta)
    for r in rows:
        _emit(r)
    return rows


def _attack_inputs(cfg, test):
    if cfg.samples_per_class is None:
        return np.arange(len(test))
    return reports.select_per_class(test, cfg.samples_per_class)


def run_attack(cfg: RunConfig, model, th, test: Dataset):
    """Rows, result, true labels and per-row targets for the configured attack."""
    config = cfg.attack_config()
    if cfg.attack == "fooling":
        targets = np.repeat(np.arange(model.num_classes), cfg.fooling_per_class)
        res = atk.whitebox_fooling(model, th, targets, config)
        rows = reports.attack_rows(res, None, targets, setting=config.whitebox()[0])
        return rows, res, None, targets
    idx = _attack_inputs(cfg, test)
    x, y = test.images[idx], test.labels[idx]
    if cfg.attack == "whitebox":
        if cfg.samples_per_class is None:
            raise UsageError("the whitebox attack needs --samples-per-class")
        pair_rows, targets = reports.target_grid(y, model.num_classes)
        res = atk.whitebox_adversarial(model, th, x[pair_rows], targets, config)
        rows = reports.attack_rows(res, y[pair_rows], targets, idx[pair_rows], setting=config.whitebox()[0])
        return rows, res, y[pair_rows], targets
    if cfg.attack == "fgsm":
        res = atk.fgsm(model, x, y, cfg.epsilon, th)
    elif cfg.attack == "pgd":
        res = atk.pgd(model, x, y, config, th)
    else:
        res = atk.momentum_iterative(model, x, y, config, th)
    return reports.attack_rows(res, y, None, idx, setting=cfg.epsilon), res, y, None


def cmd_attack(cfg: RunConfig) -> dict:
    model = _load_model(cfg)
    th = _thresholds(cfg, model)
    test = _dataset(cfg, "test")
    rows, res, y_true, _ = run_attack(cfg, model, th, test)
    out = _out(cfg)
    reports.write_csv(out / f"attack-{cfg.attack}.csv", rows, ATTACK_FIELDS)
    counts = {k: sum(r["outcome"] == k for r in rows) for k in (atk.EVADED, atk.REJECTED, atk.CORRECT)}
    summary = {"schema_version": reports.SCHEMA_VERSION, "attack": cfg.attack, "total": len(rows), "outcomes": counts, "inspect": sum(r["inspect"] for r in rows)}
    reports.write_json(out / f"attack-{cfg.attack}.json", summary)
    if cfg.dump_rejected:
        labels = [None] * len(rows) if y_true is None else list(y_true)
        _dump_rejected(out / "dumps" / f"attack-{cfg.attack}", (test.rows, test.cols), res.x_adv, res.decisions, labels, {"source": cfg.attack})
    _emit(summary)
    return summary


def cmd_reclassify(cfg: RunConfig) -> dict:
    model = _load_model(cfg)
    th = _thresholds(cfg, model)
    images, labels, detected, side = reports.read_dump(_require(Path(cfg.dump), "dump sidecar"))
    if len(images) == 0:
        raise ValueError(f"dump {cfg.dump} holds no samples")
    inv = InversionConfig(steps=cfg.inversion_steps, step_size=cfg.inversion_step_size)
    rows, _ = reports.reclassification_rows(model, th, images, labels, detected, inv)
    summary = reports.reclassification_summary(rows)
    meta = side.get("meta", {})
    if "total" in meta and "accepted_correct" in meta and "label_accuracy" in summary:
        recovered = sum(r["winning_class"] == r["true_label"] for r in rows)
        summary["pipeline_accuracy_before"] = 100.0 * meta["accepted_correct"] / meta["total"]
        summary["pipeline_accuracy_after"] = 100.0 * (meta["accepted_correct"] + recovered) / meta["total"]
    out = _out(cfg)
    reports.write_csv(out / "reclassify.csv", rows, RECLASSIFY_FIELDS)
    reports.write_json(out / "reclassify.json", summary)
    _emit(summary)
    return summary


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = _out(cfg)
    written = {}
    for split in ("train", "test"):
        ds = gen_synthetic(cfg.synthetic(split))
        img, lab = out / f"{split}-images.idx", out / f"{split}-labels.idx"
        write_idx(ds, img, lab)
        written[split] = [str(img), str(lab)]
    _emit(written)
    return written


def cmd_calibrate(cfg: RunConfig) -> dict:
    model = _load_model(cfg)
    stats = TrainStats.load(_require(cfg.stats_path, "training stats"))
    th = calibrate(stats, model.latent_dim, cfg.confidence)
    path = _out(cfg) / "thresholds.json"
    th.save(path)
    payload = json.loads(th.to_json())
    _emit(payload)
    return payload


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "attack": cmd_attack,
    "reclassify": cmd_reclassify,
    "gen-data": cmd_gen_data,
    "calibrate": cmd_calibrate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
        HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, CheckpointError, IdxError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
