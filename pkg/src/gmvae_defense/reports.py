"""Evaluation reports, attack/sweep/reclassification tables and rejected-sample dumps.

All floats are written with ``repr`` so reports are byte-reproducible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import attacks as atk
from .data import Dataset, idx_images_bytes, parse_idx_images
from .gmvae import GmvaeModel
from .reclassify import InversionConfig, reclassify_batch
from .selector import BatchDecisions, Thresholds, selective_classify_batch, NO_THRESHOLDS

SCHEMA_VERSION = 1
DEFAULT_EPSILONS = tuple(round(0.02 * i, 2) for i in range(16))  # 0.00 .. 0.30


@dataclass
class EvalReport:
    total: int
    correct: int
    wrong: int
    rejected: int
    accuracy: float  # percent of total accepted with the right label
    error: float  # percent accepted with a wrong label
    rejection: float
    per_class: dict
    thresholds: Optional[dict]

    def to_dict(self) -> dict:
        return asdict(self)


def _pct(n, total):
    return 100.0 * n / total


def eval_report(decisions: BatchDecisions, labels, thresholds: Optional[Thresholds]) -> EvalReport:
    labels = np.asarray(labels)
    accepted = decisions.accepted
    right = decisions.labels == labels
    correct, wrong = accepted & right, accepted & ~right
    per_class = {}
    for c in np.unique(labels):
        m = labels == c
        n = int(m.sum())
        per_class[str(int(c))] = {
            "n": n,
            "accuracy": _pct(int((correct & m).sum()), n),
            "error": _pct(int((wrong & m).sum()), n),
            "rejection": _pct(int((~accepted & m).sum()), n),
        }
    total = len(labels)
    n_c, n_w = int(correct.sum()), int(wrong.sum())
    n_r = total - n_c - n_w
    th = None if thresholds is None else {"tau_enc": thresholds.tau_enc, "tau_dec": thresholds.tau_dec, "confidence": thresholds.confidence}
    return EvalReport(total, n_c, n_w, n_r, _pct(n_c, total), _pct(n_w, total), _pct(n_r, total), per_class, th)


def evaluate(model: GmvaeModel, thresholds: Optional[Thresholds], dataset: Dataset) -> tuple[EvalReport, BatchDecisions]:
    """Selective classification over a labeled dataset; ``thresholds=None`` disables rejection."""
    decisions = selective_classify_batch(model, thresholds or NO_THRESHOLDS, dataset.images)
    return eval_report(decisions, dataset.labels, thresholds), decisions


def sample_rows(decisions: BatchDecisions, labels) -> list[dict]:
    rows = []
    reasons = decisions.reasons()
    for i in range(len(decisions)):
        rows.append(
            {
                "index": i,
                "true_label": int(labels[i]),
                "predicted": int(decisions.labels[i]),
                "verdict": "accept" if decisions.accepted[i] else "reject",
                "reason": reasons[i] or "",
                "mahalanobis_sq": float(decisions.mahalanobis_sq[i]),
                "recon_error": float(decisions.recon_errors[i]),
            }
        )
    return rows


def fgsm_sweep(model: GmvaeModel, thresholds: Thresholds, dataset: Dataset, epsilons: Sequence[float] = DEFAULT_EPSILONS):
    """FGSM at every epsilon; returns ``(rows, results)`` with percentages per epsilon."""
    rows, results = [], []
    for eps in epsilons:
        res = atk.fgsm(model, dataset.images, dataset.labels, eps, thresholds)
        rep = eval_report(res.decisions, dataset.labels, thresholds)
        rows.append({"epsilon": float(eps), "accuracy": rep.accuracy, "error": rep.error, "rejection": rep.rejection})
        results.append(res)
    return rows, results


def select_per_class(dataset: Dataset, per_class: int) -> np.ndarray:
    """First ``per_class`` indices of every class, in class order."""
    return np.concatenate([np.flatnonzero(dataset.labels == c)[:per_class] for c in range(dataset.num_classes)])


def target_grid(labels, num_classes: int):
    """Every (sample index, wrong target) pair."""
    pairs = [(i, t) for i, y in enumerate(labels) for t in range(num_classes) if t != y]
    idx = np.array([p[0] for p in pairs], dtype=np.int64)
    return idx, np.array([p[1] for p in pairs], dtype=np.int64)


def attack_rows(result: atk.AttackResult, y_true, targets=None, sample_ids=None, setting: float | int = 0.0) -> list[dict]:
    dec = result.decisions
    outcome = atk.outcomes(dec, y_true)
    eta = np.atleast_2d(result.perturbation)
    linf = np.abs(eta).max(axis=1)
    l2 = np.sqrt(np.sum(eta * eta, axis=1))
    objective = result.objective
    rows = []
    for i in range(len(dec)):
        rows.append(
            {
                "sample": int(i if sample_ids is None else sample_ids[i]),
                "true_label": "" if y_true is None else int(np.asarray(y_true)[i]),
                "target": "" if targets is None else int(targets[i]),
                "setting": setting,
                "outcome": outcome[i],
                "predicted": int(dec.labels[i]),
                "reason": dec.reasons()[i] or "",
                "final_objective": "" if objective is None else float(objective[i]),
                "eta_linf": float(linf[i]),
                "eta_l2": float(l2[i]),
                "mahalanobis_sq": float(dec.mahalanobis_sq[i]),
                "recon_error": float(dec.recon_errors[i]),
                "inspect": int(bool(dec.accepted[i]) and (y_true is None or outcome[i] == atk.EVADED)),
            }
        )
    return rows


def detected_by(decisions: BatchDecisions) -> list[str]:
    names = {"latent_outlier": "latent", "reconstruction_outlier": "recon", "both": "both"}
    return [names.get(r, "") if r else "" for r in decisions.reasons()]


def reclassification_rows(model: GmvaeModel, thresholds: Thresholds, images, true_labels=None, detected=None, config: InversionConfig = InversionConfig()):
    results = reclassify_batch(model, thresholds, images, config)
    rows = []
    for i, r in enumerate(results):
        d = r.decision
        rows.append(
            {
                "index": i,
                "detected_by": "" if detected is None else detected[i],
                "winning_class": int(d.label),
                "recon_error": float(d.recon_error),
                "mahalanobis_sq": float(d.mahalanobis_sq),
                "accepted": int(d.accepted),
                "true_label": "" if true_labels is None or true_labels[i] is None else int(true_labels[i]),
            }
        )
    return rows, results


def reclassification_summary(rows: list[dict]) -> dict:
    n = len(rows)
    labeled = [r for r in rows if r["true_label"] != ""]
    out = {"schema_version": SCHEMA_VERSION, "count": n, "accepted": sum(r["accepted"] for r in rows)}
    if labeled:
        out["label_accuracy"] = _pct(sum(r["winning_class"] == r["true_label"] for r in labeled), len(labeled))
        out["accepted_correct"] = _pct(sum(r["accepted"] and r["winning_class"] == r["true_label"] for r in labeled), len(labeled))
    return out


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_csv(path, rows: Iterable[dict], fieldnames: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def write_dump(prefix, images, rows: int, cols: int, true_labels, detected: Sequence[str], meta: dict | None = None) -> tuple[Path, Path]:
    """Rejected-sample dump: ``<prefix>-images.idx`` plus a ``<prefix>.json`` sidecar."""
    prefix = Path(prefix)
    img_path = prefix.with_name(prefix.name + "-images.idx")
    side_path = prefix.with_name(prefix.name + ".json")
    img_path.write_bytes(idx_images_bytes(np.asarray(images).reshape(-1, rows * cols), rows, cols))
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "images": img_path.name,
        "count": int(len(true_labels)),
        "true_labels": [None if t is None else int(t) for t in true_labels],
        "detected_by": list(detected),
        "meta": meta or {},
    }
    write_json(side_path, sidecar)
    return img_path, side_path


def read_dump(sidecar_path):
    sidecar_path = Path(sidecar_path)
    side = json.loads(sidecar_path.read_text())
    images, rows, cols = parse_idx_images((sidecar_path.parent / side["images"]).read_bytes())
    if len(images) != side["count"]:
        raise ValueError("dump sidecar count does not match its image file")
    return images, side["true_labels"], side["detected_by"], side
