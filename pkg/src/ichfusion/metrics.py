"""Weighted log loss, ROC-AUC and study-level aggregation, plus the prediction CSV format."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, ShapeError, ValidationError
from .numeric import CLASS_NAMES, NUM_CLASSES
from .training import DEFAULT_CLASS_WEIGHTS

CSV_HEADER = ("id",) + CLASS_NAMES
_SLICE_ID = re.compile(r"^(.*)_(\d+)$")


class UndefinedAUC(ValueError):
    """AUC needs at least one positive and one negative."""


def check_loss_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (NUM_CLASSES,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ConfigError(f"loss weights must be {NUM_CLASSES} non-negative values summing to 1, got {weights}")
    return w


def weighted_log_loss(preds, labels, weights=DEFAULT_CLASS_WEIGHTS, clip_eps: float = 1e-15) -> float:
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2 or p.shape[1] != NUM_CLASSES:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} must both be [N, {NUM_CLASSES}]")
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValidationError("predictions must lie in [0, 1]")
    w = check_loss_weights(weights)
    p = np.clip(p, clip_eps, 1.0 - clip_eps)
    per = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float((per @ w).mean())


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s)  # average ranks: ties contribute one half
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def study_level_aggregate(slice_preds) -> np.ndarray:
    p = np.asarray(slice_preds, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("study has no slices to aggregate")
    return p.max(axis=0)


# ---------------------------------------------------------------- CSV files


def slice_id(study_id: str, index: int) -> str:
    return f"{study_id}_{index}"


def split_slice_id(row_id: str):
    """``(study_id, index)`` for a slice id, or ``None`` if ``row_id`` is a study id."""
    m = _SLICE_ID.match(row_id)
    return (m.group(1), int(m.group(2))) if m else None


def write_predictions_csv(path, rows: dict[str, np.ndarray]) -> None:
    """``rows`` maps id -> 6 probabilities; written in insertion order with repr precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rid, vals in rows.items():
            writer.writerow([rid] + [repr(float(v)) for v in vals])


def read_predictions_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValidationError(f"{path}: header must be {','.join(CSV_HEADER)}")
        rows = {}
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(CSV_HEADER):
                raise ValidationError(f"{path}:{line_no}: expected {len(CSV_HEADER)} fields")
            if rec[0] in rows:
                raise ValidationError(f"{path}:{line_no}: duplicate id {rec[0]!r}")
            try:
                rows[rec[0]] = np.array([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise ValidationError(f"{path}:{line_no}: {exc}") from exc
    return rows


def aggregate_rows(rows: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Collapse slice-level rows to study level by per-class max; study rows pass through."""
    groups: dict[str, list[np.ndarray]] = {}
    for rid, vals in rows.items():
        parts = split_slice_id(rid)
        groups.setdefault(parts[0] if parts else rid, []).append(vals)
    return {sid: study_level_aggregate(np.stack(v)) for sid, v in groups.items()}


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    mode: str
    weighted_log_loss: float
    auc: dict[str, float | None]
    mean_auc: float | None
    n_samples: int
    positives: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "weighted_log_loss": self.weighted_log_loss,
            "auc": dict(self.auc),
            "mean_auc": self.mean_auc,
            "n_samples": self.n_samples,
            "positives": dict(self.positives),
        }

    def table(self) -> str:
        names = {
            "any": "ICH (any subtypes)",
            "intraparenchymal": "Intraparenchymal",
            "intraventricular": "Intraventricular",
            "subarachnoid": "Subarachnoid",
            "subdural": "Subdural",
            "extradural": "Extradural",
        }
        fmt = lambda v: "   n/a" if v is None else f"{v:.4f}"  # noqa: E731
        lines = [f"{'Findings':<22}{'AUC':>8}", "-" * 30]
        for c in CLASS_NAMES:
            lines.append(f"{names[c]:<22}{fmt(self.auc[c]):>8}")
        lines += ["-" * 30, f"{'Mean':<22}{fmt(self.mean_auc):>8}"]
        lines.append(f"weighted log loss = {self.weighted_log_loss:.5f}  ({self.mode}, n={self.n_samples})")
        return "\n".join(lines)


def evaluate_arrays(preds, labels, mode="slice", weights=DEFAULT_CLASS_WEIGHTS) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    auc = {}
    for c, name in enumerate(CLASS_NAMES):
        try:
            auc[name] = roc_auc(preds[:, c], labels[:, c])
        except UndefinedAUC:
            auc[name] = None
    defined = [v for v in auc.values() if v is not None]
    return MetricsReport(
        mode=mode,
        weighted_log_loss=weighted_log_loss(preds, labels, weights),
        auc=auc,
        mean_auc=float(np.mean(defined)) if defined else None,
        n_samples=int(preds.shape[0]),
        positives={name: int(labels[:, c].sum()) for c, name in enumerate(CLASS_NAMES)},
    )


def evaluate(predictions_path, labels_path, mode: str = "slice") -> MetricsReport:
    """Join prediction and label CSVs on id and score them.

    In ``study`` mode slice rows (``<study>_<index>``) are first reduced to
    per-study maxima on both sides.
    """
    if mode not in ("slice", "study"):
        raise ConfigError(f"mode must be 'slice' or 'study', got {mode!r}")
    preds = read_predictions_csv(predictions_path)
    labels = read_predictions_csv(labels_path)
    if mode == "study":
        preds, labels = aggregate_rows(preds), aggregate_rows(labels)
    missing = sorted(set(labels) - set(preds))
    extra = sorted(set(preds) - set(labels))
    if missing or extra:
        raise ValidationError(f"id mismatch: missing predictions for {missing}, unexpected ids {extra}")
    ids = sorted(labels)
    y = np.stack([labels[i] for i in ids])
    if not np.isin(y, (0, 1)).all():
        raise ValidationError(f"{labels_path}: labels must be 0 or 1")
    return evaluate_arrays(np.stack([preds[i] for i in ids]), y, mode)
