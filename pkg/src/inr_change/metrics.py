"""Intersection over union, rank-based AUC, and the evaluation summary."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.stats import rankdata

from .synth import ADDITION, CLASS_NAMES, DELETION, UNCHANGED


class UndefinedAucError(ValueError):
    pass


def iou(pred, truth, cls: int) -> float:
    """``|P & G| / |P | G|`` for one class; 1.0 when the class is absent from both."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    p, g = pred == cls, truth == cls
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def auc(scores, positives) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if s.shape != pos.shape:
        raise ValueError("scores and labels must be aligned")
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalResult:
    """Change-detection scores on the pc1 support.

    ``iou_mean`` averages the Addition and Deletion IoUs only (Unchanged is
    reported separately). AUCs are NaN when a setting has a single class.
    """

    iou_addition: float
    iou_deletion: float
    iou_unchanged: float
    iou_mean: float
    auc_addition: float
    auc_deletion: float
    auc_change: float
    auc_mean: float
    rmse_m: Optional[float] = None
    confusion: list = field(default_factory=list)
    n_points: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


def _safe_auc(scores, positives) -> float:
    try:
        return auc(scores, positives)
    except UndefinedAucError:
        return float("nan")


def confusion_matrix(pred, truth) -> np.ndarray:
    """Counts ``[truth, pred]`` over classes (Unchanged, Addition, Deletion)."""
    classes = (UNCHANGED, ADDITION, DELETION)
    return np.array([[int(np.count_nonzero((truth == t) & (pred == p))) for p in classes]
                     for t in classes])


def evaluate(labels, dz, truth, rmse_m: Optional[float] = None) -> EvalResult:
    """Score predicted labels and raw ``dz`` against ground truth on the same support.

    ``labels`` may be a ChangeLabels or an integer array; ``dz`` a ChangeField or array.
    """
    pred = np.asarray(getattr(labels, "labels", labels))
    dz = np.asarray(getattr(dz, "dz", dz), dtype=np.float64)
    truth = np.asarray(truth)
    if not (len(pred) == len(dz) == len(truth)):
        raise ValueError(f"alignment mismatch: {len(pred)} labels, {len(dz)} dz, {len(truth)} truth")
    ia, idl, iu = iou(pred, truth, ADDITION), iou(pred, truth, DELETION), iou(pred, truth, UNCHANGED)
    aa = _safe_auc(dz, truth == ADDITION)
    ad = _safe_auc(-dz, truth == DELETION)
    ac = _safe_auc(np.abs(dz), truth != UNCHANGED)
    aucs = [a for a in (aa, ad, ac) if not math.isnan(a)]
    return EvalResult(
        iou_addition=ia, iou_deletion=idl, iou_unchanged=iu, iou_mean=(ia + idl) / 2.0,
        auc_addition=aa, auc_deletion=ad, auc_change=ac,
        auc_mean=float(np.mean(aucs)) if aucs else float("nan"),
        rmse_m=rmse_m, confusion=confusion_matrix(pred, truth).tolist(), n_points=len(pred),
    )


def format_table(results: Mapping[str, EvalResult]) -> str:
    """Plain-text summary, one row per run, scores in percent."""
    cols = ["IoU add", "IoU del", "IoU mean", "AUC add", "AUC del", "AUC chg", "AUC mean"]
    name_w = max([len("run")] + [len(k) for k in results])
    lines = [f"{'run':<{name_w}} | " + " | ".join(f"{c:>8}" for c in cols)]
    lines.append("-" * len(lines[0]))
    for name, r in results.items():
        vals = [r.iou_addition, r.iou_deletion, r.iou_mean, r.auc_addition,
                r.auc_deletion, r.auc_change, r.auc_mean]
        cells = ["     n/a" if math.isnan(v) else f"{100 * v:8.2f}" for v in vals]
        lines.append(f"{name:<{name_w}} | " + " | ".join(cells))
    return "\n".join(lines)


def class_name(c: int) -> str:
    return CLASS_NAMES[int(c)]
