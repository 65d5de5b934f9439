"""Dataset-level evaluation: mean IoU, mean Dice, pixelwise AUC-PR."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyGroundTruth


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap 2|a&b| / (|a|+|b|); two empty masks count as 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def auc_pr(heatmap: np.ndarray, gt: np.ndarray) -> float:
    """Area under the pixelwise precision-recall curve.

    Every distinct heatmap value serves as a threshold (prediction = value >=
    threshold); the area is a trapezoid over recall, anchored at recall 0 with
    the precision of the strictest threshold.
    """
    scores = np.asarray(heatmap, dtype=np.float64).ravel()
    labels = np.asarray(gt, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("heatmap and ground truth dims differ")
    n_pos = np.count_nonzero(labels)
    if n_pos == 0:
        raise EmptyGroundTruth("ground-truth mask has no foreground")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels, dtype=np.float64)
    fp = np.cumsum(~sorted_labels, dtype=np.float64)
    # last index of each distinct score = the complete prediction set at that threshold
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([boundaries, [len(sorted_scores) - 1]])

    precision = tp[idx] / (tp[idx] + fp[idx])
    recall = tp[idx] / n_pos
    prev_r, prev_p = 0.0, precision[0]
    area = 0.0
    for r, p in zip(recall, precision):
        area += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return float(area)


@dataclass(frozen=True)
class EvalRecord:
    image_id: str
    iou: float
    dice: float
    auc_pr: float | None = None
    failed: bool = False
    error: str = ""


def aggregate(records: list[EvalRecord]) -> tuple[float, float, float | None]:
    """Unweighted means of per-image metrics. AUC is averaged over the records
    that have one, None when no record does."""
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    m_iou = float(np.mean([r.iou for r in records]))
    m_dice = float(np.mean([r.dice for r in records]))
    aucs = [r.auc_pr for r in records if r.auc_pr is not None]
    m_auc = float(np.mean(aucs)) if aucs else None
    return m_iou, m_dice, m_auc


def write_records_csv(path: str | Path, records: list[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "iou", "dice", "auc_pr"])
        for r in records:
            writer.writerow([r.image_id, f"{r.iou:.6f}", f"{r.dice:.6f}",
                             "" if r.auc_pr is None else f"{r.auc_pr:.6f}"])


def write_summary_json(path: str | Path, records: list[EvalRecord]) -> dict:
    m_iou, m_dice, m_auc = aggregate(records)
    summary = {
        "num_images": len(records),
        "num_failed": sum(r.failed for r in records),
        "m_iou": round(m_iou, 6),
        "m_dice": round(m_dice, 6),
        "m_auc_pr": None if m_auc is None else round(m_auc, 6),
        "records": [asdict(r) for r in records],
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
