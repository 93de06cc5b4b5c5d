"""Separability metrics and evaluation reports.

All metrics treat scores as "higher means more in-distribution".  Ties are
handled exactly: AUROC uses midranks, average precision processes tied
scores as one threshold group, and FPR reuses the boundary-inclusive
calibration rule so the evaluator and the deployed decision rule can never
disagree about what a threshold does.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .scoring import calibrate_threshold


def _as_labeled(scores, is_id) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    is_id = np.asarray(is_id, dtype=bool)
    if scores.ndim != 1 or scores.shape != is_id.shape:
        raise DataError(
            f"scores and labels must be matching vectors, got {scores.shape} "
            f"and {is_id.shape}"
        )
    if not np.all(np.isfinite(scores)):
        raise DataError("scores contain non-finite values")
    if not is_id.any() or is_id.all():
        raise DataError("metrics need at least one ID and one OOD score")
    return scores, is_id


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing their group average."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, is_id) -> float:
    """P(ID score > OOD score) + 0.5 P(tie), via the rank-sum identity."""
    scores, is_id = _as_labeled(scores, is_id)
    n_id = int(is_id.sum())
    n_ood = len(scores) - n_id
    rank_sum = float(_midranks(scores)[is_id].sum())
    return (rank_sum - n_id * (n_id + 1) / 2.0) / (n_id * n_ood)


def fpr_at_tpr(scores, is_id, target_tpr: float = 0.95) -> float:
    """OOD fraction still accepted when the threshold is calibrated to keep
    ``target_tpr`` of the ID scores."""
    scores, is_id = _as_labeled(scores, is_id)
    threshold = calibrate_threshold(scores[is_id], target_tpr)
    ood = scores[~is_id]
    return float(np.count_nonzero(ood >= threshold)) / len(ood)


def average_precision(scores, is_positive) -> float:
    """Step-interpolated AP, descending over unique scores so tied entries
    enter as one group."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    if scores.shape != pos.shape or scores.ndim != 1:
        raise DataError("scores and positives must be matching vectors")
    total_pos = int(pos.sum())
    if total_pos == 0:
        raise DataError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    p = pos[order]
    ap = 0.0
    prev_recall = 0.0
    tp = fp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        group_tp = int(p[i:j + 1].sum())
        tp += group_tp
        fp += (j - i + 1) - group_tp
        recall = tp / total_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
        i = j + 1
    return ap


def aupr_id(scores, is_id) -> float:
    """AP with ID as the positive class; high scores rank first."""
    scores, is_id = _as_labeled(scores, is_id)
    return average_precision(scores, is_id)


def aupr_ood(scores, is_id) -> float:
    """AP with OOD as the positive class; low scores rank first."""
    scores, is_id = _as_labeled(scores, is_id)
    return average_precision(-scores, ~is_id)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MetricReport:
    variant: str
    auroc: float
    fpr_at_tpr: float
    aupr_id: float
    aupr_ood: float
    threshold: float
    target_tpr: float
    n_id: int
    n_ood: int

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "auroc": self.auroc,
            "fpr_at_tpr": self.fpr_at_tpr,
            "aupr_id": self.aupr_id,
            "aupr_ood": self.aupr_ood,
            "threshold": self.threshold,
            "target_tpr": self.target_tpr,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
        }


def evaluate(scores, is_id, variant: str, target_tpr: float = 0.95) -> MetricReport:
    scores, is_id = _as_labeled(scores, is_id)
    return MetricReport(
        variant=variant,
        auroc=auroc(scores, is_id),
        fpr_at_tpr=fpr_at_tpr(scores, is_id, target_tpr),
        aupr_id=aupr_id(scores, is_id),
        aupr_ood=aupr_ood(scores, is_id),
        threshold=calibrate_threshold(scores[is_id], target_tpr),
        target_tpr=target_tpr,
        n_id=int(is_id.sum()),
        n_ood=int((~is_id).sum()),
    )


def write_report_json(path: str | Path, reports: list[MetricReport], extra: dict) -> None:
    """Deterministic report file: sorted keys, repr-exact floats."""
    payload = dict(extra)
    payload["variants"] = {r.variant: r.to_json_dict() for r in reports}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def histogram_rows(
    scores, is_id, bins: int = 20
) -> list[tuple[float, float, float, float]]:
    """(bin_lo, bin_hi, id_mass, ood_mass) rows over the joint score range;
    each class's masses sum to one, top edge inclusive."""
    scores, is_id = _as_labeled(scores, is_id)
    if bins < 1:
        raise DataError(f"bins must be positive, got {bins}")
    lo = float(scores.min())
    hi = float(scores.max())
    if lo == hi:  # degenerate: a single occupied bin around the value
        lo -= 0.5
        hi += 0.5
    width = (hi - lo) / bins

    def masses(values: np.ndarray) -> np.ndarray:
        idx = ((values - lo) / width).astype(int)
        idx = np.minimum(idx, bins - 1)
        counts = np.bincount(idx, minlength=bins)
        return counts / len(values)

    id_mass = masses(scores[is_id])
    ood_mass = masses(scores[~is_id])
    return [
        (lo + k * width, lo + (k + 1) * width, float(id_mass[k]), float(ood_mass[k]))
        for k in range(bins)
    ]


def write_histogram_csv(path: str | Path, scores, is_id, bins: int = 20) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "id_mass", "ood_mass"])
        for bin_lo, bin_hi, id_mass, ood_mass in histogram_rows(scores, is_id, bins):
            writer.writerow([repr(bin_lo), repr(bin_hi), repr(id_mass), repr(ood_mass)])


def format_report_table(reports: list[MetricReport]) -> str:
    """Fixed-width summary for terminal output."""
    header = ("variant", "auroc", f"fpr@{reports[0].target_tpr:g}" if reports else "fpr",
              "aupr_id", "aupr_ood", "threshold")
    rows = [header] + [
        (r.variant, f"{r.auroc:.4f}", f"{r.fpr_at_tpr:.4f}", f"{r.aupr_id:.4f}",
         f"{r.aupr_ood:.4f}", f"{r.threshold:.6f}")
        for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
        for row in rows
    ]
    return "\n".join(lines)
