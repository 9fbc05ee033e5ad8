"""Confusion counts, ROC/AUC and 3D localization error."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import AllSameTruthClass, ShapeMismatch
from .phantom import FeatureSetTruth


def _ratio(num: int, den: int):
    return num / den if den else None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def tpr(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def fpr(self):
        return _ratio(self.fp, self.fp + self.tn)

    @property
    def ppv(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def for_(self):
        return _ratio(self.fn, self.fn + self.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "tpr": self.tpr, "fpr": self.fpr, "ppv": self.ppv, "for": self.for_}


def _roi_slices(shape, roi):
    if roi is None:
        return tuple(slice(None) for _ in shape)
    roi = list(roi)
    if len(roi) != len(shape):
        raise ValueError("roi needs one (start, stop) pair per axis")
    out = []
    for (lo, hi), n in zip(roi, shape):
        if not 0 <= lo < hi <= n:
            raise ValueError(f"roi ({lo}, {hi}) outside axis of length {n}")
        out.append(slice(int(lo), int(hi)))
    return tuple(out)


def _pair(a, b, roi):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    sl = _roi_slices(a.shape, roi)
    return a[sl], b[sl]


def confusion(pred, truth, roi=None) -> ConfusionCounts:
    """Exact pixel/voxel counts, optionally inside a box of (start, stop) pairs."""
    p, t = _pair(pred, truth, roi)
    p = p.astype(bool)
    t = t.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


@dataclass(frozen=True)
class RocCurve:
    """Operating points from the strictest threshold (0, 0) down to (1, 1)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def tpr_at(self, max_fpr: float) -> float:
        ok = self.fpr <= max_fpr
        return float(self.tpr[ok].max())

    def to_rows(self):
        return [(float(t), float(f), float(p)) for t, f, p in zip(self.thresholds, self.fpr, self.tpr)]


def roc(score, truth, roi=None) -> RocCurve:
    """ROC over distinct score values with ties grouped; trapezoid AUC."""
    s, t = _pair(score, truth, roi)
    s = np.asarray(s, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=bool).ravel()
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AllSameTruthClass("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(t)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(thresholds, fpr, tpr, auc)


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------

@dataclass
class LocalizationReport:
    """Errors in voxel units; ``pairs`` holds (kind, truth_idx, pred_idx, error)."""

    pairs: list = field(default_factory=list)
    misses: dict = field(default_factory=dict)
    spurious: dict = field(default_factory=dict)

    def errors(self, kind: str | None = None) -> np.ndarray:
        return np.array([e for k, _, _, e in self.pairs if kind is None or k == kind])

    def mean(self, kind: str | None = None):
        e = self.errors(kind)
        return float(e.mean()) if e.size else None

    @property
    def n_truth(self) -> int:
        return len(self.pairs) + sum(self.misses.values())

    @property
    def recall(self):
        return _ratio(len(self.pairs), self.n_truth)

    def to_dict(self) -> dict:
        return {
            "mean_error": self.mean(),
            "mean_point_error": self.mean("point"),
            "mean_endpoint_error": self.mean("endpoint"),
            "matched": len(self.pairs),
            "misses": dict(self.misses),
            "spurious": dict(self.spurious),
            "recall": self.recall,
            "pairs": [{"kind": k, "truth": i, "pred": j, "error": e} for k, i, j, e in self.pairs],
        }


def _assign(pred, truth, gate):
    if len(pred) == 0 or len(truth) == 0:
        return [], len(truth), len(pred)
    D = np.linalg.norm(np.asarray(pred)[:, None, :] - np.asarray(truth)[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(D)
    pairs = [(int(c), int(r), float(D[r, c])) for r, c in zip(rows, cols)
             if gate is None or D[r, c] <= gate]
    return sorted(pairs), len(truth) - len(pairs), len(pred) - len(pairs)


def localization_error(pred, truth: FeatureSetTruth, voxel_size=1.0,
                       gate: float | None = 5.0) -> LocalizationReport:
    """Optimal one-to-one assignment of predicted to true points and endpoints.

    Points are compared with point centres and polyline ends with line
    endpoints. Distances are reported in voxels; assignments longer than
    ``gate`` voxels count as a miss plus a spurious prediction.
    """
    if not truth.points and not truth.lines:
        raise ValueError("truth must contain at least one feature")
    vox = float(np.mean(voxel_size))
    pred_pts = [f.position / vox for f in pred if f.kind == "point"]
    pred_ends = [e / vox for f in pred if f.kind == "polyline" for e in f.endpoints]
    true_pts = [np.asarray(p.center) / vox for p in truth.points]
    true_ends = [np.asarray(e) / vox for l in truth.lines for e in (l.a, l.b)]
    report = LocalizationReport()
    for kind, P, T in (("point", pred_pts, true_pts), ("endpoint", pred_ends, true_ends)):
        pairs, miss, spur = _assign(P, T, gate)
        report.pairs += [(kind, i, j, e) for i, j, e in pairs]
        report.misses[kind] = miss
        report.spurious[kind] = spur
    return report


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def detection_table(counts: ConfusionCounts, auc: float | None = None) -> dict:
    """Row with the rates of a detection confusion table."""
    row = {"TP": counts.tp, "FP": counts.fp, "FN": counts.fn, "TN": counts.tn,
           "TPR": counts.tpr, "FPR": counts.fpr, "PPV": counts.ppv, "FOR": counts.for_}
    if auc is not None:
        row["AUC"] = auc
    return row


def write_csv(path, rows, header=None) -> None:
    """Comma-delimited table from dicts (keys become the header) or tuples."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if rows and isinstance(rows[0], dict):
            header = header or list(rows[0])
            w.writerow(header)
            for r in rows:
                w.writerow(["" if r.get(k) is None else r.get(k) for k in header])
        else:
            if header:
                w.writerow(header)
            w.writerows(rows)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_roc_csv(path, curve: RocCurve) -> None:
    write_csv(path, curve.to_rows(), header=["threshold", "fpr", "tpr"])
