"""Classification metrics and the energy-based pointing game (EPG) family."""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


# classification -----------------------------------------------------------

def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with tied ranks averaged; None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(scores, labels, threshold: float = 0.5) -> dict:
    """Accuracy, precision, recall, F1 and AUC of binary ``scores`` against ``labels``.

    Precision/recall/F1 with an empty denominator are reported as 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    truth = labels.astype(bool)
    pred = scores >= threshold
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / max(len(truth), 1),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "auc": roc_auc(scores, truth),
    }


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(logits: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-logits))


def model_metrics(logits: np.ndarray, targets: np.ndarray, multilabel: bool) -> dict:
    """Metrics for a batch of logits.

    Two-class multi-class problems are scored as binary on class 1; wider
    multi-class problems use argmax accuracy with macro one-vs-rest scores;
    multi-label problems average per-class binary metrics.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if multilabel:
        probs = sigmoid(logits)
        per = [classification_metrics(probs[:, c], targets[:, c]) for c in range(probs.shape[1])]
        return _macro(per)
    probs = softmax(logits)
    if probs.shape[1] == 2:
        return classification_metrics(probs[:, 1], targets == 1)
    per = [classification_metrics(probs[:, c], targets == c) for c in range(probs.shape[1])]
    out = _macro(per)
    out["accuracy"] = float(np.mean(probs.argmax(axis=1) == targets))
    return out


def _macro(per: list[dict]) -> dict:
    out = {}
    for key in ("accuracy", "precision", "recall", "f1"):
        out[key] = float(np.mean([m[key] for m in per]))
    aucs = [m["auc"] for m in per if m["auc"] is not None]
    out["auc"] = float(np.mean(aucs)) if aucs else None
    return out


# energy-based pointing game ----------------------------------------------

@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int
    class_id: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    def check_within(self, height: int, width: int) -> None:
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise ValueError(f"{self} exceeds image bounds {height}x{width}")

    @property
    def area(self) -> int:
        return self.w * self.h


def box_mask(shape, boxes) -> np.ndarray:
    """Binary union mask of ``boxes``; overlapping boxes count once."""
    mask = np.zeros(shape, dtype=bool)
    for b in boxes:
        b.check_within(*shape)
        mask[b.y:b.y + b.h, b.x:b.x + b.w] = True
    return mask


def _ratio(num: float, den: float) -> float | None:
    return num / den if den != 0 else None


def _sum(values) -> float:
    # correctly rounded, so results do not depend on summation order
    return math.fsum(np.ravel(values).tolist())


def threshold_positive(map_: np.ndarray, t: float) -> np.ndarray:
    """Positive part of the map keeping only values strictly above ``t * max``."""
    pos = np.where(map_ > 0, map_, 0.0)
    peak = pos.max() if pos.size else 0.0
    return np.where(pos > t * peak, pos, 0.0)


def epg_general(map_, boxes) -> float | None:
    """Share of the (signed) map mass inside the boxes; None if the total is zero."""
    m = np.asarray(map_, dtype=np.float64)
    if not boxes:
        raise ValueError("epg_general needs at least one box")
    mask = box_mask(m.shape, boxes)
    return _ratio(_sum(m[mask]), _sum(m))


def epg_precision(map_, boxes, t: float = 0.0) -> float | None:
    """Share of thresholded positive mass inside the boxes; None without positive mass."""
    m = np.asarray(map_, dtype=np.float64)
    mask = box_mask(m.shape, boxes)
    pos = threshold_positive(m, t)
    return _ratio(_sum(pos[mask]), _sum(pos))


def epg_recall(map_, boxes, t: float = 0.0) -> float | None:
    """Thresholded positive mass in the boxes over itself plus |negative| mass in the boxes."""
    m = np.asarray(map_, dtype=np.float64)
    mask = box_mask(m.shape, boxes)
    pos = threshold_positive(m, t)
    inside = _sum(pos[mask])
    neg = -_sum(np.where(m < 0, m, 0.0)[mask])
    return _ratio(inside, inside + neg)


class Subset(str, enum.Enum):
    ALL = "all"
    TP = "tp"
    FN = "fn"


EPG_METRICS = ("epg_general", "epg_precision", "epg_recall")


@dataclass
class EpgConfig:
    thresholds: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(10))
    subset_mode: Subset = Subset.ALL
    decision_threshold: float = 0.5

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.subset_mode = Subset(self.subset_mode)
        if list(self.thresholds) != sorted(set(self.thresholds)):
            raise ValueError("thresholds must be sorted and unique")
        if any(not 0 <= t <= 1 for t in self.thresholds):
            raise ValueError("thresholds must lie in [0, 1]")


@dataclass
class EpgRecord:
    sample_id: str
    class_id: int
    subset: Subset  # TP or FN
    threshold: float
    epg_general: float | None
    epg_precision: float | None
    epg_recall: float | None

    @property
    def defined(self) -> bool:
        return all(getattr(self, m) is not None for m in EPG_METRICS)


@dataclass
class EpgReport:
    records: list[EpgRecord] = field(default_factory=list)
    excluded: list[tuple[str, int]] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        """Mean and population std per (metric, threshold, subset) over defined values."""
        rows = []
        thresholds = sorted({r.threshold for r in self.records})
        for metric in EPG_METRICS:
            for subset in Subset:
                for t in thresholds:
                    vals = [getattr(r, metric) for r in self.records
                            if r.threshold == t and (subset is Subset.ALL or r.subset is subset)]
                    vals = [v for v in vals if v is not None]
                    rows.append({
                        "metric": metric, "threshold": t, "subset": subset.value,
                        "mean": float(np.mean(vals)) if vals else math.nan,
                        "std": float(np.std(vals)) if vals else math.nan,
                        "n": len(vals),
                    })
        return rows

    def undefined_count(self) -> int:
        return sum(not r.defined for r in self.records)

    def curve(self, metric: str = "epg_precision", subset: Subset = Subset.ALL) -> list[tuple[float, float, int]]:
        """(threshold, mean, n) points of one metric, e.g. the precision-vs-threshold sweep."""
        subset = Subset(subset)
        return [(r["threshold"], r["mean"], r["n"]) for r in self.aggregate()
                if r["metric"] == metric and r["subset"] == subset.value]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "class_id", "subset", "threshold", *EPG_METRICS, "defined"])
            for r in self.records:
                w.writerow([r.sample_id, r.class_id, r.subset.value, _fmt(r.threshold),
                            *(_fmt(getattr(r, m)) for m in EPG_METRICS), int(r.defined)])

    def write_aggregate_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "threshold", "subset", "mean", "std", "n"])
            for row in self.aggregate():
                w.writerow([row["metric"], _fmt(row["threshold"]), row["subset"],
                            _fmt(row["mean"]), _fmt(row["std"]), row["n"]])


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def epg_sample(map_, boxes, t: float) -> tuple[float | None, float | None, float | None]:
    return epg_general(map_, boxes), epg_precision(map_, boxes, t), epg_recall(map_, boxes, t)


def epg_evaluate(predictions: dict, maps: dict, samples, cfg: EpgConfig | None = None) -> EpgReport:
    """Pointing-game report over every (sample, ground-truth class) pair with boxes.

    ``predictions[sample_id]`` is a per-class boolean vector of predicted
    positives, ``maps[(sample_id, class_id)]`` a 2-d contribution map and
    ``samples`` an iterable of objects with ``id``, ``labels`` and ``boxes``.
    Each pair is labelled TP when the class was predicted, FN otherwise.
    """
    cfg = cfg or EpgConfig()
    report = EpgReport()
    for s in samples:
        for c in np.flatnonzero(np.asarray(s.labels)):
            c = int(c)
            boxes = [b for b in s.boxes if b.class_id == c]
            if not boxes or (s.id, c) not in maps:
                log.info("sample %s class %d has no boxes or map; excluded from EPG", s.id, c)
                report.excluded.append((s.id, c))
                continue
            subset = Subset.TP if predictions[s.id][c] else Subset.FN
            m = maps[(s.id, c)]
            for t in cfg.thresholds:
                report.records.append(EpgRecord(s.id, c, subset, t, *epg_sample(m, boxes, t)))
    if cfg.subset_mode is not Subset.ALL:
        report.records = [r for r in report.records if r.subset is cfg.subset_mode]
    return report
