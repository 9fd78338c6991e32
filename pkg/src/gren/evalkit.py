"""Localisation accuracy at IoU thresholds and image-level AUC.

Predicted regions are the union of grid cells whose probability exceeds the
grid threshold; ground truth is the pixel union of that class's boxes. A
localisation counts as correct when IoU is strictly above the threshold.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from gren import model
from gren.diffcore import Tensor
from gren.synthgen import Box, Sample

DEFAULT_THRESHOLDS = (0.5, 0.7)


class NoInstance(ValueError):
    """IoU of two empty regions is undefined."""


def _grid_array(prob_grid) -> np.ndarray:
    return prob_grid.data if isinstance(prob_grid, Tensor) else np.asarray(prob_grid, dtype=np.float64)


def grid_to_region(prob_grid, k: int, threshold: float = 0.5, image_side: int = model.IMAGE_SIDE) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    p = _grid_array(prob_grid)[k]
    cell = image_side // p.shape[0]
    hot = p > threshold
    return np.repeat(np.repeat(hot, cell, axis=0), cell, axis=1)


def boxes_to_mask(boxes: Iterable[Box], k: int, image_side: int = model.IMAGE_SIDE) -> np.ndarray:
    mask = np.zeros((image_side, image_side), dtype=bool)
    for b in boxes:
        if b.k == k:
            mask[b.y0:b.y1 + 1, b.x0:b.x1 + 1] = True
    return mask


def iou(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        raise NoInstance("no instance: prediction and ground truth are both empty")
    return np.count_nonzero(a & b) / union


@dataclass
class LocalizationResult:
    sample_id: str
    k: int
    iou: float
    correct_at: dict[float, bool] = field(default_factory=dict)

    @classmethod
    def scored(cls, sample_id: str, k: int, value: float, thresholds: Sequence[float]) -> "LocalizationResult":
        return cls(sample_id, k, value, {t: value > t for t in thresholds})


def localization_accuracy(
    results: Sequence[LocalizationResult],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    num_classes: int | None = None,
) -> tuple[dict[float, dict[int, float]], dict[float, float], list[int]]:
    """Per-class accuracy, unweighted class mean, and classes with no instances."""
    if num_classes is None:
        num_classes = 1 + max((r.k for r in results), default=-1)
    per_class = {t: {} for t in thresholds}
    excluded = []
    for k in range(num_classes):
        ious = [r.iou for r in results if r.k == k]
        if not ious:
            excluded.append(k)
            continue
        for t in thresholds:
            per_class[t][k] = sum(v > t for v in ious) / len(ious)
    means = {t: (float(np.mean(list(per_class[t].values()))) if per_class[t] else float("nan")) for t in thresholds}
    return per_class, means, excluded


def image_score(prob_grid, k: int, eps: float = 1e-6) -> float:
    """1 - prod(1 - p) over the grid, evaluated in log space."""
    p = np.clip(_grid_array(prob_grid)[k], eps, 1.0 - eps)
    return float(-np.expm1(np.sum(np.log1p(-p))))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: (concordant pairs + ties / 2) / (positives * negatives)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-d sequences")
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = int(np.count_nonzero(y == 0))
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate label set: need at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# -------------------------------------------------------------------- report


@dataclass
class MetricsReport:
    thresholds: list[float]
    accuracy: dict[float, dict[int, float]]
    mean_accuracy: dict[float, float]
    auc: dict[int, float]
    mean_auc: float
    excluded_classes: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "accuracy": {repr(t): {str(k): v for k, v in row.items()} for t, row in self.accuracy.items()},
            "mean_accuracy": {repr(t): v for t, v in self.mean_accuracy.items()},
            "auc": {str(k): v for k, v in self.auc.items()},
            "mean_auc": self.mean_auc,
            "excluded_classes": self.excluded_classes,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        return cls(
            thresholds=[float(t) for t in doc["thresholds"]],
            accuracy={float(t): {int(k): v for k, v in row.items()} for t, row in doc["accuracy"].items()},
            mean_accuracy={float(t): v for t, v in doc["mean_accuracy"].items()},
            auc={int(k): v for k, v in doc["auc"].items()},
            mean_auc=doc["mean_auc"],
            excluded_classes=list(doc["excluded_classes"]),
            metadata=dict(doc["metadata"]),
        )

    def to_csv(self) -> str:
        """Rows ``kind,class,threshold,value``; one accuracy row per class per threshold."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "class", "threshold", "value"])
        for t in self.thresholds:
            for k, v in sorted(self.accuracy[t].items()):
                w.writerow(["accuracy", k, repr(t), repr(v)])
            w.writerow(["mean_accuracy", "mean", repr(t), repr(self.mean_accuracy[t])])
        for k, v in sorted(self.auc.items()):
            w.writerow(["auc", k, "", repr(v)])
        w.writerow(["mean_auc", "mean", "", repr(self.mean_auc)])
        for k in self.excluded_classes:
            w.writerow(["excluded", k, "", ""])
        for key, value in sorted(self.metadata.items()):
            w.writerow(["meta", key, "", json.dumps(value)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        thresholds: list[float] = []
        accuracy: dict[float, dict[int, float]] = {}
        means: dict[float, float] = {}
        aucs: dict[int, float] = {}
        mean_auc = float("nan")
        excluded: list[int] = []
        meta: dict = {}
        for row in csv.DictReader(io.StringIO(text)):
            kind = row["kind"]
            if kind == "accuracy":
                t = float(row["threshold"])
                accuracy.setdefault(t, {})[int(row["class"])] = float(row["value"])
            elif kind == "mean_accuracy":
                t = float(row["threshold"])
                thresholds.append(t)
                accuracy.setdefault(t, {})
                means[t] = float(row["value"])
            elif kind == "auc":
                aucs[int(row["class"])] = float(row["value"])
            elif kind == "mean_auc":
                mean_auc = float(row["value"])
            elif kind == "excluded":
                excluded.append(int(row["class"]))
            elif kind == "meta":
                meta[row["class"]] = json.loads(row["value"])
        return cls(thresholds, accuracy, means, aucs, mean_auc, excluded, meta)

    def table(self) -> str:
        classes = sorted({k for row in self.accuracy.values() for k in row} | set(self.auc))
        head = ["T(IoU)"] + [f"class {k}" for k in classes] + ["Mean"]
        lines = [" ".join(f"{h:>9}" for h in head)]
        for t in self.thresholds:
            cells = [f"{t:>9.2f}"]
            for k in classes:
                v = self.accuracy[t].get(k)
                cells.append(f"{v:>9.2f}" if v is not None else f"{'-':>9}")
            cells.append(f"{self.mean_accuracy[t]:>9.2f}")
            lines.append(" ".join(cells))
        auc_cells = [f"{'AUC':>9}"] + [
            f"{self.auc[k]:>9.4f}" if k in self.auc else f"{'-':>9}" for k in classes
        ] + [f"{self.mean_auc:>9.4f}"]
        lines.append(" ".join(auc_cells))
        return "\n".join(lines)


def predict_probs(params: model.Params, samples: Sequence[Sample], upsample: bool = False, chunk: int = 16) -> np.ndarray:
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    out = []
    for start in range(0, len(samples), chunk):
        images = np.stack([s.image for s in samples[start:start + chunk]])
        out.append(model.forward(frozen, images, upsample=upsample).probs.data)
    return np.concatenate(out)


def evaluate(
    params: model.Params,
    samples: Sequence[Sample],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    grid_threshold: float = 0.5,
    upsample: bool = False,
    metadata: dict | None = None,
) -> MetricsReport:
    if not samples:
        raise ValueError("evaluation split is empty")
    thresholds = [float(t) for t in thresholds]
    num_classes = model.num_classes_of(params)
    probs = predict_probs(params, samples, upsample)
    side = samples[0].image.shape[0]

    results = []
    for s, p in zip(samples, probs):
        for k in range(num_classes):
            gt = boxes_to_mask(s.boxes, k, side)
            if not gt.any():
                continue
            value = iou(grid_to_region(p, k, grid_threshold, side), gt)
            results.append(LocalizationResult.scored(s.sample_id, k, value, thresholds))
    accuracy, means, excluded = localization_accuracy(results, thresholds, num_classes)

    aucs = {}
    labels = np.stack([s.labels for s in samples])
    for k in range(num_classes):
        try:
            aucs[k] = auc([image_score(p, k) for p in probs], labels[:, k])
        except ValueError:
            continue
    mean_auc = float(np.mean(list(aucs.values()))) if aucs else math.nan
    meta = {"num_samples": len(samples), "num_instances": len(results), "grid_threshold": grid_threshold}
    meta.update(metadata or {})
    return MetricsReport(thresholds, accuracy, means, aucs, mean_auc, excluded, meta)
