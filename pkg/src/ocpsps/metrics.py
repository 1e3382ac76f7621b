"""COCO-style detection metrics and assignment error metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyRound, MismatchedFrames, ShapeMismatch, ZeroGroundTruthCost
from .geometry import BBox, SlotClass, iou
from .ingest import FrameInference, GroundTruthFrame

IOU_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MEDIUM_MIN_AREA = 0.005


@dataclass
class DetectionEvalReport:
    recall_05_095: float
    map_05: float
    map_075: float
    map_05_095: float
    per_class_ap_05: Dict[str, float] = field(default_factory=dict)
    ap_table: Dict[float, Dict[str, float]] = field(default_factory=dict)
    recall_table: Dict[float, Dict[str, float]] = field(default_factory=dict)
    pr_curves: Dict[str, Tuple[List[float], List[float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Table-style row: recall, the three mAP columns, then per-class AP at 0.5."""
        return {
            "recall_0.5:0.95": self.recall_05_095,
            "mAP_0.5": self.map_05,
            "mAP_0.75": self.map_075,
            "mAP_0.5:0.95": self.map_05_095,
            "classification_ap_0.5": dict(self.per_class_ap_05),
        }


def interpolated_ap(tp: np.ndarray, n_pos: int) -> float:
    """101-point interpolated AP from a score-ordered TP/FP sequence."""
    if n_pos == 0:
        return math.nan
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_pos
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def _pairs(predictions: Sequence[FrameInference], truths: Sequence[GroundTruthFrame]):
    by_id = {}
    for p in predictions:
        if p.frame_id in by_id:
            raise MismatchedFrames(f"duplicate prediction frame {p.frame_id!r}")
        by_id[p.frame_id] = p
    gt_ids = {t.frame_id for t in truths}
    extra = sorted(set(by_id) - gt_ids)
    if extra:
        raise MismatchedFrames(f"predictions without ground truth: {extra[:5]}")
    return [(t, by_id.get(t.frame_id)) for t in truths]


def _class_match(
    images: List[Tuple[List[BBox], List[Tuple[float, BBox]]]], thresholds: Sequence[float]
) -> Tuple[int, Dict[float, np.ndarray]]:
    """Greedy matching for one class; returns positives and TP flags per threshold in score order."""
    n_pos = sum(len(g) for g, _ in images)
    entries = []  # (score, image, det index)
    ious = []
    for k, (gts, dets) in enumerate(images):
        mat = np.array([[iou(b, g) for g in gts] for _, b in dets]).reshape(len(dets), len(gts))
        ious.append(mat)
        entries.extend((-s, k, d) for d, (s, _) in enumerate(dets))
    entries.sort()
    flags = {}
    for thr in thresholds:
        used = [np.zeros(len(g), dtype=bool) for g, _ in images]
        tp = np.zeros(len(entries))
        for e, (_, k, d) in enumerate(entries):
            row = ious[k][d] if ious[k].size else np.zeros(0)
            cand = np.where(~used[k] & (row >= thr), row, -1.0)
            if cand.size and cand.max() >= 0.0:
                g = int(np.argmax(cand))
                used[k][g] = True
                tp[e] = 1.0
        flags[thr] = tp
    return n_pos, flags


def evaluate_detections(
    predictions: Sequence[FrameInference],
    truths: Sequence[GroundTruthFrame],
    min_area: float = MEDIUM_MIN_AREA,
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> DetectionEvalReport:
    """mAP / recall over the IoU sweep, keeping only ground truths of area >= ``min_area``."""
    pairs = _pairs(predictions, truths)
    per_class: Dict[SlotClass, List] = {c: [] for c in SlotClass}
    for gt, pred in pairs:
        for c in SlotClass:
            gts = [l.quad.bbox for l in gt.labels if l.cls is c and l.quad.bbox.area >= min_area]
            dets = [(d.score, d.bbox) for d in (pred.detections if pred else ()) if d.cls is c]
            per_class[c].append((gts, dets))

    ap: Dict[float, Dict[str, float]] = {t: {} for t in iou_thresholds}
    rec: Dict[float, Dict[str, float]] = {t: {} for t in iou_thresholds}
    curves = {}
    for c, images in per_class.items():
        n_pos, flags = _class_match(images, iou_thresholds)
        if n_pos == 0:
            continue
        for t in iou_thresholds:
            tp = flags[t]
            ap[t][c.value] = interpolated_ap(tp, n_pos)
            rec[t][c.value] = float(tp.sum()) / n_pos
        tp05 = flags[iou_thresholds[0]]
        if tp05.size:
            ctp = np.cumsum(tp05)
            curves[c.value] = ((ctp / n_pos).tolist(), (ctp / np.arange(1, ctp.size + 1)).tolist())

    def mean_over_classes(table: Dict[str, float]) -> float:
        return float(np.mean(list(table.values()))) if table else 0.0

    maps = {t: mean_over_classes(ap[t]) for t in iou_thresholds}
    recalls = {t: mean_over_classes(rec[t]) for t in iou_thresholds}
    first = iou_thresholds[0]
    return DetectionEvalReport(
        recall_05_095=float(np.mean(list(recalls.values()))),
        map_05=maps.get(0.5, maps[first]),
        map_075=maps.get(0.75, math.nan),
        map_05_095=float(np.mean(list(maps.values()))),
        per_class_ap_05=dict(ap.get(0.5, ap[first])),
        ap_table=ap,
        recall_table=rec,
        pr_curves=curves,
    )


def err_cost(gt_costs: Sequence[float], pred_costs: Sequence[float]) -> float:
    """Summed relative deviation of the predicted assignment cost per round."""
    g = np.asarray(gt_costs, dtype=float)
    p = np.asarray(pred_costs, dtype=float)
    if g.shape != p.shape:
        raise ShapeMismatch(f"{g.shape} vs {p.shape}")
    if np.any(g <= 0):
        raise ZeroGroundTruthCost("ground-truth assignment cost must be positive in every round")
    return float(math.fsum(np.abs(g - p) / g))


def err_assign(gt_counts, pred_counts) -> float:
    """Per-lot booked-slot count error, each round normalized by its ground-truth bookings."""
    g = np.asarray(gt_counts, dtype=float)
    p = np.asarray(pred_counts, dtype=float)
    if g.shape != p.shape:
        raise ShapeMismatch(f"{g.shape} vs {p.shape}")
    if g.ndim != 2:
        raise ShapeMismatch(f"expected rounds x lots, got shape {g.shape}")
    totals = g.sum(axis=1)
    if np.any(totals <= 0):
        raise EmptyRound("every round needs at least one ground-truth booking")
    return float(math.fsum(np.abs(g - p).sum(axis=1) / totals))
