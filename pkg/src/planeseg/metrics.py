"""Detection and partition metrics, plus dataset overlap statistics.

Label maps are integer arrays of any shape; label 0 (non-planar) is treated
as a region like any other by the partition metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError
from .geometry import BoundingBox, box_iou_matrix, mask_to_box

__all__ = [
    "Instance",
    "instances_from_labels",
    "match_frame",
    "average_precision",
    "average_precision_frames",
    "contingency",
    "rand_index",
    "variation_of_information",
    "segmentation_covering",
    "StatsReport",
    "FrameStats",
    "frame_stats",
    "dataset_stats",
    "MetricReport",
]

INTERPOLATIONS = ("all", "101", "11")


@dataclass
class Instance:
    mask: np.ndarray
    box: BoundingBox | None = None
    score: float | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.box is None:
            self.box = mask_to_box(self.mask)

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


def instances_from_labels(labels: np.ndarray, scores: dict | None = None) -> list:
    """One instance per nonzero id, in ascending id order."""
    labels = np.asarray(labels)
    out = []
    for i in np.unique(labels):
        if i == 0:
            continue
        score = None if scores is None else scores.get(int(i), 1.0)
        out.append(Instance(labels == i, score=score))
    return out


def _iou_matrix(preds: list, gts: list, mode: str) -> np.ndarray:
    if mode == "box":
        return box_iou_matrix(
            np.array([p.box.as_array() for p in preds]).reshape(-1, 4),
            np.array([g.box.as_array() for g in gts]).reshape(-1, 4),
        )
    if mode == "mask":
        if not preds or not gts:
            return np.zeros((len(preds), len(gts)))
        a = np.stack([p.mask.ravel() for p in preds]).astype(np.float64)
        b = np.stack([g.mask.ravel() for g in gts]).astype(np.float64)
        inter = a @ b.T
        union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
        out = np.zeros_like(inter)
        np.divide(inter, union, out=out, where=union > 0)
        return out
    raise ConfigurationError(f"unknown IoU mode {mode!r}")


def match_frame(preds: list, gts: list, iou_thresh: float = 0.5, mode: str = "box") -> tuple:
    """Greedy matching of one frame's predictions in descending score order.

    A prediction is a true positive when its best IoU among the still
    unmatched ground truths reaches ``iou_thresh``. Returns
    ``(scores, tp_flags)`` aligned with the processing order.
    """
    if any(p.score is None for p in preds):
        raise ConfigurationError("average precision needs a score on every prediction")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    ious = _iou_matrix(preds, gts, mode)
    free = np.ones(len(gts), dtype=bool)
    tp = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        if not free.any():
            continue
        cand = np.where(free, ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            free[j] = False
            tp[rank] = True
    scores = np.array([preds[i].score for i in order], dtype=np.float64)
    return scores, tp


def _ap_from_pr(recall: np.ndarray, precision: np.ndarray, interpolation: str) -> float:
    if interpolation == "all":
        r = np.concatenate([[0.0], recall, [1.0]])
        p = np.concatenate([[0.0], precision, [0.0]])
        p = np.maximum.accumulate(p[::-1])[::-1]
        steps = np.flatnonzero(r[1:] != r[:-1])
        return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))
    n_points = {"101": 101, "11": 11}.get(interpolation)
    if n_points is None:
        raise ConfigurationError(f"interpolation must be one of {INTERPOLATIONS}")
    total = 0.0
    for t in np.linspace(0.0, 1.0, n_points):
        above = precision[recall >= t]
        total += above.max() if above.size else 0.0
    return total / n_points


def average_precision_frames(frames: list, iou_thresh: float = 0.5, mode: str = "box",
                             interpolation: str = "all") -> float:
    """AP pooled over ``[(preds, gts), ...]``: matching per frame, one PR curve overall."""
    all_scores, all_tp, n_gt = [], [], 0
    for preds, gts in frames:
        s, tp = match_frame(preds, gts, iou_thresh, mode)
        all_scores.append(s)
        all_tp.append(tp)
        n_gt += len(gts)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    return _ap_from_pr(recall, precision, interpolation)


def average_precision(preds: list, gts: list, iou_thresh: float = 0.5, mode: str = "box",
                      interpolation: str = "all") -> float:
    return average_precision_frames([(preds, gts)], iou_thresh, mode, interpolation)


def contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Joint pixel counts, rows = labels of ``a``, columns = labels of ``b``."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ConfigurationError("label maps must have the same size")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    ia, ib = ia.ravel(), ib.ravel()
    table = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def _pairs(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def rand_index(a: np.ndarray, b: np.ndarray) -> float:
    table = contingency(a, b)
    n = table.sum()
    total = _pairs(n)
    if total == 0:
        return 1.0
    same_both = _pairs(table).sum()
    same_a = _pairs(table.sum(axis=1)).sum()
    same_b = _pairs(table.sum(axis=0)).sum()
    disagree = same_a + same_b - 2 * same_both
    return float((total - disagree) / total)


def _entropy(counts: np.ndarray, n: float) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def variation_of_information(a: np.ndarray, b: np.ndarray) -> float:
    """H(a|b) + H(b|a) in nats."""
    table = contingency(a, b)
    n = float(table.sum())
    if n == 0:
        return 0.0
    h_ab = _entropy(table.ravel(), n)
    h_a = _entropy(table.sum(axis=1), n)
    h_b = _entropy(table.sum(axis=0), n)
    return max(0.0, 2 * h_ab - h_a - h_b)


def segmentation_covering(gt: np.ndarray, pred: np.ndarray) -> float:
    """Area-weighted best IoU of each ground-truth region against the prediction."""
    table = contingency(gt, pred).astype(np.float64)
    n = table.sum()
    if n == 0:
        return 1.0
    size_gt = table.sum(axis=1)
    size_pred = table.sum(axis=0)
    iou = table / (size_gt[:, None] + size_pred[None, :] - table)
    return float((size_gt * iou.max(axis=1)).sum() / n)


@dataclass
class StatsReport:
    overlap_frames_pct: float
    iou_band_25_50_pct: float
    iou_band_ge_50_pct: float
    large_obj_pct: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FrameStats:
    """Additive counters behind :class:`StatsReport`; merge in any order."""

    frames: int = 0
    overlap_frames: int = 0
    overlap_pairs: int = 0
    band_25_50: int = 0
    band_ge_50: int = 0
    instances: int = 0
    large_instances: int = 0

    def merge(self, other: "FrameStats") -> "FrameStats":
        return FrameStats(**{k: getattr(self, k) + getattr(other, k) for k in asdict(self)})

    def report(self) -> StatsReport:
        def pct(num, den):
            return 100.0 * num / den if den else 0.0

        return StatsReport(
            overlap_frames_pct=pct(self.overlap_frames, self.frames),
            iou_band_25_50_pct=pct(self.band_25_50, self.overlap_pairs),
            iou_band_ge_50_pct=pct(self.band_ge_50, self.overlap_pairs),
            large_obj_pct=pct(self.large_instances, self.instances),
        )


def frame_stats(instances: list, frame_area: float) -> FrameStats:
    """Counters for one frame. Overlap means box IoU > 0; bands are [0.25, 0.5) and [0.5, 1]."""
    if frame_area <= 0:
        raise ConfigurationError("frame area must be positive")
    boxes = np.array([inst.box.as_array() for inst in instances]).reshape(-1, 4)
    iou = np.triu(box_iou_matrix(boxes, boxes), k=1)
    pair = np.triu(np.ones_like(iou, dtype=bool), k=1)
    vals = iou[pair]
    overlapping = vals[vals > 0]
    areas = np.array([inst.area for inst in instances])
    return FrameStats(
        frames=1,
        overlap_frames=int(overlapping.size > 0),
        overlap_pairs=int(overlapping.size),
        band_25_50=int(np.count_nonzero((overlapping >= 0.25) & (overlapping < 0.5))),
        band_ge_50=int(np.count_nonzero(overlapping >= 0.5)),
        instances=len(instances),
        large_instances=int(np.count_nonzero(areas > 0.1 * frame_area)),
    )


def dataset_stats(annotations, frame_area: float) -> StatsReport:
    total = FrameStats()
    for instances in annotations:
        total = total.merge(frame_stats(instances, frame_area))
    return total.report()


# Reference values from a 2,000-frame COCO sample. The dataset is not bundled;
# these are for orientation only and are never asserted against.
COCO_REFERENCE = StatsReport(
    overlap_frames_pct=0.015,
    iou_band_25_50_pct=9.01,
    iou_band_ge_50_pct=4.55,
    large_obj_pct=12.27,
)


@dataclass
class MetricReport:
    ap_box_50: float
    ap_mask_50: float
    voi: float
    ri: float
    sc: float
    frames: int = 0
    per_frame: list = field(default_factory=list)

    COLUMNS = (("AP^b_50", "ap_box_50"), ("AP^m_50", "ap_mask_50"),
               ("VOI", "voi"), ("RI", "ri"), ("SC", "sc"))

    def to_json(self) -> str:
        d = {
            "ap_box_50": self.ap_box_50,
            "ap_mask_50": self.ap_mask_50,
            "voi": self.voi,
            "ri": self.ri,
            "sc": self.sc,
            "frames": self.frames,
            "per_frame": self.per_frame,
        }
        return json.dumps(d, indent=2) + "\n"

    def to_text(self) -> str:
        heads = [h for h, _ in self.COLUMNS]
        vals = [f"{getattr(self, k):.4f}" for _, k in self.COLUMNS]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        line1 = "  ".join(h.rjust(w) for h, w in zip(heads, widths))
        line2 = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"{line1}\n{line2}\n"


def evaluate_frames(frames: list, iou_thresh: float = 0.5, interpolation: str = "all") -> MetricReport:
    """Full report over ``[(name, pred_labels, pred_scores, gt_labels), ...]``.

    AP pools all frames; VOI, RI and SC are averaged per frame.
    """
    pairs, per_frame = [], []
    for name, pred_labels, pred_scores, gt_labels in frames:
        preds = instances_from_labels(pred_labels, pred_scores or {})
        gts = instances_from_labels(gt_labels)
        pairs.append((preds, gts))
        per_frame.append({
            "frame": name,
            "voi": variation_of_information(pred_labels, gt_labels),
            "ri": rand_index(pred_labels, gt_labels),
            "sc": segmentation_covering(gt_labels, pred_labels),
        })

    def mean(key):
        return float(np.mean([f[key] for f in per_frame])) if per_frame else math.nan

    return MetricReport(
        ap_box_50=average_precision_frames(pairs, iou_thresh, "box", interpolation),
        ap_mask_50=average_precision_frames(pairs, iou_thresh, "mask", interpolation),
        voi=mean("voi"),
        ri=mean("ri"),
        sc=mean("sc"),
        frames=len(per_frame),
        per_frame=per_frame,
    )
