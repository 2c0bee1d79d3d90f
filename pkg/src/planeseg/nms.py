"""Fast NMS and Fast Feature NMS for overlapping plane detections.

Fast NMS suppresses a detection when any higher-scored detection overlaps it
by more than a threshold, read off a single upper-triangular IoU matrix.
Fast Feature NMS adds a middle IoU band ``(n1, n2]`` in which a detection is
suppressed only if its mask coefficients are also too similar (cosine
similarity above ``t``) to a detection that has already been kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError
from .geometry import BoundingBox, box_iou_matrix

__all__ = [
    "Detection",
    "NmsConfig",
    "prepare",
    "pairwise_iou_triu",
    "column_max",
    "fast_nms",
    "cosine_similarity",
    "ff_nms",
    "ff_nms_indices",
]


@dataclass
class Detection:
    box: BoundingBox
    score: float
    class_id: int = 0
    coeffs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not isinstance(self.box, BoundingBox):
            self.box = BoundingBox.from_array(self.box)
        self.score = float(self.score)
        if not 0.0 <= self.score <= 1.0:
            raise ConfigurationError(f"score {self.score} outside [0, 1]")
        if int(self.class_id) != self.class_id or self.class_id < 0:
            raise ConfigurationError(f"bad class id {self.class_id!r}")
        self.class_id = int(self.class_id)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.coeffs)):
            raise ConfigurationError("mask coefficients must be finite")


@dataclass(frozen=True)
class NmsConfig:
    n1: float = 0.5
    n2: float = 0.7
    t: float = 0.9
    top_n: int = 200
    score_thresh: float = 0.05

    def __post_init__(self):
        for name in ("n1", "n2", "t", "score_thresh"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        if not 0.0 <= self.n1 <= self.n2 <= 1.0:
            raise ConfigurationError(f"need 0 <= n1 <= n2 <= 1, got n1={self.n1}, n2={self.n2}")
        if not -1.0 <= self.t <= 1.0:
            raise ConfigurationError(f"similarity threshold t must lie in [-1, 1], got {self.t}")
        if int(self.top_n) != self.top_n or self.top_n < 1:
            raise ConfigurationError("top_n must be a positive integer")


def prepare(dets: list, cfg: NmsConfig) -> dict:
    """Group by class, drop low scores, sort descending (stable), truncate to ``top_n``.

    Returns ``{class_id: [original indices in score order]}``.
    """
    by_class: dict = {}
    for i, d in enumerate(dets):
        if d.score >= cfg.score_thresh:
            by_class.setdefault(d.class_id, []).append(i)
    out = {}
    for c in sorted(by_class):
        idx = by_class[c]
        # sorted() is stable, so equal scores keep input order
        idx = sorted(idx, key=lambda i: -dets[i].score)
        out[c] = idx[: cfg.top_n]
    return out


def pairwise_iou_triu(boxes: np.ndarray) -> np.ndarray:
    """Upper-triangular IoU matrix of score-sorted (n, 4) boxes; diagonal and below are 0."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.triu(box_iou_matrix(boxes, boxes), k=1)


def column_max(x_triu: np.ndarray) -> np.ndarray:
    """Max IoU of each detection against every higher-scored one (0 for the first)."""
    if x_triu.shape[0] == 0:
        return np.zeros(0)
    return x_triu.max(axis=0)


def fast_nms(boxes: np.ndarray, threshold: float) -> np.ndarray:
    """Survivor indices (ascending, i.e. score order) of Fast NMS over sorted boxes."""
    k = column_max(pairwise_iou_triu(boxes))
    return np.flatnonzero(k <= threshold)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(min(1.0, max(-1.0, (a @ b) / (na * nb))))


def _unit_rows(coeffs: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", coeffs, coeffs))
    if not norms.all():
        raise DegenerateInputError(
            f"zero-norm mask coefficients at rows {np.flatnonzero(norms == 0).tolist()}"
        )
    return coeffs / norms[:, None]


def ff_nms_indices(boxes: np.ndarray, coeffs: np.ndarray, n1: float, n2: float,
                   t: float) -> np.ndarray:
    """Fast Feature NMS over one class of score-sorted detections.

    Returns survivor indices in ascending (score) order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(len(boxes), -1)
    n = len(boxes)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    k = column_max(pairwise_iou_triu(boxes))
    keep = k <= n1
    band = np.flatnonzero((k > n1) & (k <= n2))
    if band.size == 0:
        return np.flatnonzero(keep)

    unit = _unit_rows(coeffs)
    kept = np.flatnonzero(keep)
    # Keep-band detections are in D regardless of what happens inside the band,
    # so a candidate too similar to an earlier one of them is out for good.
    sim = unit[band] @ unit[kept].T
    sim[kept[None, :] > band[:, None]] = -np.inf
    pending = band[sim.max(axis=1, initial=-np.inf) <= t]
    if pending.size > 1:
        # D also holds band candidates accepted earlier in score order; only
        # candidates too similar to an earlier pending one need the sequential pass
        conflict = np.triu(unit[pending] @ unit[pending].T > t, k=1)
        accepted = np.ones(len(pending), dtype=bool)
        for j in np.flatnonzero(conflict.any(axis=0)):
            accepted[j] = not np.any(conflict[:j, j] & accepted[:j])
        pending = pending[accepted]
    keep[pending] = True
    return np.flatnonzero(keep)


def ff_nms(dets: list, cfg: NmsConfig) -> list:
    """Fast Feature NMS on raw detections; survivors of all classes, by descending score."""
    lengths = {d.coeffs.size for d in dets}
    if len(lengths) > 1:
        raise ConfigurationError(f"mixed mask-coefficient lengths {sorted(lengths)}")
    for d in dets:
        if np.linalg.norm(d.coeffs) == 0:
            raise DegenerateInputError("detection with zero-norm mask coefficients")
    survivors = []
    for idx in prepare(dets, cfg).values():
        boxes = np.array([dets[i].box.as_array() for i in idx]).reshape(-1, 4)
        coeffs = np.array([dets[i].coeffs for i in idx])
        kept = ff_nms_indices(boxes, coeffs.reshape(len(idx), -1), cfg.n1, cfg.n2, cfg.t)
        survivors.extend(idx[j] for j in kept)
    # order across classes: score desc, then original index
    survivors.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in survivors]


def fast_nms_detections(dets: list, cfg: NmsConfig, threshold: float | None = None) -> list:
    """Fast NMS on raw detections at ``threshold`` (defaults to ``cfg.n1``)."""
    threshold = cfg.n1 if threshold is None else threshold
    survivors = []
    for idx in prepare(dets, cfg).values():
        boxes = np.array([dets[i].box.as_array() for i in idx]).reshape(-1, 4)
        survivors.extend(idx[j] for j in fast_nms(boxes, threshold))
    survivors.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in survivors]
