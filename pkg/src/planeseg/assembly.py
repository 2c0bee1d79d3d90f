"""Prototype mask assembly, cropping, and the composite detection loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax

from .errors import NormalizationError, ShapeError
from .geometry import BoundingBox

__all__ = [
    "assemble",
    "assemble_logits",
    "crop_mask",
    "binarize",
    "mask_bce",
    "smooth_l1",
    "LossInputs",
    "detection_losses",
    "mask_loss",
    "combine_losses",
    "total_loss",
]

BCE_EPS = 1e-7
NEG_POS_RATIO = 3


def assemble_logits(prototypes: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Pre-sigmoid masks: (h, w, k) prototypes times (n, k) coefficients -> (n, h, w)."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if prototypes.ndim != 3 or coeffs.ndim != 2:
        raise ShapeError(f"expected (h, w, k) and (n, k), got {prototypes.shape} and {coeffs.shape}")
    if prototypes.shape[2] != coeffs.shape[1]:
        raise ShapeError(f"prototype count {prototypes.shape[2]} != coefficient count {coeffs.shape[1]}")
    return np.einsum("hwk,nk->nhw", prototypes, coeffs)


def assemble(prototypes: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Instance masks ``sigmoid(P @ C.T)`` laid out as (n, h, w)."""
    return expit(assemble_logits(prototypes, coeffs))


def crop_mask(mask: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Zero every pixel whose center lies outside ``box``.

    A pixel (row, col) has center (col + 0.5, row + 0.5) and is inside when
    ``x_min <= cx < x_max`` and ``y_min <= cy < y_max``. Works on (h, w) or
    (..., h, w) arrays.
    """
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    cx = np.arange(w) + 0.5
    cy = np.arange(h) + 0.5
    inside = ((cy >= box.y_min) & (cy < box.y_max))[:, None] & ((cx >= box.x_min) & (cx < box.x_max))[None, :]
    return np.where(inside, mask, 0).astype(mask.dtype, copy=False)


def binarize(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(mask) > threshold


def mask_bce(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean pixel-wise binary cross entropy with predictions clamped to [eps, 1 - eps]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-(gt * np.log(p) + (1.0 - gt) * np.log1p(-p))))


def smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


@dataclass
class LossInputs:
    """Everything the composite loss needs for one image.

    ``matches`` is a (num_priors, num_gt) 0/1 matrix; each prior is matched to
    at most one ground truth. ``conf_logits`` is (num_priors, num_classes)
    with class 0 as background, ``gt_labels`` holds foreground classes (>= 1).
    Box predictions and targets share one regression encoding, so the
    localization loss is taken directly on their difference.
    """

    matches: np.ndarray
    conf_logits: np.ndarray
    gt_labels: np.ndarray
    box_pred: np.ndarray
    box_gt: np.ndarray
    mask_pred: np.ndarray | None = None
    mask_gt: np.ndarray | None = None
    alpha: float = 1.5
    beta: float = 6.125

    def __post_init__(self):
        self.matches = np.asarray(self.matches).astype(bool)
        if self.matches.ndim != 2:
            raise ShapeError("matches must be (num_priors, num_gt)")
        if np.any(self.matches.sum(axis=1) > 1):
            raise ShapeError("a prior may match at most one ground truth")
        p, g = self.matches.shape
        self.conf_logits = np.asarray(self.conf_logits, dtype=np.float64)
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64).reshape(-1)
        self.box_pred = np.asarray(self.box_pred, dtype=np.float64).reshape(-1, 4)
        self.box_gt = np.asarray(self.box_gt, dtype=np.float64).reshape(-1, 4)
        if self.conf_logits.ndim != 2 or self.conf_logits.shape[0] != p:
            raise ShapeError("conf_logits must be (num_priors, num_classes)")
        if len(self.gt_labels) != g or len(self.box_gt) != g or len(self.box_pred) != p:
            raise ShapeError("per-prior / per-gt arrays disagree with matches")
        if self.alpha <= 0 or self.beta <= 0:
            raise ShapeError("loss weights must be positive")

    @property
    def num_positive(self) -> int:
        return int(self.matches.sum())


def _require_positive(n: int):
    if n <= 0:
        raise NormalizationError("loss normalization needs at least one positive match")


def detection_losses(inputs: LossInputs) -> tuple:
    """Unnormalized (L_conf, L_loc) of a single-shot detector.

    L_loc is smooth-L1 over the 4 box offsets of every matched prior.
    L_conf is softmax cross-entropy over positives plus the hardest negatives
    (highest background loss, ties by prior index), at most three per
    positive.
    """
    n_pos = inputs.num_positive
    _require_positive(n_pos)
    pri, gti = np.nonzero(inputs.matches)
    l_loc = float(smooth_l1(inputs.box_pred[pri] - inputs.box_gt[gti]).sum())

    logp = log_softmax(inputs.conf_logits, axis=1)
    pos_loss = -logp[pri, inputs.gt_labels[gti]]
    negatives = np.flatnonzero(~inputs.matches.any(axis=1))
    bg_loss = -logp[negatives, 0]
    n_neg = min(NEG_POS_RATIO * n_pos, len(negatives))
    hardest = np.argsort(-bg_loss, kind="stable")[:n_neg]
    l_conf = float(pos_loss.sum() + bg_loss[hardest].sum())
    return l_conf, l_loc


def mask_loss(inputs: LossInputs) -> float:
    """Sum over matched priors of the per-mask mean BCE against the matched gt mask."""
    if inputs.mask_pred is None or inputs.mask_gt is None:
        return 0.0
    pri, gti = np.nonzero(inputs.matches)
    return float(sum(mask_bce(inputs.mask_pred[p], inputs.mask_gt[g]) for p, g in zip(pri, gti)))


def combine_losses(l_conf: float, l_loc: float, l_mask: float, n: int,
                   alpha: float = 1.5, beta: float = 6.125) -> float:
    _require_positive(n)
    return (l_conf + alpha * l_loc + beta * l_mask) / n


def total_loss(inputs: LossInputs) -> float:
    l_conf, l_loc = detection_losses(inputs)
    return combine_losses(l_conf, l_loc, mask_loss(inputs), inputs.num_positive,
                          inputs.alpha, inputs.beta)
