"""Camera model, depth unprojection, planes, boxes and IoU primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateInputError

__all__ = [
    "CameraIntrinsics",
    "DepthImage",
    "PointCloud",
    "Plane",
    "BoundingBox",
    "unproject",
    "project",
    "point_plane_distance",
    "box_iou",
    "box_iou_matrix",
    "mask_iou",
    "mask_to_box",
    "fit_plane_lsq",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"intrinsics {name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ConfigurationError("image size must be integral")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point outside the image")

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        keys = {"fx", "fy", "cx", "cy", "width", "height"}
        if not isinstance(d, dict) or set(d) != keys:
            raise ConfigurationError(f"intrinsics must have exactly the keys {sorted(keys)}")
        try:
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"bad intrinsics value: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


@dataclass
class DepthImage:
    """Depth in millimeters, shape (height, width); 0 marks an invalid pixel."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ConfigurationError("depth image must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("depth values must be finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class PointCloud:
    """Points in meters with the (row, col) pixel each one came from."""

    points: np.ndarray
    pixels: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
            if len(self.pixels) != len(self.points):
                raise ConfigurationError("provenance length must equal point count")
        if not np.all(np.isfinite(self.points)):
            raise ConfigurationError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, rotation: np.ndarray, translation: Sequence[float] = (0, 0, 0)) -> "PointCloud":
        rotation = np.asarray(rotation, dtype=np.float64)
        pts = self.points @ rotation.T + np.asarray(translation, dtype=np.float64)
        return PointCloud(pts, None if self.pixels is None else self.pixels.copy())


def _canonical_orientation(normal: np.ndarray, offset: float) -> tuple[np.ndarray, float]:
    if offset < 0:
        return -normal, -offset
    if offset == 0:
        # lexicographically largest of {n, -n}
        for c in normal:
            if c > 0:
                break
            if c < 0:
                return -normal, 0.0
    return normal, float(offset)


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . x = offset`` in canonical form (unit normal, offset >= 0)."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0 or not math.isfinite(self.offset):
            raise DegenerateInputError("plane needs a finite, nonzero normal")
        # leave already-unit normals untouched so canonical planes survive a round-trip bit-exact
        if abs(norm - 1.0) > 4 * np.finfo(np.float64).eps:
            n = n / norm
            d = float(self.offset) / norm
        else:
            d = float(self.offset)
        n, d = _canonical_orientation(n, d)
        object.__setattr__(self, "normal", tuple(float(c) for c in n))
        object.__setattr__(self, "offset", d)

    @classmethod
    def from_point_normal(cls, point, normal) -> "Plane":
        n = np.asarray(normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        return cls(tuple(n), float(n @ np.asarray(point, dtype=np.float64)))

    @property
    def n(self) -> np.ndarray:
        return np.array(self.normal)

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Vectorized |n.p - d| for an (N, 3) array."""
        return np.abs(np.asarray(points, dtype=np.float64) @ self.n - self.offset)

    def transformed(self, rotation: np.ndarray, translation=(0, 0, 0)) -> "Plane":
        n = np.asarray(rotation, dtype=np.float64) @ self.n
        return Plane(tuple(n), self.offset + float(n @ np.asarray(translation, dtype=np.float64)))

    def angle_to(self, other: "Plane") -> float:
        """Unsigned angle between the two normals, degrees."""
        c = abs(float(self.n @ other.n))
        return math.degrees(math.acos(min(1.0, c)))


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigurationError("box coordinates must be finite")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ConfigurationError(f"inverted box {vals}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        x0, y0, x1, y1 = (float(v) for v in a)
        return cls(x0, y0, x1, y1)


def unproject(depth: DepthImage, intr: CameraIntrinsics) -> PointCloud:
    """Back-project every valid pixel with the pinhole model.

    Points are returned in row-major pixel order, in meters.
    """
    if depth.width != intr.width or depth.height != intr.height:
        raise ConfigurationError(
            f"depth is {depth.width}x{depth.height}, intrinsics expect {intr.width}x{intr.height}"
        )
    rows, cols = np.nonzero(depth.values)
    z = depth.values[rows, cols].astype(np.float64) / 1000.0
    x = (cols - intr.cx) * z / intr.fx
    y = (rows - intr.cy) * z / intr.fy
    return PointCloud(np.column_stack([x, y, z]), np.column_stack([rows, cols]))


def project(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of (N, 3) camera-frame points to (N, 2) continuous (u, v)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    u = points[:, 0] * intr.fx / z + intr.cx
    v = points[:, 1] * intr.fy / z + intr.cy
    return np.column_stack([u, v])


def point_plane_distance(plane: Plane, p) -> float:
    p = np.asarray(p, dtype=np.float64)
    return abs(float(plane.n @ p) - plane.offset)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between every row of ``a`` (N, 4) and ``b`` (M, 4); zero where union is zero."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0, ax1, ay1 = (a[:, i : i + 1] for i in range(4))
    bx0, by0, bx1, by1 = (b[:, i] for i in range(4))
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    # per-coordinate 2-D arrays; a trailing (.., 2) axis is several times slower
    iw = np.minimum(ax1, bx1) - np.maximum(ax0, bx0)
    ih = np.minimum(ay1, by1) - np.maximum(ay0, by0)
    np.maximum(iw, 0.0, out=iw)
    np.maximum(ih, 0.0, out=ih)
    inter = iw * ih
    union = area_a + area_b - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_to_box(mask: np.ndarray) -> BoundingBox:
    """Tight box around a binary mask in pixel-edge coordinates; empty masks give a zero box."""
    rows = np.flatnonzero(np.any(mask, axis=1))
    cols = np.flatnonzero(np.any(mask, axis=0))
    if rows.size == 0:
        return BoundingBox(0.0, 0.0, 0.0, 0.0)
    return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def fit_plane_lsq(points) -> Plane:
    """Total-least-squares plane through ``points`` (N >= 3, not collinear)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateInputError(f"need at least 3 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(evals[2], 0.0)
    if scale == 0.0 or evals[1] <= 1e-12 * scale:
        raise DegenerateInputError("points are collinear or coincident")
    normal = evecs[:, 0]
    return Plane(tuple(normal), float(normal @ centroid))
