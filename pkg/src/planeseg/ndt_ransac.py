"""Ground-truth plane extraction with RANSAC over planar NDT cells.

The pipeline is: voxelize the cloud and fit a Gaussian per cell
(:func:`build_ndt`), flag cells whose covariance is flat
(:func:`classify_cells`), grow planes from single-cell hypotheses that must
agree with other cells in both position and normal direction
(:func:`extract_planes`), and finally turn the planes into a per-pixel
instance map (:func:`rasterize_instances`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage as ndi

from .errors import ConfigurationError, DegenerateInputError
from .geometry import CameraIntrinsics, Plane, PointCloud, fit_plane_lsq

__all__ = [
    "NdtRansacConfig",
    "NDTCell",
    "VoxelGrid",
    "PlaneInstance",
    "build_ndt",
    "classify_cells",
    "extract_planes",
    "rasterize_instances",
    "annotate_cloud",
]

_REFINE_ROUNDS = 3


@dataclass(frozen=True)
class NdtRansacConfig:
    cell_size: float = 0.10
    min_points_per_cell: int = 8
    planarity_ratio: float = 0.05
    ransac_iters: int = 200
    dist_thresh: float = 0.02
    angle_thresh: float = 15.0
    min_inlier_cells: int = 6
    min_mask_area: float = 0.005
    max_normal_spread: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        positive = (
            "cell_size",
            "min_points_per_cell",
            "planarity_ratio",
            "ransac_iters",
            "dist_thresh",
            "angle_thresh",
            "min_inlier_cells",
            "min_mask_area",
            "max_normal_spread",
        )
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigurationError(f"{name} must be > 0, got {v!r}")
        if not 0 < self.planarity_ratio < 1:
            raise ConfigurationError("planarity_ratio must lie in (0, 1)")
        if self.angle_thresh >= 90:
            raise ConfigurationError("angle_thresh must be below 90 degrees")
        if self.min_mask_area >= 1:
            raise ConfigurationError("min_mask_area is a fraction of the frame, must be < 1")
        for name in ("min_points_per_cell", "ransac_iters", "min_inlier_cells"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ConfigurationError(f"{name} must be an integer")


@dataclass
class NDTCell:
    index: tuple
    count: int
    mean: np.ndarray
    covariance: np.ndarray
    point_ids: np.ndarray
    eigenvalues: np.ndarray | None = None  # descending
    normal: np.ndarray | None = None
    planar: bool = False


@dataclass
class VoxelGrid:
    cell_size: float
    cells: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cells)

    def planar_cells(self) -> list:
        return [c for c in self.cells.values() if c.planar]


@dataclass
class PlaneInstance:
    plane: Plane
    mask: np.ndarray
    inlier_cells: list
    area_px: int = 0

    def __post_init__(self):
        self.area_px = int(np.count_nonzero(self.mask))


def build_ndt(cloud: PointCloud, cfg: NdtRansacConfig) -> VoxelGrid:
    """Voxelize ``cloud`` and compute per-cell mean, covariance and eigen-structure.

    Covariances are the maximum-likelihood (divide by count) estimate. Cells
    with fewer than ``cfg.min_points_per_cell`` points keep their moments but
    no eigen-structure. Cells are stored in the order of their smallest member
    point id, which keeps RANSAC sampling independent of the grid labeling.
    """
    grid = VoxelGrid(cfg.cell_size)
    pts = cloud.points
    if len(pts) == 0:
        return grid

    idx = np.floor(pts / cfg.cell_size).astype(np.int64)
    keys, first, inverse, counts = np.unique(
        idx, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    m = len(keys)

    sums = np.zeros((m, 3))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]
    centered = pts - means[inverse]
    outer = centered[:, :, None] * centered[:, None, :]
    covs = np.zeros((m, 3, 3))
    np.add.at(covs, inverse, outer)
    covs /= counts[:, None, None]
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))

    eligible = counts >= cfg.min_points_per_cell
    evals = np.zeros((m, 3))
    evecs = np.zeros((m, 3, 3))
    if np.any(eligible):
        w, v = np.linalg.eigh(covs[eligible])
        evals[eligible] = np.clip(w[:, ::-1], 0.0, None)
        evecs[eligible] = v[:, :, ::-1]

    order = np.argsort(inverse, kind="stable")
    members = np.split(order, np.cumsum(counts)[:-1])

    for c in np.argsort(first, kind="stable"):
        cell = NDTCell(
            index=tuple(int(v) for v in keys[c]),
            count=int(counts[c]),
            mean=means[c],
            covariance=covs[c],
            point_ids=members[c],
        )
        if eligible[c]:
            cell.eigenvalues = evals[c]
            cell.normal = evecs[c][:, 2] / np.linalg.norm(evecs[c][:, 2])
        grid.cells[cell.index] = cell
    return grid


def _is_planar(cell: NDTCell, cfg: NdtRansacConfig) -> bool:
    if cell.count < cfg.min_points_per_cell or cell.eigenvalues is None:
        return False
    l1, l2, l3 = cell.eigenvalues
    # a cell must span two directions before its flatness means anything;
    # single-column slices of a depth image are otherwise "planar" through the camera center
    if l2 <= cfg.planarity_ratio * l1:
        return False
    return l3 / l2 <= cfg.planarity_ratio


def classify_cells(grid: VoxelGrid, cfg: NdtRansacConfig) -> VoxelGrid:
    for cell in grid.cells.values():
        cell.planar = _is_planar(cell, cfg)
    return grid


def _consistent(means, normals, normal, offset, cfg) -> np.ndarray:
    cos_thresh = math.cos(math.radians(cfg.angle_thresh))
    dist = np.abs(means @ normal - offset)
    return (dist <= cfg.dist_thresh) & (np.abs(normals @ normal) >= cos_thresh)


def _normal_spread(cell_normals: np.ndarray, normal: np.ndarray) -> float:
    """Mean unsigned angle (degrees) between cell normals and ``normal``."""
    if len(cell_normals) == 0:
        return 0.0
    cos = np.clip(np.abs(cell_normals @ normal), 0.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def extract_planes(grid: VoxelGrid, cloud: PointCloud, cfg: NdtRansacConfig,
                   shape: tuple | None = None) -> list:
    """Sequential multi-plane RANSAC over the planar cells of ``grid``.

    Each round draws up to ``ransac_iters`` distinct planar cells, uses each
    one's (mean, normal) as a plane hypothesis, and keeps the hypothesis
    consistent with the most remaining cells. The winner is refit by total
    least squares over the member points of its consistent cells, the
    consistent set is recomputed against the refit plane, and those cells are
    consumed. A consensus whose cell normals deviate from the refit normal by
    more than ``max_normal_spread`` degrees on average is a curved patch; its
    cells are consumed without producing a plane. Extraction stops once no
    hypothesis reaches ``min_inlier_cells``.

    ``shape`` is the (height, width) of the source image; by default it is
    inferred from the point provenance.
    """
    cells = grid.planar_cells()
    if not cells:
        return []
    if shape is None:
        if cloud.pixels is None or len(cloud.pixels) == 0:
            raise ConfigurationError("image shape unknown: pass shape or a cloud with provenance")
        shape = tuple(int(v) + 1 for v in cloud.pixels.max(axis=0))

    means = np.array([c.mean for c in cells])
    normals = np.array([c.normal for c in cells])
    rng = np.random.default_rng(cfg.rng_seed)
    remaining = np.arange(len(cells))
    instances = []

    while len(remaining) >= cfg.min_inlier_cells:
        n_hyp = min(cfg.ransac_iters, len(remaining))
        seeds = remaining[rng.choice(len(remaining), size=n_hyp, replace=False)]
        rem_means = means[remaining]
        rem_normals = normals[remaining]
        hyp_n = normals[seeds]
        hyp_d = np.einsum("ij,ij->i", hyp_n, means[seeds])
        cos_thresh = math.cos(math.radians(cfg.angle_thresh))
        dist = np.abs(rem_means @ hyp_n.T - hyp_d)
        agree = np.abs(rem_normals @ hyp_n.T) >= cos_thresh
        support = ((dist <= cfg.dist_thresh) & agree).sum(axis=0)
        best = int(np.argmax(support))
        if support[best] < cfg.min_inlier_cells:
            break

        inliers = _consistent(rem_means, rem_normals, hyp_n[best], hyp_d[best], cfg)
        plane = None
        for _ in range(_REFINE_ROUNDS):
            ids = np.sort(np.concatenate([cells[i].point_ids for i in remaining[inliers]]))
            try:
                plane = fit_plane_lsq(cloud.points[ids])
            except DegenerateInputError:
                plane = None
                break
            refit = _consistent(rem_means, rem_normals, plane.n, plane.offset, cfg)
            if np.array_equal(refit, inliers):
                break
            inliers = refit

        if plane is None or np.count_nonzero(inliers) < cfg.min_inlier_cells:
            # the seed region cannot form a plane; retire its cells so the loop advances
            remaining = remaining[~_consistent(rem_means, rem_normals, hyp_n[best], hyp_d[best], cfg)]
            continue

        # consistent set against the final plane, so the predicates hold post hoc
        inliers = _consistent(rem_means, rem_normals, plane.n, plane.offset, cfg)
        chosen = remaining[inliers]
        if _normal_spread(normals[chosen], plane.n) > cfg.max_normal_spread:
            # cell normals fan out: a curved surface, not a plane
            remaining = remaining[~inliers]
            continue
        mask = np.zeros(shape, dtype=bool)
        if cloud.pixels is not None:
            ids = np.concatenate([cells[i].point_ids for i in chosen])
            mask[cloud.pixels[ids, 0], cloud.pixels[ids, 1]] = True
        instances.append(PlaneInstance(plane, mask, [cells[i].index for i in chosen]))
        remaining = remaining[~inliers]

    return instances


def rasterize_instances(instances: list, cloud: PointCloud, intr: CameraIntrinsics,
                        cfg: NdtRansacConfig) -> tuple:
    """Per-pixel instance labels from a set of planes.

    Every valid pixel takes the nearest plane within ``dist_thresh``. Each
    plane's pixels are split into 4-connected components, components smaller
    than ``min_mask_area`` of the frame are dropped, and ids are assigned by
    descending area starting at 1 (ties keep plane order, then component
    scan order).

    Returns ``(labels, planes)`` where ``labels`` is a uint16/uint32
    (height, width) array and ``planes[i]`` is the plane of label ``i + 1``.
    """
    if cloud.pixels is None:
        raise ConfigurationError("point provenance is required for rasterization")
    shape = (intr.height, intr.width)
    labels = np.zeros(shape, dtype=np.int64)
    if not instances or len(cloud) == 0:
        return labels.astype(np.uint16), []

    normals = np.array([inst.plane.n for inst in instances])
    offsets = np.array([inst.plane.offset for inst in instances])
    dist = np.abs(cloud.points @ normals.T - offsets)
    nearest = np.argmin(dist, axis=1)
    ok = dist[np.arange(len(nearest)), nearest] <= cfg.dist_thresh
    plane_of_pixel = np.full(shape, -1, dtype=np.int64)
    rows, cols = cloud.pixels[ok, 0], cloud.pixels[ok, 1]
    plane_of_pixel[rows, cols] = nearest[ok]

    min_area = cfg.min_mask_area * shape[0] * shape[1]
    four = ndi.generate_binary_structure(2, 1)
    components = []
    for p in range(len(instances)):
        comp, n = ndi.label(plane_of_pixel == p, structure=four)
        if n == 0:
            continue
        sizes = np.bincount(comp.ravel(), minlength=n + 1)
        for c in range(1, n + 1):
            if sizes[c] >= min_area:
                components.append((int(sizes[c]), p, c, comp))

    components.sort(key=lambda t: (-t[0], t[1], t[2]))
    planes = []
    for new_id, (_, p, c, comp) in enumerate(components, start=1):
        labels[comp == c] = new_id
        planes.append(instances[p].plane)
    dtype = np.uint16 if len(planes) <= np.iinfo(np.uint16).max else np.uint32
    return labels.astype(dtype), planes


def annotate_cloud(cloud: PointCloud, intr: CameraIntrinsics, cfg: NdtRansacConfig) -> tuple:
    """Full pipeline: NDT, planarity, RANSAC, rasterization. Returns ``(labels, planes)``."""
    grid = classify_cells(build_ndt(cloud, cfg), cfg)
    instances = extract_planes(grid, cloud, cfg, shape=(intr.height, intr.width))
    return rasterize_instances(instances, cloud, intr, cfg)


def with_overrides(cfg: NdtRansacConfig, **kw) -> NdtRansacConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
