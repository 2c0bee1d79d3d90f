"""Analytic depth renderings used for fixtures and recovery checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, DepthImage, Plane


def default_intrinsics(width: int = 640, height: int = 480) -> CameraIntrinsics:
    return CameraIntrinsics(fx=525.0, fy=525.0, cx=(width - 1) / 2, cy=(height - 1) / 2,
                            width=width, height=height)


def rotation_xyz(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation matrix Rz @ Ry @ Rx from angles in degrees."""
    ax, ay, az = np.radians([rx, ry, rz])
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


@dataclass
class SyntheticScene:
    depth: DepthImage
    intrinsics: CameraIntrinsics
    labels: np.ndarray  # analytic ground truth, 0 = nothing hit
    planes: list


def _pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def _quantize(z_m: np.ndarray, noise_mm: float, rng: np.random.Generator) -> np.ndarray:
    valid = np.isfinite(z_m)
    mm = np.where(valid, z_m * 1000.0, 0.0)
    if noise_mm > 0:
        mm = mm + rng.normal(0.0, noise_mm, size=mm.shape) * valid
    mm = np.rint(mm)
    mm[~valid] = 0
    return np.clip(mm, 0, 65535).astype(np.uint16)


def render_planes(planes: list, intr: CameraIntrinsics, noise_mm: float = 1.0,
                  seed: int = 0) -> SyntheticScene:
    """Ray-cast the interior of the convex region bounded by ``planes``.

    The camera sits at the origin inside the region, so the visible surface
    along each ray is its nearest positive intersection.
    """
    rays = _pixel_rays(intr)
    ts = []
    for pl in planes:
        denom = rays @ pl.n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = pl.offset / denom
        ts.append(np.where((denom > 1e-9) & (t > 0), t, np.inf))
    ts = np.stack(ts)
    nearest = np.argmin(ts, axis=0)
    t_min = np.take_along_axis(ts, nearest[None], axis=0)[0]
    hit = np.isfinite(t_min)
    labels = np.where(hit, nearest + 1, 0).astype(np.uint16)
    z = np.where(hit, t_min, np.nan)  # ray z component is 1, so t is depth
    rng = np.random.default_rng(seed)
    depth = DepthImage(_quantize(z, noise_mm, rng))
    labels[depth.values == 0] = 0
    return SyntheticScene(depth, intr, labels, list(planes))


def box_room(intr: CameraIntrinsics | None = None, noise_mm: float = 1.0, seed: int = 0,
             rotation: np.ndarray | None = None) -> SyntheticScene:
    """Three mutually orthogonal planes (floor, left wall, back wall) seen at an oblique pose."""
    intr = intr or default_intrinsics()
    if rotation is None:
        rotation = rotation_xyz(15.0, 18.0, 4.0)
    room = [
        ((0.0, 1.0, 0.0), 1.1),   # floor, y points down
        ((-1.0, 0.0, 0.0), 1.3),  # left wall
        ((0.0, 0.0, 1.0), 3.2),   # back wall
    ]
    planes = [Plane(tuple(rotation @ np.array(n)), d) for n, d in room]
    return render_planes(planes, intr, noise_mm=noise_mm, seed=seed)


def sphere(intr: CameraIntrinsics | None = None, radius: float = 0.5,
           center=(0.0, 0.0, 1.5), noise_mm: float = 1.0, seed: int = 0) -> SyntheticScene:
    """A lone sphere in front of the camera; background pixels are invalid."""
    intr = intr or default_intrinsics()
    rays = _pixel_rays(intr)
    c = np.asarray(center, dtype=np.float64)
    a = np.einsum("hwi,hwi->hw", rays, rays)
    b = -2.0 * rays @ c
    cc = c @ c - radius**2
    disc = b * b - 4 * a * cc
    hit = disc >= 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2 * a), np.nan)
    hit &= t > 0
    z = np.where(hit, t, np.nan)
    rng = np.random.default_rng(seed)
    depth = DepthImage(_quantize(z, noise_mm, rng))
    labels = (depth.values > 0).astype(np.uint16)
    return SyntheticScene(depth, intr, labels, [])
