"""Nearest-voxel queries, voxel rounding and 3D convex hulls."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull as _QhullHull
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


class DegenerateHullError(GeometryError):
    """The point set spans fewer than three dimensions."""


class PointIndex:
    """Exact Euclidean nearest-neighbour queries over integer voxel points."""

    def __init__(self, points: np.ndarray):
        points = np.asarray(points)
        if points.ndim != 2 or points.shape[1] != 3:
            raise GeometryError(f"points must have shape (n, 3), got {points.shape}")
        if len(points) == 0:
            raise GeometryError("cannot build an index over zero points")
        self.points = points
        self._tree = cKDTree(points.astype(np.float64))

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances (voxel units) and indices of the nearest stored point."""
        q = np.asarray(queries, dtype=np.float64)
        return self._tree.query(q, k=1)


def nearest_voxel_distance_mm(index: PointIndex, p: Sequence[float] | np.ndarray, resolution_mm: float) -> float | np.ndarray:
    """Distance in mm from ``p`` (voxel coordinates) to the closest voxel center.

    ``p`` may be a single 3-vector or an ``(n, 3)`` batch.
    """
    if index is None or len(index) == 0:
        raise GeometryError("empty index")
    d, _ = index.nearest(p)
    d = np.asarray(d, dtype=np.float64) * resolution_mm
    return float(d) if d.ndim == 0 else d


def round_to_voxel(p, dims: Sequence[int]) -> np.ndarray:
    """Round half away from zero, then clamp into the volume."""
    p = np.asarray(p, dtype=np.float64)
    r = np.sign(p) * np.floor(np.abs(p) + 0.5)
    hi = np.asarray(dims, dtype=np.float64) - 1
    return np.clip(r, 0, hi).astype(np.int64)


@dataclass(frozen=True, eq=False)
class ConvexHull3:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) indices into vertices, counter-clockwise seen from outside
    normals: np.ndarray  # (F, 3) unit outward normals
    offsets: np.ndarray  # (F,) so that normals @ x + offsets <= 0 inside
    diameter: float
    volume: float

    def signed_distances(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.normals.T + self.offsets


def convex_hull(points) -> ConvexHull3:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"points must have shape (n, 3), got {pts.shape}")
    if len(pts) < 4:
        raise GeometryError(f"convex hull needs at least 4 points, got {len(pts)}")
    pts = np.unique(pts, axis=0)
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if len(pts) < 4 or sv[0] == 0 or sv[-1] <= 1e-10 * sv[0]:
        raise DegenerateHullError("point set is coplanar or collinear")
    qh = _QhullHull(pts)
    vidx = np.asarray(qh.vertices)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[vidx] = np.arange(len(vidx))
    vertices = pts[vidx]
    normals = qh.equations[:, :3].copy()
    offsets = qh.equations[:, 3].copy()
    faces = remap[qh.simplices]
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), normals) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    diameter = float(np.linalg.norm(hi - lo))
    return ConvexHull3(vertices, faces, normals, offsets, diameter, float(qh.volume))


def point_in_hull(hull: ConvexHull3, p, rel_tol: float = 1e-9) -> bool | np.ndarray:
    """Closed containment test; ``p`` may be one point or an ``(n, 3)`` batch."""
    s = hull.signed_distances(p)
    inside = np.all(s <= rel_tol * hull.diameter, axis=-1)
    return bool(inside) if np.ndim(inside) == 0 else inside
