"""Grounding metrics (IOR, NVD, NVD-O, IGR), Recall@K and aggregation.

Predicted points are in voxel coordinates; distances are reported in mm
internally and NVD in centimeters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .atlas import Atlas
from .geometry import DegenerateHullError, PointIndex, convex_hull, point_in_hull, round_to_voxel

IOR_THRESHOLD_MM = 10.0


@dataclass(frozen=True)
class MetricEntry:
    name: str
    mean: float | None
    standard_error: float | None
    count: int

    @property
    def defined(self) -> bool:
        return self.count > 0


def aggregate(name: str, values: Iterable[float]) -> MetricEntry:
    """Mean and standard error (sample std / sqrt(n)); empty input is flagged with count 0."""
    v = np.asarray(list(values), dtype=np.float64)
    if len(v) == 0:
        return MetricEntry(name, None, None, 0)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return MetricEntry(name, float(v.mean()), se, len(v))


@dataclass
class MetricsReport:
    entries: dict[str, MetricEntry] = field(default_factory=dict)
    per_organ: dict[int, dict[str, MetricEntry]] = field(default_factory=dict)

    def add(self, entry: MetricEntry) -> None:
        self.entries[entry.name] = entry

    def __getitem__(self, name: str) -> MetricEntry:
        return self.entries[name]


def organ_index(atlas: Atlas, oid: int) -> PointIndex:
    organ = atlas.organ(oid)
    return atlas.cached(("index", oid), lambda: PointIndex(organ.voxels))


def _check_targets(target_ids, atlas: Atlas) -> list[int]:
    ids = sorted(int(t) for t in target_ids)
    if not ids:
        raise ValueError("target organ set is empty")
    for t in ids:
        if t not in atlas.registry:
            raise KeyError(f"unknown organ id {t}")
    return ids


def _inside_and_distance(pred, target_ids, atlas: Atlas) -> tuple[bool, float]:
    ids = _check_targets(target_ids, atlas)
    p = np.asarray(pred, dtype=np.float64)
    if atlas.label_at(round_to_voxel(p, atlas.dims)) in ids:
        return True, 0.0
    d = min(float(organ_index(atlas, t).nearest(p)[0]) for t in ids)
    return False, d * atlas.resolution_mm


def ior_hit(pred_voxelspace, target_organ_ids, atlas: Atlas, threshold_mm: float = IOR_THRESHOLD_MM) -> bool:
    """Rounded voxel lies in a target organ, or a target voxel is strictly closer than the threshold."""
    inside, dist_mm = _inside_and_distance(pred_voxelspace, target_organ_ids, atlas)
    return inside or dist_mm < threshold_mm


def nvd_cm(pred, target_organ_ids, atlas: Atlas) -> float:
    """0 inside a target organ, else cm to the nearest voxel of the nearest target organ."""
    return _inside_and_distance(pred, target_organ_ids, atlas)[1] / 10.0


def grounding_arrays(points: np.ndarray, target_sets: Sequence[Iterable[int]], atlas: Atlas, threshold_mm: float = IOR_THRESHOLD_MM):
    """Vectorized IOR hits and NVD (cm) for a batch of predictions."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sets = [_check_targets(s, atlas) for s in target_sets]
    if len(sets) != len(pts):
        raise ValueError("points and target sets differ in length")
    rounded = round_to_voxel(pts, atlas.dims)
    labels = atlas.labels[rounded[:, 0], rounded[:, 1], rounded[:, 2]]
    inside = np.array([int(lab) in s for lab, s in zip(labels, sets)], dtype=bool)
    dist = np.full(len(pts), np.inf)
    for oid in atlas.registry.ids:
        rows = np.array([i for i, s in enumerate(sets) if oid in s and not inside[i]], dtype=np.int64)
        if len(rows):
            d, _ = organ_index(atlas, oid).nearest(pts[rows])
            dist[rows] = np.minimum(dist[rows], d * atlas.resolution_mm)
    dist[inside] = 0.0
    hits = inside | (dist < threshold_mm)
    return hits, dist / 10.0


def nvd_o(nvd_values: Iterable[float]) -> MetricEntry:
    """NVD restricted to predictions that fell outside every target organ."""
    return aggregate("NVD-O", [v for v in nvd_values if v > 0])


def grounding_report(points, target_sets, atlas: Atlas) -> MetricsReport:
    hits, nvd = grounding_arrays(points, target_sets, atlas)
    rep = MetricsReport()
    rep.add(aggregate("IOR", hits.astype(np.float64)))
    rep.add(aggregate("NVD", nvd))
    rep.add(nvd_o(nvd))
    return rep


def group_hull(atlas: Atlas, group: str):
    """Convex hull of every voxel in the functional group, or None when degenerate."""

    def build():
        pts = np.concatenate([atlas.organ(o).voxels for o in atlas.registry.groups[group]])
        try:
            return convex_hull(pts)
        except DegenerateHullError:
            return None

    return atlas.cached(("hull", group), build)


def group_index(atlas: Atlas, group: str) -> PointIndex:
    return atlas.cached(
        ("group-index", group),
        lambda: PointIndex(np.concatenate([atlas.organ(o).voxels for o in atlas.registry.groups[group]])),
    )


def igr_hit(pred, heldout_organ: int, atlas: Atlas, fallback_mm: float = IOR_THRESHOLD_MM) -> bool | np.ndarray:
    """Prediction falls inside the convex hull of the held-out organ's functional group.

    The hull covers every organ of the group, the held-out one included. A
    group whose voxels are coplanar falls back to "closer than ``fallback_mm``
    to some group voxel". ``pred`` may be a single point or a batch.
    """
    organ = atlas.organ(heldout_organ)
    group = organ.functional_group
    if not atlas.registry.groups.get(group):
        raise ValueError(f"organ {heldout_organ} has an empty functional group")
    hull = group_hull(atlas, group)
    p = np.asarray(pred, dtype=np.float64)
    if hull is not None:
        return point_in_hull(hull, p)
    d, _ = group_index(atlas, group).nearest(p)
    res = np.asarray(d) * atlas.resolution_mm < fallback_mm
    return bool(res) if np.ndim(res) == 0 else res


def recall_at_k(query_points, db_points, query_annotations, db_annotations, k: int) -> float:
    """Fraction of queries with an identical-annotation item among the k nearest db items.

    Euclidean distance; ties keep the lower db index first.
    """
    q = np.asarray(query_points, dtype=np.float64)
    db = np.asarray(db_points, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(db):
        raise ValueError(f"k={k} exceeds database size {len(db)}")
    if len(q) == 0:
        raise ValueError("no queries")
    qa = [frozenset(a) for a in query_annotations]
    da = [frozenset(a) for a in db_annotations]
    hits = 0
    for i in range(len(q)):
        d = np.sqrt(((db - q[i]) ** 2).sum(axis=1))
        top = np.argsort(d, kind="stable")[:k]
        hits += any(da[j] == qa[i] for j in top)
    return hits / len(q)


def leave_one_out_recall(points, annotations, ks: Sequence[int]) -> dict[int, MetricEntry]:
    """Each item queries all the others; returns mean +- SE per K."""
    pts = np.asarray(points, dtype=np.float64)
    ann = [frozenset(a) for a in annotations]
    n = len(pts)
    if max(ks) > n - 1:
        raise ValueError(f"need more than {max(ks)} items for Recall@{max(ks)}, got {n}")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    hits = {k: np.zeros(n) for k in ks}
    for i in range(n):
        others = np.r_[0:i, i + 1 : n]
        order = others[np.argsort(dist[i, others], kind="stable")]
        match = np.array([ann[j] == ann[i] for j in order])
        for k in ks:
            hits[k][i] = float(match[:k].any())
    return {k: aggregate(f"R@{k}", hits[k]) for k in ks}
