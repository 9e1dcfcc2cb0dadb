"""Soft Organ Distance loss and the baseline objectives.

All soft-min evaluations subtract the minimum before exponentiating, so
small temperatures do not underflow to 0/0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels


@dataclass(frozen=True)
class SodConfig:
    gamma_p: float = 0.1
    gamma_o: float = 1.0
    n_points: int = 100

    def __post_init__(self) -> None:
        if not self.gamma_p > 0 or not self.gamma_o > 0:
            raise ValueError(f"temperatures must be positive, got {self.gamma_p}, {self.gamma_o}")
        if self.n_points < 1:
            raise ValueError(f"n_points must be >= 1, got {self.n_points}")


class SodTargets:
    """Per-organ sampled points, stored as one ``(M, N, 3)`` array."""

    __slots__ = ("points",)

    def __init__(self, organs: Sequence[np.ndarray] | np.ndarray):
        if len(organs) == 0:
            raise ValueError("SodTargets needs at least one organ")
        arrs = [np.asarray(o, dtype=np.float64) for o in organs]
        for a in arrs:
            if a.ndim != 2 or a.shape[1] != 3 or len(a) == 0:
                raise ValueError("each organ needs a nonempty (N, 3) point list")
        if len({len(a) for a in arrs}) != 1:
            raise ValueError("all organs must carry the same number of points")
        pts = np.stack(arrs)
        if not np.all(np.isfinite(pts)):
            raise ValueError("target coordinates must be finite")
        self.points = pts

    @property
    def n_organs(self) -> int:
        return self.points.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[1]


def point_softmin_weights(distances, gamma_p: float) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    e = np.exp(-(d - d.min()) / gamma_p)
    return e / e.sum()


def organ_loss(pred, points, gamma_p: float) -> float:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("organ_loss needs at least one point")
    d = np.linalg.norm(np.asarray(pred, dtype=np.float64) - pts, axis=1)
    return float(np.dot(d, point_softmin_weights(d, gamma_p)))


def total_loss_and_grad(pred, targets: SodTargets, cfg: SodConfig) -> tuple[float, np.ndarray]:
    """Two-level soft-min loss and its exact gradient w.r.t. the prediction."""
    if not isinstance(targets, SodTargets):
        targets = SodTargets(targets)
    p = np.ascontiguousarray(np.asarray(pred, dtype=np.float64).reshape(1, 3))
    pts = np.ascontiguousarray(targets.points[None])
    loss, grad, _ = kernels.sod_batch(p, pts, np.array([targets.n_organs], dtype=np.int64), cfg.gamma_p, cfg.gamma_o)
    return float(loss[0]), grad[0]


def pack_targets(targets: Sequence[SodTargets]) -> tuple[np.ndarray, np.ndarray]:
    """Pad a batch of targets to ``(B, M_max, N, 3)``; returns points and organ counts."""
    m_max = max(t.n_organs for t in targets)
    n = targets[0].n_points
    out = np.zeros((len(targets), m_max, n, 3))
    counts = np.empty(len(targets), dtype=np.int64)
    for i, t in enumerate(targets):
        if t.n_points != n:
            raise ValueError("all targets in a batch must share n_points")
        out[i, : t.n_organs] = t.points
        counts[i] = t.n_organs
    return out, counts


def sod_batch_loss_and_grad(preds: np.ndarray, targets: Sequence[SodTargets], cfg: SodConfig):
    pts, counts = pack_targets(targets)
    loss, grad, _ = kernels.sod_batch(np.ascontiguousarray(preds, dtype=np.float64), pts, counts, cfg.gamma_p, cfg.gamma_o)
    return loss, grad


def mse_target_loss(pred, targets: SodTargets) -> tuple[float, np.ndarray]:
    """Squared error to the mean of every sampled target point."""
    if not isinstance(targets, SodTargets):
        targets = SodTargets(targets)
    t = targets.points.reshape(-1, 3).mean(axis=0)
    r = np.asarray(pred, dtype=np.float64) - t
    return float(r @ r), 2.0 * r


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def multilabel_classifier_loss(logits, target_ids) -> tuple[float, np.ndarray]:
    """Cross-entropy against the multi-hot target rescaled to sum to one.

    ``target_ids`` are column indices into ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    idx = sorted(set(int(i) for i in target_ids))
    if not idx:
        raise ValueError("target set is empty")
    q = np.zeros_like(logits)
    q[idx] = 1.0 / len(idx)
    ls = log_softmax(logits)
    return float(-(q * ls).sum()), np.exp(ls) - q


def triplet_loss(anchor, positive, negative, margin: float = 1.0):
    """Hinge triplet loss on Euclidean distances.

    Returns ``(loss, (grad_anchor, grad_positive, grad_negative))``. At the
    hinge and at zero distances the subgradient 0 is used.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    if a.size == 0:
        raise ValueError("zero-length vectors")
    dp, dn = np.linalg.norm(a - p), np.linalg.norm(a - n)
    val = dp - dn + margin
    zero = np.zeros_like(a)
    if val <= 0:
        return 0.0, (zero, zero.copy(), zero.copy())
    up = (a - p) / dp if dp > 0 else zero
    un = (a - n) / dn if dn > 0 else zero
    return float(val), (up - un, -up, un)


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def batch_hard_triplets(embeddings: np.ndarray, annotation_sets: Sequence[frozenset]) -> list[tuple[int, int, int]]:
    """Hardest positive and hardest negative per anchor within a batch.

    Positives share the anchor's exact annotation set. Anchors lacking a
    positive or a negative in the batch are skipped; ties go to the lowest
    index.
    """
    d = pairwise_distances(np.asarray(embeddings, dtype=np.float64))
    keys = list(annotation_sets)
    out = []
    for i in range(len(keys)):
        same = np.array([keys[j] == keys[i] and j != i for j in range(len(keys))])
        diff = np.array([keys[j] != keys[i] for j in range(len(keys))])
        if not same.any() or not diff.any():
            continue
        pos = int(np.argmax(np.where(same, d[i], -np.inf)))
        neg = int(np.argmin(np.where(diff, d[i], np.inf)))
        out.append((i, pos, neg))
    return out
