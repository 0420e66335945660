from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from artipose.errors import EmptyCloud, LengthMismatch, MissingLabels
from artipose.se3 import RigidTransform

logger = logging.getLogger("artipose.cloud")

ChamferMode = Literal["uni", "bi"]
ChamferNorm = Literal["L1", "L2sq"]


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise EmptyCloud("point cloud must be a non-empty N x 3 array", details={"shape": list(pts.shape)})
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != pts.shape[0]:
                raise LengthMismatch(
                    "labels must match point count",
                    details={"points": pts.shape[0], "labels": labels.shape[0]},
                )
            if labels.min() < 0:
                raise ValueError("part labels must be non-negative")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def num_parts(self) -> int:
        if self.labels is None:
            return 0
        return int(self.labels.max()) + 1

    @property
    def diameter(self) -> float:
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise MissingLabels("point cloud carries no part labels")
        return self.labels

    def part(self, k: int) -> PointCloud:
        labels = self.require_labels()
        mask = labels == k
        if not mask.any():
            raise EmptyCloud("part has no points", details={"part": k})
        return PointCloud(self.points[mask])

    def parts(self) -> list[PointCloud]:
        return [self.part(k) for k in range(self.num_parts)]

    def transformed(self, T: RigidTransform) -> PointCloud:
        return PointCloud(T.apply(self.points), self.labels)

    def subset(self, indices: np.ndarray) -> PointCloud:
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return PointCloud(self.points[indices], labels)

    @classmethod
    def concat(cls, clouds: list[PointCloud], label_each: bool = True) -> PointCloud:
        points = np.concatenate([c.points for c in clouds], axis=0)
        labels = None
        if label_each:
            labels = np.concatenate([np.full(len(c), k, dtype=np.int64) for k, c in enumerate(clouds)])
        return cls(points, labels)


class NeighborIndex:
    """Read-only KD-tree over a point set; rebuilt per cloud, never updated."""

    def __init__(self, points: np.ndarray | PointCloud, workers: int = 1):
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
        self.points = pts
        self.tree = cKDTree(pts)
        self.workers = workers

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def radius(self, centers: np.ndarray, r: float) -> list[list[int]]:
        hits = self.tree.query_ball_point(np.asarray(centers, dtype=np.float64), r, workers=self.workers)
        return [sorted(h) for h in hits]

    def knn(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        return self.tree.query(np.asarray(queries, dtype=np.float64), k=k, workers=self.workers)


def radius_neighbors(idx: NeighborIndex, center, r: float) -> list[int]:
    if r <= 0:
        raise ValueError("radius must be positive")
    hits = idx.tree.query_ball_point(np.asarray(center, dtype=np.float64).reshape(3), r)
    return sorted(hits)


def nearest(src: np.ndarray, dst: np.ndarray | NeighborIndex, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Distance from each src point to its nearest dst point, and that point's index."""
    index = dst if isinstance(dst, NeighborIndex) else NeighborIndex(dst, workers=workers)
    dist, idx = index.tree.query(np.asarray(src, dtype=np.float64), k=1, workers=workers)
    return dist, idx


def _directed(src: np.ndarray, dst: np.ndarray, norm: ChamferNorm, workers: int) -> float:
    dist, _ = nearest(src, dst, workers=workers)
    if norm == "L2sq":
        dist = dist * dist
    return float(dist.mean())


def chamfer(
    X: PointCloud,
    Y: PointCloud,
    mode: ChamferMode = "bi",
    norm: ChamferNorm = "L1",
    workers: int = 1,
) -> float:
    """Mean nearest-neighbour distance X->Y, plus Y->X when mode is 'bi'."""
    if len(X) == 0 or len(Y) == 0:
        raise EmptyCloud("chamfer needs two non-empty clouds")
    value = _directed(X.points, Y.points, norm, workers)
    if mode == "bi":
        value += _directed(Y.points, X.points, norm, workers)
    return value


def bbox_center(X: PointCloud | np.ndarray) -> np.ndarray:
    pts = X.points if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64)
    if pts.size == 0:
        raise EmptyCloud("bounding box of an empty cloud")
    return (pts.min(axis=0) + pts.max(axis=0)) / 2.0


def iou_matrix(pred: np.ndarray, gt: np.ndarray, K: int) -> np.ndarray:
    """iou[p, g] between predicted label p and ground-truth label g; 0/0 counts as 1."""
    iou = np.zeros((K, K))
    for p in range(K):
        pm = pred == p
        for g in range(K):
            gm = gt == g
            union = np.count_nonzero(pm | gm)
            iou[p, g] = 1.0 if union == 0 else np.count_nonzero(pm & gm) / union
    return iou


def miou(pred_labels, gt_labels, K: int) -> float:
    """Mean IoU under the best one-to-one relabelling of the prediction."""
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise LengthMismatch("label arrays differ in length", details={"pred": pred.size, "gt": gt.size})
    if pred.size and (pred.min() < 0 or gt.min() < 0 or pred.max() >= K or gt.max() >= K):
        raise ValueError("labels out of range")
    iou = iou_matrix(pred, gt, K)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return float(iou[rows, cols].mean())


def miou_exhaustive(pred_labels, gt_labels, K: int) -> float:
    """Permutation-enumeration reference for `miou`, practical for K <= 6."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    iou = iou_matrix(pred, gt, K)
    return max(float(np.mean([iou[p, g] for g, p in enumerate(perm)])) for perm in itertools.permutations(range(K)))
