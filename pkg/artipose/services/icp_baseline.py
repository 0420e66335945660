"""Oracle ICP baseline: per-part registration of a segmented template to a segmented observation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from artipose.cloud import NeighborIndex, PointCloud, bbox_center, nearest
from artipose.errors import LabelMismatch
from artipose.rotgroup import RotationGroup
from artipose.se3 import RigidTransform, compose
from artipose.worker.pool import map_ordered

logger = logging.getLogger("artipose.services.icp_baseline")

CHANGE_TOL = 1e-7
INLIER_RATIO = 0.1
TRANSLATION_HYPOTHESES = 10
TRANSLATION_JITTER = 0.2


@dataclass
class IcpResult:
    transform: RigidTransform
    inlier_rmse: float
    iterations_used: int
    converged: bool
    rmse_history: list[float] = field(default_factory=list)

    @property
    def no_inliers(self) -> bool:
        return not np.isfinite(self.inlier_rmse)


@dataclass
class OracleIcpResult:
    parts: list[IcpResult]
    labels: np.ndarray
    hypothesis_rmse: list[list[float]]
    templates_used: list[int]

    @property
    def transforms(self) -> list[RigidTransform]:
        return [r.transform for r in self.parts]


def rigid_fit(A: np.ndarray, B: np.ndarray) -> RigidTransform:
    """Least-squares R, t with B ≈ R A + t (no scale); reflections are folded back into SO(3)."""
    centroid_A = A.mean(axis=0)
    centroid_B = B.mean(axis=0)
    H = (A - centroid_A).T @ (B - centroid_B)
    U, _, Vt = np.linalg.svd(H)
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    R = V @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ U.T
    return RigidTransform(R, centroid_B - R @ centroid_A)


def icp(
    src: PointCloud,
    dst: PointCloud | NeighborIndex,
    init: RigidTransform,
    max_iter: int = 50,
    inlier_r: float = 0.1,
) -> IcpResult:
    """Point-to-point ICP. A start with no correspondence inside inlier_r returns a flagged result."""
    if inlier_r <= 0:
        raise ValueError("inlier radius must be positive")
    index = dst if isinstance(dst, NeighborIndex) else NeighborIndex(dst)
    target = index.points
    T = init
    history: list[float] = []
    converged = False
    iterations = 0

    for it in range(max_iter):
        moved = T.apply(src.points)
        dist, idx = index.knn(moved)
        inliers = dist <= inlier_r
        if not inliers.any():
            if it == 0:
                return IcpResult(init, float("inf"), 0, False, [])
            break
        history.append(float(np.sqrt(np.mean(dist[inliers] ** 2))))
        step = rigid_fit(moved[inliers], target[idx[inliers]])
        T = compose(step, T)
        iterations = it + 1
        change = float(np.linalg.norm(step.rotation - np.eye(3)) + np.linalg.norm(step.translation))
        if change < CHANGE_TOL:
            converged = True
            break

    dist, _ = index.knn(T.apply(src.points))
    inliers = dist <= inlier_r
    rmse = float(np.sqrt(np.mean(dist[inliers] ** 2))) if inliers.any() else float("inf")
    return IcpResult(T, rmse, iterations, converged, history)


def _initial_transforms(
    src: PointCloud,
    dst: PointCloud,
    group: RotationGroup,
    partial: bool,
    rng: np.random.Generator,
) -> list[RigidTransform]:
    """One start per group element, rotated bounding-box centres made to coincide.

    Partial views are not centralized: the observed bbox centre is biased
    toward the visible side, so it only seeds the translation and every element
    also gets TRANSLATION_HYPOTHESES - 1 jittered offsets around it.
    """
    c_src, c_dst = bbox_center(src), bbox_center(dst)
    diameter = dst.diameter
    inits = []
    for g in range(group.order):
        R = group.matrices[g]
        base = c_dst - R @ c_src  # rotated bounding-box centres coincide
        if not partial:
            inits.append(RigidTransform(R, base))
            continue
        offsets = np.zeros((TRANSLATION_HYPOTHESES, 3))
        offsets[1:] = rng.uniform(-TRANSLATION_JITTER * diameter, TRANSLATION_JITTER * diameter, size=(TRANSLATION_HYPOTHESES - 1, 3))
        inits.extend(RigidTransform(R, base + o) for o in offsets)
    return inits


def register_part(
    src: PointCloud,
    dst: PointCloud,
    group: RotationGroup,
    partial: bool = False,
    max_iter: int = 50,
    inlier_ratio: float = INLIER_RATIO,
    seed: int = 0,
    jobs: int = 1,
) -> tuple[IcpResult, list[float]]:
    """Best ICP result over all initial hypotheses, selected by (inlier RMSE, hypothesis index)."""
    rng = np.random.default_rng(seed)
    inits = _initial_transforms(src, dst, group, partial, rng)
    index = NeighborIndex(dst)
    inlier_r = inlier_ratio * src.diameter
    results = map_ordered(lambda T0: icp(src, index, T0, max_iter=max_iter, inlier_r=inlier_r), inits, jobs)
    rmse = [r.inlier_rmse for r in results]
    best = min(range(len(results)), key=lambda h: (rmse[h], h))
    return results[best], rmse


def oracle_icp(
    template: PointCloud | list[PointCloud],
    observed: PointCloud,
    group: RotationGroup,
    partial: bool = False,
    max_iter: int = 50,
    inlier_ratio: float = INLIER_RATIO,
    seed: int = 0,
    jobs: int = 1,
) -> OracleIcpResult:
    """Register every template part to the matching observed part, then segment by nearest registered part.

    template parts are expected in their canonical part frames, so each returned
    transform is directly that part's pose. Several templates may be given; per
    part, the lowest-RMSE template wins.
    """
    templates = template if isinstance(template, list) else [template]
    observed.require_labels()
    K = observed.num_parts
    for t in templates:
        if t.num_parts != K:
            raise LabelMismatch("template and observation part counts differ", details={"template": t.num_parts, "observed": K})

    parts: list[IcpResult] = []
    tables: list[list[float]] = []
    used: list[int] = []
    for k in range(K):
        dst = observed.part(k)
        best: tuple[float, int, IcpResult, list[float]] | None = None
        for ti, tmpl in enumerate(templates):
            result, rmse = register_part(tmpl.part(k), dst, group, partial, max_iter, inlier_ratio, seed + k, jobs)
            if best is None or result.inlier_rmse < best[0]:
                best = (result.inlier_rmse, ti, result, rmse)
        parts.append(best[2])
        tables.append(best[3])
        used.append(best[1])
        logger.debug("part registered part=%d template=%d rmse=%.3g", k, best[1], best[0])

    registered = PointCloud.concat(
        [templates[ti].part(k).transformed(r.transform) for k, (r, ti) in enumerate(zip(parts, used))]
    )
    _, idx = nearest(observed.points, registered.points)
    labels = registered.labels[idx]
    logger.info(
        "oracle icp done parts=%d hypotheses=%d mean_rmse=%.3g",
        K,
        len(tables[0]) if tables else 0,
        float(np.mean([r.inlier_rmse for r in parts])),
    )
    return OracleIcpResult(parts=parts, labels=labels, hypothesis_rmse=tables, templates_used=used)
