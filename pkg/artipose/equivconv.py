"""Group-anchored point convolution and its pose-aware, part-level variant.

Features carry a trailing group axis of length |G|. The kernel h(d) is a
KPConv-style linear correlation over M kernel points; the group acts by
rotating the displacement before the kernel is evaluated. In the pose-aware
variant, neighbours are gathered in canonical coordinates and displacements
are taken after mapping the neighbour into the centre point's pose frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from artipose.cloud import NeighborIndex, PointCloud, bbox_center
from artipose.errors import GroupMismatch, MissingLabels, PoseMissing, ShapeMismatch
from artipose.rotgroup import RotationGroup, act_on_feature_axis, quantize_many
from artipose.se3 import RigidTransform, compose, random_transform, rodrigues
from artipose.worker.pool import map_ordered

logger = logging.getLogger("artipose.equivconv")

PoolMode = Literal["max", "attention"]
PoseFeed = Literal["tracked", "identity"]

KERNEL_SHELL = 0.66
KERNEL_INNER = 0.33


@dataclass(frozen=True, eq=False)
class EquivariantFeature:
    values: np.ndarray  # (N, C, G)
    group: RotationGroup

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ShapeMismatch("features must be N x C x |G|", details={"shape": list(values.shape)})
        if values.shape[-1] != self.group.order:
            raise GroupMismatch(
                "feature group axis does not match the group order",
                details={"axis": values.shape[-1], "order": self.group.order},
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def num_points(self) -> int:
        return int(self.values.shape[0])

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class KernelSpec:
    kernel_points: np.ndarray  # (M, 3) inside the unit ball
    weights: np.ndarray  # (M, C_in, C_out)
    radius: float
    influence: float

    def __post_init__(self):
        if self.kernel_points.ndim != 2 or self.kernel_points.shape[0] < 1 or self.kernel_points.shape[1] != 3:
            raise ShapeMismatch("kernel points must be M x 3 with M >= 1")
        if self.weights.ndim != 3 or self.weights.shape[0] != self.kernel_points.shape[0]:
            raise ShapeMismatch(
                "kernel weights must be M x C_in x C_out",
                details={"weights": list(self.weights.shape), "M": self.kernel_points.shape[0]},
            )
        if self.radius <= 0 or self.influence <= 0:
            raise ValueError("kernel radius and influence must be positive")

    @property
    def c_in(self) -> int:
        return int(self.weights.shape[1])

    @property
    def c_out(self) -> int:
        return int(self.weights.shape[2])

    @property
    def scaled_points(self) -> np.ndarray:
        return self.kernel_points * self.radius

    def response(self, displacements: np.ndarray) -> np.ndarray:
        """Linear kernel-point correlation max(0, 1 - |d - k_m| / sigma), shape (..., M)."""
        diff = displacements[..., None, :] - self.scaled_points
        return np.maximum(0.0, 1.0 - np.linalg.norm(diff, axis=-1) / self.influence)


def _icosahedron_vertices() -> np.ndarray:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            verts.extend([(0.0, a, b), (a, b, 0.0), (b, 0.0, a)])
    verts = np.array(verts)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True)


def make_kernel(
    c_in: int,
    c_out: int,
    radius: float,
    seed: int = 0,
    dtype=np.float64,
    num_points: int = 15,
) -> KernelSpec:
    """Center, the 12 icosahedron vertices on an outer shell, then seeded interior points."""
    if num_points < 1:
        raise ValueError("a kernel needs at least one point")
    rng = np.random.default_rng(seed)
    points = [np.zeros((1, 3)), KERNEL_SHELL * _icosahedron_vertices()[: max(0, num_points - 1)]]
    extra = num_points - 1 - min(12, num_points - 1)
    if extra > 0:
        dirs = rng.standard_normal((extra, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        points.append(KERNEL_INNER * dirs)
    kernel_points = np.concatenate(points, axis=0)

    bound = 1.0 / math.sqrt(num_points * c_in)
    weights = rng.uniform(-bound, bound, size=(num_points, c_in, c_out)).astype(dtype)
    return KernelSpec(kernel_points=kernel_points, weights=weights, radius=float(radius), influence=radius / 2.0)


@dataclass(frozen=True, eq=False)
class PerPointPose:
    rotations: np.ndarray  # (N, 3, 3)
    translations: np.ndarray  # (N, 3)

    def __post_init__(self):
        R = np.asarray(self.rotations, dtype=np.float64)
        t = np.asarray(self.translations, dtype=np.float64)
        if R.ndim != 3 or R.shape[1:] != (3, 3) or t.shape != (R.shape[0], 3):
            raise ShapeMismatch("per-point poses must be N x 3 x 3 rotations and N x 3 translations")
        object.__setattr__(self, "rotations", R)
        object.__setattr__(self, "translations", t)

    def __len__(self) -> int:
        return int(self.rotations.shape[0])

    @classmethod
    def identity(cls, n: int) -> PerPointPose:
        return cls(np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros((n, 3)))

    @classmethod
    def from_parts(cls, labels: np.ndarray, part_poses: list[RigidTransform]) -> PerPointPose:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and labels.max() >= len(part_poses):
            raise PoseMissing(
                "a labelled part has no pose", details={"parts": len(part_poses), "max_label": int(labels.max())}
            )
        R = np.stack([p.rotation for p in part_poses])
        t = np.stack([p.translation for p in part_poses])
        return cls(R[labels], t[labels])

    def canonical(self, points: np.ndarray) -> np.ndarray:
        """P_i^-1 x_i for every point."""
        return np.einsum("nba,nb->na", self.rotations, points - self.translations)


def invariant_input(n: int, channels: int, group: RotationGroup, seed: int = 0, dtype=np.float64) -> EquivariantFeature:
    """Random per-point features, constant along the group axis."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n, channels, 1)).astype(dtype)
    return EquivariantFeature(np.repeat(base, group.order, axis=2), group)


def _check_inputs(X: PointCloud, Fin: EquivariantFeature, k: KernelSpec, r_neigh: float) -> None:
    if r_neigh <= 0:
        raise ValueError("neighbourhood radius must be positive")
    if Fin.num_points != len(X):
        raise ShapeMismatch("features are not defined on this cloud", details={"points": len(X), "features": Fin.num_points})
    if Fin.channels != k.c_in:
        raise ShapeMismatch("kernel input width does not match features", details={"features": Fin.channels, "kernel": k.c_in})


def _aggregate(
    Fin: EquivariantFeature,
    k: KernelSpec,
    nbrs: np.ndarray,
    disp: np.ndarray,
    feat_idx: np.ndarray,
) -> np.ndarray:
    """Per-point (G, M*C_in) block: sum over neighbours of kernel response times gathered features."""
    group = Fin.group
    rotated = np.einsum("gab,nb->nga", group.matrices, disp)
    w = k.response(rotated).astype(Fin.values.dtype)  # (n, G, M)
    gathered = Fin.values[nbrs[:, None], :, feat_idx]  # (n, G, C)
    block = np.einsum("ngm,ngc->gmc", w, gathered)
    return block.reshape(group.order, -1)


def _finish(blocks: list[np.ndarray], k: KernelSpec, group: RotationGroup) -> EquivariantFeature:
    stacked = np.stack(blocks)  # (N, G, M*C_in)
    W = k.weights.reshape(-1, k.c_out).astype(stacked.dtype)
    out = stacked @ W  # (N, G, C_out)
    return EquivariantFeature(np.ascontiguousarray(out.transpose(0, 2, 1)), group)


def epn_conv(
    X: PointCloud,
    Fin: EquivariantFeature,
    k: KernelSpec,
    r_neigh: float,
    jobs: int = 1,
) -> EquivariantFeature:
    _check_inputs(X, Fin, k, r_neigh)
    pts = X.points
    G = Fin.group.order
    neighbourhoods = NeighborIndex(pts, workers=jobs).radius(pts, r_neigh)

    def point_block(i: int) -> np.ndarray:
        nbrs = np.asarray(neighbourhoods[i], dtype=np.int64)
        disp = pts[i] - pts[nbrs]
        feat_idx = np.broadcast_to(np.arange(G), (nbrs.size, G))
        return _aggregate(Fin, k, nbrs, disp, feat_idx)

    return _finish(map_ordered(point_block, range(len(X)), jobs), k, Fin.group)


def pose_aware_conv(
    X: PointCloud,
    Fin: EquivariantFeature,
    P: PerPointPose,
    k: KernelSpec,
    r_neigh: float,
    jobs: int = 1,
) -> EquivariantFeature:
    _check_inputs(X, Fin, k, r_neigh)
    if len(P) != len(X):
        raise PoseMissing("every point needs a pose", details={"points": len(X), "poses": len(P)})
    pts = X.points
    group = Fin.group
    canonical = P.canonical(pts)
    neighbourhoods = NeighborIndex(canonical, workers=jobs).radius(canonical, r_neigh)

    def point_block(i: int) -> np.ndarray:
        nbrs = np.asarray(neighbourhoods[i], dtype=np.int64)
        Ri, ti = P.rotations[i], P.translations[i]
        Rj, tj = P.rotations[nbrs], P.translations[nbrs]
        R_rel = np.einsum("ab,ncb->nac", Ri, Rj)  # R_i R_j^T
        t_rel = ti - np.einsum("nab,nb->na", R_rel, tj)
        mapped = np.einsum("nab,nb->na", R_rel, pts[nbrs]) + t_rel
        disp = pts[i] - mapped
        q = quantize_many(group, R_rel)
        feat_idx = group.cayley[:, q].T  # index of g * q_ij
        return _aggregate(Fin, k, nbrs, disp, feat_idx)

    return _finish(map_ordered(point_block, range(len(X)), jobs), k, group)


@dataclass
class ConvStack:
    """Stacked convolution blocks with a pointwise ReLU between them."""

    kernels: list[KernelSpec]
    radius: float

    @classmethod
    def build(
        cls,
        c_in: int,
        widths: tuple[int, ...],
        radius: float,
        seed: int = 0,
        dtype=np.float64,
        num_points: int = 15,
    ) -> ConvStack:
        kernels = []
        width_in = c_in
        for layer, width in enumerate(widths):
            kernels.append(make_kernel(width_in, width, radius, seed=seed + layer, dtype=dtype, num_points=num_points))
            width_in = width
        return cls(kernels=kernels, radius=radius)

    def __call__(
        self,
        X: PointCloud,
        Fin: EquivariantFeature,
        poses: PerPointPose | None = None,
        jobs: int = 1,
    ) -> EquivariantFeature:
        F = Fin
        for layer, k in enumerate(self.kernels):
            if poses is None:
                F = epn_conv(X, F, k, self.radius, jobs=jobs)
            else:
                F = pose_aware_conv(X, F, poses, k, self.radius, jobs=jobs)
            if layer < len(self.kernels) - 1:
                F = EquivariantFeature(np.maximum(F.values, 0.0), F.group)
        return F


def pool_invariant(F: EquivariantFeature, mode: PoolMode = "max") -> np.ndarray:
    values = F.values
    if mode == "max":
        return values.max(axis=-1)
    if mode == "attention":
        mean = values.mean(axis=-1, keepdims=True)
        scores = (values * mean).sum(axis=1)  # (N, G)
        scores = scores - scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        return np.einsum("ncg,ng->nc", values, weights)
    raise ValueError(f"unknown pooling mode: {mode}")


@dataclass
class PartLevelReport:
    max_invariance_violation: float
    max_equivariance_violation: float
    tol: float
    trials: int
    feed: str = "tracked"
    invariance_by_trial: list[float] = field(default_factory=list)
    equivariance_by_trial: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_invariance_violation <= self.tol and self.max_equivariance_violation <= self.tol


def _about_center(R: np.ndarray, center: np.ndarray, shift: np.ndarray) -> RigidTransform:
    return RigidTransform(R, center - R @ center + shift)


def _noisy(poses: list[RigidTransform], rng: np.random.Generator, noise_deg: float, noise_trans: float) -> list[RigidTransform]:
    if noise_deg <= 0 and noise_trans <= 0:
        return poses
    out = []
    for pose in poses:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        jitter = RigidTransform(rodrigues(axis, math.radians(noise_deg)), rng.normal(0.0, noise_trans, size=3))
        out.append(compose(jitter, pose))
    return out


def verify_part_level(
    X: PointCloud,
    P_gt: list[RigidTransform],
    trials: int,
    tol: float,
    group: RotationGroup,
    kernel: KernelSpec | None = None,
    r_neigh: float = 0.4,
    seed: int = 0,
    feed: PoseFeed = "tracked",
    pose_noise: tuple[float, float] = (0.0, 0.0),
    motion_deg: float | None = None,
    identity_motion: bool = False,
    jobs: int = 1,
) -> PartLevelReport:
    """Numerically check part-level invariance and equivariance of pose_aware_conv.

    Invariance: one part moves by a rigid transform and the features of every
    other part must stay put. Equivariance: one part moves by a rotation in G
    (plus any translation) and its own features must permute accordingly.
    `feed` selects whether the poses handed to the convolution track the motion
    or stay at identity; `pose_noise` (degrees, scene units) is redrawn per
    evaluation.
    """
    labels = X.labels
    if labels is None:
        raise MissingLabels("part-level verification needs a labelled cloud")
    K = X.num_parts
    if len(P_gt) != K:
        raise PoseMissing("one pose per part is required", details={"parts": K, "poses": len(P_gt)})

    rng = np.random.default_rng(seed)
    kernel = kernel or make_kernel(4, 8, r_neigh, seed=seed)
    Fin = invariant_input(len(X), kernel.c_in, group, seed=seed)
    scale = 0.1 * X.diameter
    noise_deg, noise_trans = pose_noise

    def run(points: np.ndarray, poses: list[RigidTransform]) -> np.ndarray:
        if feed == "identity":
            poses = [RigidTransform.identity()] * K
        poses = _noisy(poses, rng, noise_deg, noise_trans)
        cloud = PointCloud(points, labels)
        return pose_aware_conv(cloud, Fin, PerPointPose.from_parts(labels, poses), kernel, r_neigh, jobs=jobs).values

    noisy = noise_deg > 0 or noise_trans > 0
    fixed_base = None if noisy else run(X.points, P_gt)

    inv_by_trial: list[float] = []
    eqv_by_trial: list[float] = []
    for trial in range(trials):
        moving = trial % K
        mask = labels == moving
        center = bbox_center(X.points[mask])

        if identity_motion:
            dP = RigidTransform.identity()
        elif motion_deg is not None:
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            dP = _about_center(rodrigues(axis, math.radians(motion_deg)), center, np.zeros(3))
        else:
            dP = _about_center(random_transform(rng).rotation, center, rng.uniform(-scale, scale, size=3))

        base = fixed_base if fixed_base is not None else run(X.points, P_gt)
        moved_pts = X.points.copy()
        moved_pts[mask] = dP.apply(X.points[mask])
        moved_poses = [compose(dP, p) if k == moving else p for k, p in enumerate(P_gt)]
        moved = run(moved_pts, moved_poses)
        others = ~mask
        inv = float(np.abs(moved[others] - base[others]).max()) if others.any() else 0.0
        inv_by_trial.append(inv)

        a = 0 if identity_motion else int(rng.integers(group.order))
        shift = np.zeros(3) if identity_motion else rng.uniform(-scale, scale, size=3)
        dG = _about_center(group.matrices[a], center, shift)
        rot_pts = X.points.copy()
        rot_pts[mask] = dG.apply(X.points[mask])
        rot_poses = [compose(dG, p) if k == moving else p for k, p in enumerate(P_gt)]
        rotated = run(rot_pts, rot_poses)
        expected = act_on_feature_axis(group, a, EquivariantFeature(base, group)).values
        eqv_by_trial.append(float(np.abs(rotated[mask] - expected[mask]).max()))

    report = PartLevelReport(
        max_invariance_violation=max(inv_by_trial, default=0.0),
        max_equivariance_violation=max(eqv_by_trial, default=0.0),
        tol=tol,
        trials=trials,
        feed=feed,
        invariance_by_trial=inv_by_trial,
        equivariance_by_trial=eqv_by_trial,
    )
    logger.info(
        "part-level check feed=%s trials=%d invariance=%.3g equivariance=%.3g passed=%s",
        feed,
        trials,
        report.max_invariance_violation,
        report.max_equivariance_violation,
        report.passed,
    )
    return report
