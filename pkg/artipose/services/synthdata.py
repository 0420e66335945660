"""Synthetic articulated shapes, posed samples and partial views.

Every template is a handful of axis-aligned boxes sampled on their surface
lattice. Small feature boxes (feet, bumps, handles) break the boxes' own
rotational symmetries; `symmetric=True` drops them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from artipose.cloud import PointCloud, bbox_center
from artipose.errors import NoValidView
from artipose.kinematics import (
    ArticulatedModel,
    ArticulatedPose,
    Joint,
    JointKind,
    build_tree,
    forward,
)
from artipose.se3 import RigidTransform
from artipose.worker.pool import map_ordered

logger = logging.getLogger("artipose.services.synthdata")

MIN_POINTS_PER_PART = 128
MAX_STEP_REFINES = 20
STEP_REFINE_FACTOR = 0.8
MIN_VISIBLE_FRACTION = 0.10
PRESETS = {"full": (100, 10), "desk": (10, 3)}


@dataclass(frozen=True)
class BoxSpec:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def scaled(self, s: float) -> BoxSpec:
        return BoxSpec(tuple(v * s for v in self.lo), tuple(v * s for v in self.hi))

    def surface(self, step: float) -> np.ndarray:
        lo, hi = np.array(self.lo), np.array(self.hi)
        grids = [np.linspace(lo[k], hi[k], max(3, int(math.ceil((hi[k] - lo[k]) / step)) + 1)) for k in range(3)]
        faces = []
        for axis in range(3):
            a, b = [k for k in range(3) if k != axis]
            ga, gb = np.meshgrid(grids[a], grids[b], indexing="ij")
            for value in (lo[axis], hi[axis]):
                face = np.empty((ga.size, 3))
                face[:, axis] = value
                face[:, a] = ga.ravel()
                face[:, b] = gb.ravel()
                faces.append(face)
        return np.concatenate(faces)


@dataclass(frozen=True)
class PartSpec:
    name: str
    boxes: tuple[BoxSpec, ...]
    features: tuple[BoxSpec, ...] = ()


@dataclass(frozen=True)
class JointSpec:
    parent: int
    child: int
    kind: JointKind
    axis: tuple[float, float, float]
    pivot: tuple[float, float, float] | None
    limits: tuple[float, float]


@dataclass(frozen=True)
class ShapeTemplate:
    kind: str
    parts: tuple[PartSpec, ...]
    joints: tuple[JointSpec, ...]
    root: int
    front: tuple[float, float, float]
    step: float = 0.025
    symmetric: bool = False

    def _boxes(self, part: PartSpec) -> tuple[BoxSpec, ...]:
        return part.boxes if self.symmetric else part.boxes + part.features

    def scale(self) -> float:
        corners = np.array([c for p in self.parts for b in self._boxes(p) for c in (b.lo, b.hi)])
        return 1.0 / float(np.linalg.norm(corners.max(axis=0) - corners.min(axis=0)))

    def _part_points(self, spec: PartSpec, s: float) -> np.ndarray:
        """Surface lattice of one part; the step shrinks until the part has enough points."""
        step = self.step
        for _ in range(MAX_STEP_REFINES):
            pts = np.concatenate([b.scaled(s).surface(step) for b in self._boxes(spec)])
            pts = np.unique(np.round(pts, 12), axis=0)
            if pts.shape[0] >= MIN_POINTS_PER_PART:
                if step != self.step:
                    logger.debug("lattice step refined part=%s step=%.4g points=%d", spec.name, step, pts.shape[0])
                return pts
            step *= STEP_REFINE_FACTOR
        raise ValueError(f"part {spec.name} has too few points ({pts.shape[0]})")

    def model(self) -> ArticulatedModel:
        s = self.scale()
        parts, assembly = [], []
        for spec in self.parts:
            pts = self._part_points(spec, s)
            center = bbox_center(pts)
            parts.append(PointCloud(pts - center))
            assembly.append(center)

        joints = []
        for j in self.joints:
            pivot = None if j.pivot is None else np.asarray(j.pivot) * s
            joints.append(Joint(j.kind, np.asarray(j.axis, dtype=np.float64), pivot, j.parent, j.child, j.limits))
        tree = build_tree(len(parts), [(j.parent, j.child) for j in self.joints], self.root)
        return ArticulatedModel(parts=parts, assembly=np.stack(assembly), tree=tree, joints=joints)

    @property
    def front_direction(self) -> np.ndarray:
        d = np.asarray(self.front, dtype=np.float64)
        return d / np.linalg.norm(d)


def _laptop() -> tuple[tuple[PartSpec, ...], tuple[JointSpec, ...], int, tuple]:
    base = PartSpec(
        "base",
        (BoxSpec((-0.5, 0.0, -0.35), (0.5, 0.05, 0.35)),),
        (BoxSpec((0.25, -0.03, 0.15), (0.45, 0.0, 0.3)),),
    )
    lid = PartSpec(
        "lid",
        (BoxSpec((-0.5, 0.06, -0.35), (0.5, 0.1, 0.35)),),
        (BoxSpec((-0.45, 0.1, 0.15), (-0.25, 0.13, 0.3)),),
    )
    hinge = JointSpec(0, 1, JointKind.revolute, (-1.0, 0.0, 0.0), (0.0, 0.055, -0.35), (math.radians(9), math.radians(99)))
    return (base, lid), (hinge,), 0, (0.0, 0.6, 0.8)


def _oven_lid() -> tuple:
    body = PartSpec(
        "body",
        (BoxSpec((-0.5, 0.0, -0.5), (0.5, 0.8, 0.3)),),
        (BoxSpec((0.3, 0.66, 0.3), (0.42, 0.74, 0.36)),),
    )
    door = PartSpec(
        "door",
        (BoxSpec((-0.45, 0.0, 0.31), (0.45, 0.6, 0.36)),),
        (BoxSpec((-0.35, 0.5, 0.36), (0.05, 0.54, 0.4)),),
    )
    hinge = JointSpec(0, 1, JointKind.revolute, (1.0, 0.0, 0.0), (0.0, 0.0, 0.31), (math.radians(45), math.radians(135)))
    return (body, door), (hinge,), 0, (0.0, 0.4, 1.0)


def _eyeglasses() -> tuple:
    frame = PartSpec(
        "frame",
        (BoxSpec((-0.5, -0.15, 0.0), (0.5, 0.15, 0.03)),),
        (BoxSpec((-0.05, -0.15, -0.04), (0.05, -0.05, 0.0)),),
    )
    right = PartSpec(
        "right_leg",
        (BoxSpec((0.47, -0.02, -0.8), (0.5, 0.02, -0.01)),),
        (BoxSpec((0.47, -0.08, -0.8), (0.5, -0.02, -0.74)),),
    )
    left = PartSpec(
        "left_leg",
        (BoxSpec((-0.5, -0.02, -0.8), (-0.47, 0.02, -0.01)),),
        (BoxSpec((-0.5, -0.08, -0.8), (-0.47, -0.02, -0.74)),),
    )
    limits = (0.0, math.radians(81))
    joints = (
        JointSpec(0, 1, JointKind.revolute, (0.0, -1.0, 0.0), (0.485, 0.0, -0.005), limits),
        JointSpec(0, 2, JointKind.revolute, (0.0, 1.0, 0.0), (-0.485, 0.0, -0.005), limits),
    )
    return (frame, right, left), joints, 0, (0.0, 0.7, 0.7)


def _drawer() -> tuple:
    cabinet = PartSpec(
        "cabinet",
        (BoxSpec((-0.5, 0.0, -0.5), (0.5, 0.7, 0.3)),),
        (BoxSpec((0.2, 0.7, -0.3), (0.4, 0.75, -0.1)),),
    )
    drawer = PartSpec(
        "drawer",
        (BoxSpec((-0.4, 0.2, 0.31), (0.4, 0.5, 0.41)),),
        (BoxSpec((-0.3, 0.3, 0.41), (0.0, 0.34, 0.45)),),
    )
    slide = JointSpec(0, 1, JointKind.prismatic, (0.0, 0.0, 1.0), None, (0.0, 0.3))
    return (cabinet, drawer), (slide,), 0, (0.3, 0.4, 1.0)


TEMPLATES = {
    "laptop": _laptop,
    "oven_lid": _oven_lid,
    "eyeglasses": _eyeglasses,
    "drawer": _drawer,
}


def make_template(kind: str, symmetric: bool = False, step: float = 0.025) -> ShapeTemplate:
    try:
        parts, joints, root, front = TEMPLATES[kind]()
    except KeyError:
        raise ValueError(f"unknown template kind: {kind}") from None
    return ShapeTemplate(kind=kind, parts=parts, joints=joints, root=root, front=front, step=step, symmetric=symmetric)


@dataclass(frozen=True)
class ViewSpec:
    direction: tuple[float, float, float]  # points from the object toward the camera
    resolution: int = 32
    cone_deg: float = 40.0
    max_attempts: int = 100

    def __post_init__(self):
        if self.resolution < 32:
            raise ValueError("render resolution must be at least 32")


@dataclass(frozen=True, eq=False)
class Sample:
    cloud: PointCloud
    gt_pose: ArticulatedPose
    model: ArticulatedModel
    state_index: int = 0
    rot_index: int = 0
    view: np.ndarray | None = None
    visible: np.ndarray | None = None
    transforms: list[RigidTransform] = field(default_factory=list)


def _sample(model: ArticulatedModel, seed: int, state_index: int, rot_index: int, states: dict[int, float]) -> Sample:
    rng = np.random.default_rng((seed, state_index, rot_index))
    base = RigidTransform(Rotation.random(random_state=rng).as_matrix(), np.zeros(3))
    pose = ArticulatedPose(base=base, joint_states=dict(states))
    transforms, cloud = forward(model, pose)
    return Sample(cloud=cloud, gt_pose=pose, model=model, state_index=state_index, rot_index=rot_index, transforms=transforms)


def sample_states(model: ArticulatedModel, seed: int, state_index: int) -> dict[int, float]:
    rng = np.random.default_rng((seed, state_index))
    return {j.child: float(rng.uniform(*j.limits)) for j in model.ordered_joints()}


def generate(
    template: ShapeTemplate,
    n_states: int,
    n_rots: int,
    seed: int = 0,
    jobs: int = 1,
) -> list[Sample]:
    if n_states < 1 or n_rots < 1:
        raise ValueError("n_states and n_rots must be at least 1")
    model = template.model()
    jobs_list = [(s, r) for s in range(n_states) for r in range(n_rots)]
    states = [sample_states(model, seed, s) for s in range(n_states)]
    samples = map_ordered(lambda sr: _sample(model, seed, sr[0], sr[1], states[sr[0]]), jobs_list, jobs)
    logger.info("generated samples kind=%s states=%d rots=%d seed=%d", template.kind, n_states, n_rots, seed)
    return samples


def _basis(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(direction[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(direction, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(direction, e1)


def visibility_mask(points: np.ndarray, direction, resolution: int) -> np.ndarray:
    """Orthographic z-buffer: the front-most point per pixel survives (ties to the lowest index)."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    e1, e2 = _basis(d)
    u, v, depth = points @ e1, points @ e2, points @ d
    lo = np.array([u.min(), v.min()])
    span = max(float(u.max() - lo[0]), float(v.max() - lo[1]), 1e-12)
    px = np.clip(((u - lo[0]) / span * resolution).astype(np.int64), 0, resolution - 1)
    py = np.clip(((v - lo[1]) / span * resolution).astype(np.int64), 0, resolution - 1)
    pixel = px * resolution + py

    index = np.arange(points.shape[0])
    order = np.lexsort((index, -depth, pixel))
    _, first = np.unique(pixel[order], return_index=True)
    mask = np.zeros(points.shape[0], dtype=bool)
    mask[order[first]] = True
    return mask


def _within_cone(rng: np.random.Generator, axis: np.ndarray, cone_deg: float) -> np.ndarray:
    cos_max = math.cos(math.radians(cone_deg))
    z = rng.uniform(cos_max, 1.0)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    r = math.sqrt(max(0.0, 1.0 - z * z))
    e1, e2 = _basis(axis)
    return z * axis + r * (math.cos(phi) * e1 + math.sin(phi) * e2)


def render_partial(sample: Sample, view: ViewSpec, seed: int = 0) -> Sample:
    labels = sample.cloud.require_labels()
    K = sample.cloud.num_parts
    counts = np.bincount(labels, minlength=K)
    nominal = np.asarray(view.direction, dtype=np.float64)
    nominal = nominal / np.linalg.norm(nominal)
    rng = np.random.default_rng((seed, sample.state_index, sample.rot_index))

    direction = nominal
    for attempt in range(view.max_attempts):
        if attempt > 0:
            direction = _within_cone(rng, nominal, view.cone_deg)
        mask = visibility_mask(sample.cloud.points, direction, view.resolution)
        kept = np.bincount(labels[mask], minlength=K)
        if np.all(kept >= MIN_VISIBLE_FRACTION * counts):
            visible = np.flatnonzero(mask)
            return replace(sample, cloud=sample.cloud.subset(visible), view=direction, visible=visible)
        logger.debug("view rejected attempt=%d kept=%s", attempt, kept.tolist())

    logger.warning("no valid view state=%d rot=%d attempts=%d", sample.state_index, sample.rot_index, view.max_attempts)
    raise NoValidView("every part must keep at least 10% of its points", details={"attempts": view.max_attempts})


def camera_view(template: ShapeTemplate, sample: Sample, resolution: int = 32, cone_deg: float = 40.0) -> ViewSpec:
    """The template's front direction carried into the sample's camera frame."""
    direction = sample.gt_pose.base.rotation @ template.front_direction
    return ViewSpec(direction=tuple(direction), resolution=resolution, cone_deg=cone_deg)


def add_noise(sample: Sample, sigma: float, seed: int = 0) -> Sample:
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return sample
    rng = np.random.default_rng((seed, sample.state_index, sample.rot_index, 2))
    noisy = sample.cloud.points + rng.normal(0.0, sigma, size=sample.cloud.points.shape)
    return replace(sample, cloud=PointCloud(noisy, sample.cloud.labels))
