"""Articulated object model.

A part's camera-space pose factors as P_i = base ∘ A_i ∘ T(p_i^c): the
canonical part is first placed by its assembly translation, then articulated
by the joints on its path from the root, then rotated into the camera.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from artipose.cloud import PointCloud
from artipose.errors import DegenerateMotion, MissingJointState, TooFewParts
from artipose.se3 import (
    RigidTransform,
    compose,
    invert,
    log_so3,
    rotation_about_line,
    translation_about_line,
    unit_axis,
)

logger = logging.getLogger("artipose.kinematics")

MIN_REVOLUTE_DEG = 1.0
MIN_PRISMATIC = 1e-9
TAU_RATIO = 0.1


class JointKind(str, enum.Enum):
    revolute = "revolute"
    prismatic = "prismatic"


@dataclass(frozen=True)
class Edge:
    parent: int
    child: int


@dataclass(frozen=True)
class KinematicTree:
    num_parts: int
    edges: tuple[Edge, ...]
    root: int
    order: tuple[int, ...]  # children before ancestors; root last

    def parent_of(self, node: int) -> int | None:
        for e in self.edges:
            if e.child == node:
                return e.parent
        return None

    def children(self, node: int) -> list[int]:
        return sorted(e.child for e in self.edges if e.parent == node)

    def path_to(self, node: int) -> list[Edge]:
        """Edges from the root down to node."""
        path = []
        while node != self.root:
            parent = self.parent_of(node)
            path.append(Edge(parent, node))
            node = parent
        return path[::-1]

    def subtree(self, node: int) -> list[int]:
        out = [node]
        for c in self.children(node):
            out.extend(self.subtree(c))
        return out


def build_tree(num_parts: int, pairs, root: int) -> KinematicTree:
    """Orient undirected pairs away from root and derive the transformation order."""
    adjacency: dict[int, list[int]] = {k: [] for k in range(num_parts)}
    for a, b in pairs:
        adjacency[a].append(b)
        adjacency[b].append(a)

    visit: list[int] = []
    edges: list[Edge] = []
    seen = {root}
    stack = [root]
    while stack:
        node = stack.pop()
        visit.append(node)
        for child in sorted(adjacency[node], reverse=True):
            if child not in seen:
                seen.add(child)
                edges.append(Edge(node, child))
                stack.append(child)
    if len(visit) != num_parts:
        raise TooFewParts("edges do not span every part", details={"parts": num_parts, "reached": len(visit)})
    edges.sort(key=lambda e: (e.parent, e.child))
    return KinematicTree(num_parts=num_parts, edges=tuple(edges), root=root, order=tuple(reversed(visit)))


@dataclass(frozen=True, eq=False)
class Joint:
    kind: JointKind
    axis: np.ndarray
    pivot: np.ndarray | None
    parent: int
    child: int
    limits: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", JointKind(self.kind))
        object.__setattr__(self, "axis", unit_axis(self.axis))
        if self.kind == JointKind.revolute:
            if self.pivot is None:
                raise ValueError("revolute joints need a pivot")
            pivot = np.asarray(self.pivot, dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(pivot)):
                raise ValueError("joint pivot must be finite")
            object.__setattr__(self, "pivot", pivot)
        elif self.pivot is not None:
            object.__setattr__(self, "pivot", np.asarray(self.pivot, dtype=np.float64).reshape(3))

    def motion(self, value: float) -> RigidTransform:
        if self.kind == JointKind.revolute:
            return rotation_about_line(self.axis, self.pivot, value)
        return translation_about_line(self.axis, value)

    def midpoint(self) -> float:
        lo, hi = self.limits if self.limits is not None else default_limits(self.kind)
        return 0.5 * (lo + hi)


def default_limits(kind: JointKind) -> tuple[float, float]:
    if kind == JointKind.revolute:
        return (0.0, math.pi / 2.0)
    return (0.0, 0.3)


@dataclass(frozen=True, eq=False)
class ArticulatedModel:
    parts: list[PointCloud]
    assembly: np.ndarray  # (K, 3)
    tree: KinematicTree
    joints: list[Joint] = field(default_factory=list)

    def __post_init__(self):
        K = len(self.parts)
        if K < 2:
            raise TooFewParts("an articulated model needs at least two parts", details={"parts": K})
        assembly = np.asarray(self.assembly, dtype=np.float64).reshape(K, 3)
        object.__setattr__(self, "assembly", assembly)
        if self.tree.num_parts != K:
            raise ValueError("kinematic tree does not match the part count")
        by_child = {j.child: j for j in self.joints}
        for e in self.tree.edges:
            j = by_child.get(e.child)
            if j is None or j.parent != e.parent:
                raise ValueError(f"no joint for tree edge {e.parent}->{e.child}")

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def joint_for(self, child: int) -> Joint:
        for j in self.joints:
            if j.child == child:
                return j
        raise KeyError(child)

    def ordered_joints(self) -> list[Joint]:
        """Joints listed root-first (reverse transformation order)."""
        return [self.joint_for(k) for k in reversed(self.tree.order) if k != self.tree.root]

    def assembled(self) -> PointCloud:
        return PointCloud.concat(
            [PointCloud(z.points + self.assembly[k]) for k, z in enumerate(self.parts)],
        )

    @cached_property
    def diameter(self) -> float:
        return self.assembled().diameter

    def with_joints(self, joints: list[Joint]) -> ArticulatedModel:
        return replace(self, joints=list(joints))


@dataclass(frozen=True, eq=False)
class ArticulatedPose:
    base: RigidTransform
    joint_states: dict[int, float]

    def state(self, child: int) -> float:
        try:
            return float(self.joint_states[child])
        except KeyError:
            raise MissingJointState("no state for articulated part", details={"part": child}) from None


def articulations(model: ArticulatedModel, states: dict[int, float]) -> list[RigidTransform]:
    """A_i for every part, in canonical object space (root fixed)."""
    A: list[RigidTransform | None] = [None] * model.num_parts
    A[model.tree.root] = RigidTransform.identity()
    for node in reversed(model.tree.order):
        if node == model.tree.root:
            continue
        joint = model.joint_for(node)
        if node not in states:
            raise MissingJointState("no state for articulated part", details={"part": node})
        A[node] = compose(A[joint.parent], joint.motion(float(states[node])))
    return A


def part_transforms(model: ArticulatedModel, pose: ArticulatedPose) -> list[RigidTransform]:
    A = articulations(model, pose.joint_states)
    return [
        compose(pose.base, compose(A[k], RigidTransform.pure_translation(model.assembly[k])))
        for k in range(model.num_parts)
    ]


def forward(model: ArticulatedModel, pose: ArticulatedPose) -> tuple[list[RigidTransform], PointCloud]:
    transforms = part_transforms(model, pose)
    posed = PointCloud.concat([PointCloud(P.apply(z.points)) for P, z in zip(transforms, model.parts)])
    return transforms, posed


def within_limits(model: ArticulatedModel, pose: ArticulatedPose) -> bool:
    for j in model.joints:
        if j.limits is None:
            continue
        lo, hi = j.limits
        if not lo <= pose.state(j.child) < hi:
            return False
    return True


def articulate_joint(joint: Joint, A_parent: RigidTransform) -> Joint:
    """The joint line carried along by its parent's articulation."""
    axis = A_parent.rotation @ joint.axis
    pivot = None if joint.pivot is None else A_parent.apply(joint.pivot)
    return replace(joint, axis=axis, pivot=pivot)


def joints_in_camera(model: ArticulatedModel, pose: ArticulatedPose) -> list[Joint]:
    A = articulations(model, pose.joint_states)
    out = []
    for j in model.joints:
        moved = articulate_joint(j, compose(pose.base, A[j.parent]))
        out.append(moved)
    return out


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        if self.parent[x] != x:
            self.parent[x] = self.find(self.parent[x])
        return self.parent[x]

    def union(self, x: int, y: int) -> bool:
        root_x, root_y = self.find(x), self.find(y)
        if root_x == root_y:
            return False
        if self.rank[root_x] < self.rank[root_y]:
            self.parent[root_x] = root_y
        elif self.rank[root_x] > self.rank[root_y]:
            self.parent[root_y] = root_x
        else:
            self.parent[root_y] = root_x
            self.rank[root_x] += 1
        return True


def maximum_spanning_tree(weights: np.ndarray) -> list[tuple[int, int]]:
    """Kruskal on descending weight; ties broken by (i, j)."""
    n = weights.shape[0]
    edges = sorted(
        ((i, j) for i in range(n) for j in range(i + 1, n)),
        key=lambda e: (-weights[e[0], e[1]], e[0], e[1]),
    )
    uf = UnionFind(n)
    tree = [e for e in edges if uf.union(*e)]
    return sorted(tree)


def adjacency_confidence(parts: list[PointCloud], tau: float | None = None) -> np.ndarray:
    K = len(parts)
    if tau is None:
        tau = TAU_RATIO * PointCloud.concat(parts, label_each=False).diameter
    trees = [cKDTree(p.points) for p in parts]
    conf = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            d_min = float(trees[j].query(parts[i].points, k=1)[0].min())
            conf[i, j] = conf[j, i] = math.exp(-d_min / tau)
    return conf


def infer_chain(parts: list[PointCloud], tau: float | None = None) -> KinematicTree:
    """Spanning-tree topology from inter-part proximity; joints are not estimated here."""
    K = len(parts)
    if K < 2:
        raise TooFewParts("chain inference needs at least two parts", details={"parts": K})
    conf = adjacency_confidence(parts, tau)
    pairs = maximum_spanning_tree(conf)
    degree = np.zeros(K, dtype=np.int64)
    for a, b in pairs:
        degree[a] += 1
        degree[b] += 1
    root = int(np.argmax(degree))  # first maximum is the lowest index
    tree = build_tree(K, pairs, root)
    logger.debug("chain inferred parts=%d root=%d order=%s", K, root, list(tree.order))
    return tree


def estimate_joint_from_motion(
    part_pose_a: RigidTransform,
    part_pose_b: RigidTransform,
    kind: JointKind | str,
    min_angle_deg: float = MIN_REVOLUTE_DEG,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Joint axis (and pivot for revolute joints) explaining the motion from pose a to pose b."""
    kind = JointKind(kind)
    delta = compose(part_pose_b, invert(part_pose_a))
    if kind == JointKind.revolute:
        rotvec = log_so3(delta.rotation)
        angle = float(np.linalg.norm(rotvec))
        if math.degrees(angle) < min_angle_deg:
            raise DegenerateMotion("relative rotation too small", details={"angle_deg": math.degrees(angle)})
        axis = rotvec / angle
        pivot = np.linalg.lstsq(np.eye(3) - delta.rotation, delta.translation, rcond=None)[0]
        return axis, pivot

    shift = float(np.linalg.norm(delta.translation))
    if shift < MIN_PRISMATIC:
        raise DegenerateMotion("relative translation too small", details={"distance": shift})
    return delta.translation / shift, None


def unify_axes(joints: list[Joint]) -> list[Joint]:
    """Give every joint the same (sign-aligned, averaged) axis direction."""
    if not joints:
        return []
    ref = joints[0].axis
    total = np.zeros(3)
    for j in joints:
        total += j.axis if j.axis @ ref >= 0 else -j.axis
    axis = total / np.linalg.norm(total)
    return [replace(j, axis=axis if j.axis @ axis >= 0 else -axis) for j in joints]
