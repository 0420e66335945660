"""Reconstruction and joint-regularizer objectives with analytic pose gradients.

Gradients are taken of a frozen-correspondence surrogate: nearest-neighbour
pairs are fixed at the current pose and every pair contributes w * |a - b|^2.
At the freeze point the surrogate equals the true objective, so descending it
and then re-freezing never increases the true objective.

Parameter vector layout (see ParamLayout):
    [0:3]   left so(3) increment of the base rotation
    [3:6]   base translation
    [6:6+J] joint states, joints listed root-first
    [...]   assembly translations, 3 per part
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from artipose.cloud import ChamferMode, PointCloud, chamfer, nearest
from artipose.config import settings
from artipose.errors import LengthMismatch, NotRevolute
from artipose.kinematics import (
    ArticulatedModel,
    ArticulatedPose,
    Joint,
    JointKind,
    articulations,
    forward,
)
from artipose.se3 import RigidTransform, exp_so3, invert, skew
from artipose.worker.pool import map_ordered

logger = logging.getLogger("artipose.losses")


@dataclass(frozen=True)
class LossReport:
    per_g_loss: tuple[float, ...]
    g0: int
    L_rec: float
    L_reg: float
    total: float
    lam: float

    def with_regularizer(self, L_reg: float) -> LossReport:
        return replace(self, L_reg=float(L_reg), total=self.L_rec + self.lam * float(L_reg))


def rec_loss(
    X: PointCloud,
    model: ArticulatedModel,
    hyps: list[ArticulatedPose],
    d_mode: ChamferMode = "bi",
    lam: float = 1.0,
    jobs: int = 1,
) -> LossReport:
    """Min-of-N reconstruction loss over one hypothesis per group element."""
    if not hyps:
        raise LengthMismatch("at least one hypothesis is required")

    def score(pose: ArticulatedPose) -> float:
        _, Y = forward(model, pose)
        return chamfer(X, Y, mode=d_mode, norm="L2sq")

    per_g = map_ordered(score, hyps, jobs)
    g0 = int(np.argmin(per_g))  # first minimum wins ties
    L_rec = float(per_g[g0])
    logger.debug("min-of-N scored hypotheses=%d g0=%d L_rec=%.6g", len(per_g), g0, L_rec)
    return LossReport(per_g_loss=tuple(float(v) for v in per_g), g0=g0, L_rec=L_rec, L_reg=0.0, total=L_rec, lam=lam)


def joint_points(joint: Joint, K_v: int, half_len: float) -> PointCloud:
    if joint.kind != JointKind.revolute:
        raise NotRevolute("joint points are defined for revolute joints only", details={"child": joint.child})
    if K_v < 1:
        raise ValueError("K_v must be at least 1")
    offsets = np.linspace(-half_len, half_len, K_v) if K_v > 1 else np.zeros(1)
    return PointCloud(joint.pivot + offsets[:, None] * joint.axis)


def _uni_l2sq(src: np.ndarray, dst: np.ndarray) -> float:
    dist, _ = nearest(src, dst)
    return float(np.mean(dist * dist))


def reg_loss(model: ArticulatedModel, pose_g0: ArticulatedPose, K_v: int, half_len: float) -> float:
    """Joint-point distances to both parts of every revolute edge, at rest and articulated."""
    A = articulations(model, pose_g0.joint_states)
    total = 0.0
    for joint in model.joints:
        if joint.kind != JointKind.revolute:
            continue
        q = joint_points(joint, K_v, half_len).points
        q_moved = A[joint.parent].apply(q)
        for part in (joint.parent, joint.child):
            rest = model.parts[part].points + model.assembly[part]
            total += _uni_l2sq(q, rest)
            total += _uni_l2sq(q_moved, A[part].apply(rest))
    return total


@dataclass(frozen=True)
class ParamLayout:
    joint_children: tuple[int, ...]
    num_parts: int

    @classmethod
    def for_model(cls, model: ArticulatedModel) -> ParamLayout:
        return cls(tuple(j.child for j in model.ordered_joints()), model.num_parts)

    @property
    def size(self) -> int:
        return 6 + len(self.joint_children) + 3 * self.num_parts

    def joint_col(self, child: int) -> int:
        return 6 + self.joint_children.index(child)

    def assembly_cols(self, part: int) -> slice:
        start = 6 + len(self.joint_children) + 3 * part
        return slice(start, start + 3)


@dataclass(frozen=True, eq=False)
class RegPairs:
    joint_child: int
    part: int
    articulated: bool
    target: np.ndarray  # index into the part's points, one per joint point


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Nearest-neighbour pairs frozen at one pose."""

    forward: np.ndarray | None  # model point index for every observed point
    backward: np.ndarray | None  # observed point index for every model point
    reg: tuple[RegPairs, ...]
    lam: float
    K_v: int
    half_len: float


@dataclass
class PoseGradient:
    value: float
    vector: np.ndarray
    gauss_newton: np.ndarray
    layout: ParamLayout

    @property
    def rotation(self) -> np.ndarray:
        return self.vector[0:3]

    @property
    def translation(self) -> np.ndarray:
        return self.vector[3:6]

    @property
    def joint_states(self) -> dict[int, float]:
        return {c: float(self.vector[self.layout.joint_col(c)]) for c in self.layout.joint_children}

    @property
    def assembly(self) -> np.ndarray:
        return np.stack([self.vector[self.layout.assembly_cols(k)] for k in range(self.layout.num_parts)])


def default_half_len(model: ArticulatedModel, ratio: float) -> float:
    return ratio * model.diameter


def freeze(
    X: PointCloud,
    model: ArticulatedModel,
    pose: ArticulatedPose,
    d_mode: ChamferMode = "bi",
    lam: float = 1.0,
    K_v: int = 16,
    half_len: float | None = None,
) -> Correspondences:
    half_len = default_half_len(model, settings.JOINT_HALF_LEN_RATIO) if half_len is None else half_len
    _, Y = forward(model, pose)
    _, fwd = nearest(X.points, Y.points)
    bwd = nearest(Y.points, X.points)[1] if d_mode == "bi" else None

    reg: list[RegPairs] = []
    if lam != 0.0:
        A = articulations(model, pose.joint_states)
        for joint in model.joints:
            if joint.kind != JointKind.revolute:
                continue
            q = joint_points(joint, K_v, half_len).points
            q_moved = A[joint.parent].apply(q)
            for part in (joint.parent, joint.child):
                rest = model.parts[part].points + model.assembly[part]
                reg.append(RegPairs(joint.child, part, False, nearest(q, rest)[1]))
                reg.append(RegPairs(joint.child, part, True, nearest(q_moved, A[part].apply(rest))[1]))
    return Correspondences(
        forward=np.asarray(fwd, dtype=np.int64),
        backward=None if bwd is None else np.asarray(bwd, dtype=np.int64),
        reg=tuple(reg),
        lam=lam,
        K_v=K_v,
        half_len=half_len,
    )


def _jacobian(
    model: ArticulatedModel,
    layout: ParamLayout,
    A: list[RigidTransform],
    node: int,
    local: np.ndarray,
    assembly_part: int | None,
    base: RigidTransform | None,
    articulated: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Positions and d(position)/d(params) for points `local` carried by part `node`.

    local is expressed in canonical object space before articulation; it depends
    on the assembly of `assembly_part` when that is given.
    """
    n = local.shape[0]
    J = np.zeros((n, 3, layout.size))
    Rb = np.eye(3) if base is None else base.rotation
    if articulated:
        v = A[node].apply(local)
        R_node = A[node].rotation
    else:
        v = local
        R_node = np.eye(3)

    if base is not None:
        y = base.apply(v)
        J[:, :, 0:3] = -skew(v @ Rb.T)
        J[:, :, 3:6] = np.eye(3)
    else:
        y = v

    if articulated:
        for edge in model.tree.path_to(node):
            joint = model.joint_for(edge.child)
            col = layout.joint_col(edge.child)
            A_par = A[joint.parent]
            R = Rb @ A_par.rotation
            if joint.kind == JointKind.revolute:
                inner = invert(A_par).apply(v)
                J[:, :, col] = np.cross(joint.axis, inner - joint.pivot) @ R.T
            else:
                J[:, :, col] = R @ joint.axis

    if assembly_part is not None:
        J[:, :, layout.assembly_cols(assembly_part)] = Rb @ R_node
    return y, J


def _model_points(model, layout, pose, A) -> tuple[np.ndarray, np.ndarray]:
    ys, Js = [], []
    for k, part in enumerate(model.parts):
        y, J = _jacobian(model, layout, A, k, part.points + model.assembly[k], k, pose.base)
        ys.append(y)
        Js.append(J)
    return np.concatenate(ys), np.concatenate(Js)


def surrogate_grad(
    X: PointCloud,
    model: ArticulatedModel,
    pose: ArticulatedPose,
    corr: Correspondences,
    with_jacobian: bool = True,
) -> tuple[float, np.ndarray | None, np.ndarray | None]:
    """Value, gradient and Gauss-Newton matrix of the frozen-correspondence objective."""
    layout = ParamLayout.for_model(model)
    A = articulations(model, pose.joint_states)
    Y, JY = _model_points(model, layout, pose, A)
    x = X.points

    value = 0.0
    r = np.zeros_like(Y)  # d(value)/dy per model point
    c = np.zeros(Y.shape[0])  # summed 2w per model point
    if corr.forward is not None:
        w = 1.0 / x.shape[0]
        diff = Y[corr.forward] - x
        value += w * float(np.sum(diff * diff))
        np.add.at(r, corr.forward, 2.0 * w * diff)
        np.add.at(c, corr.forward, 2.0 * w)
    if corr.backward is not None:
        w = 1.0 / Y.shape[0]
        diff = Y - x[corr.backward]
        value += w * float(np.sum(diff * diff))
        r += 2.0 * w * diff
        c += 2.0 * w

    if not with_jacobian:
        grad = H = None
    else:
        grad = np.einsum("na,nad->d", r, JY)
        H = np.einsum("n,nad,nae->de", c, JY, JY)

    if corr.reg:
        w = corr.lam / corr.K_v
        for pairs in corr.reg:
            joint = model.joint_for(pairs.joint_child)
            q = joint_points(joint, corr.K_v, corr.half_len).points
            local = model.parts[pairs.part].points[pairs.target] + model.assembly[pairs.part]
            a, Ja = _jacobian(model, layout, A, pairs.part, local, pairs.part, None, pairs.articulated)
            b, Jb = _jacobian(model, layout, A, joint.parent, q, None, None, pairs.articulated)
            diff = a - b
            value += w * float(np.sum(diff * diff))
            if with_jacobian:
                Jd = Ja - Jb
                grad += 2.0 * w * np.einsum("na,nad->d", diff, Jd)
                H += 2.0 * w * np.einsum("nad,nae->de", Jd, Jd)

    return value, grad, H


def surrogate(X: PointCloud, model: ArticulatedModel, pose: ArticulatedPose, corr: Correspondences) -> float:
    return surrogate_grad(X, model, pose, corr, with_jacobian=False)[0]


def objective(
    X: PointCloud,
    model: ArticulatedModel,
    pose: ArticulatedPose,
    d_mode: ChamferMode = "bi",
    lam: float = 1.0,
    K_v: int = 16,
    half_len: float | None = None,
) -> float:
    """Chamfer(L2sq) reconstruction plus lam * regularizer at the current pose."""
    half_len = default_half_len(model, settings.JOINT_HALF_LEN_RATIO) if half_len is None else half_len
    _, Y = forward(model, pose)
    value = chamfer(X, Y, mode=d_mode, norm="L2sq")
    if lam != 0.0:
        value += lam * reg_loss(model, pose, K_v, half_len)
    return value


def grad_pose(
    X: PointCloud,
    model: ArticulatedModel,
    pose: ArticulatedPose,
    lam: float = 1.0,
    d_mode: ChamferMode = "bi",
    K_v: int = 16,
    half_len: float | None = None,
) -> PoseGradient:
    corr = freeze(X, model, pose, d_mode=d_mode, lam=lam, K_v=K_v, half_len=half_len)
    value, grad, H = surrogate_grad(X, model, pose, corr)
    return PoseGradient(value=value, vector=grad, gauss_newton=H, layout=ParamLayout.for_model(model))


def apply_step(
    model: ArticulatedModel,
    pose: ArticulatedPose,
    delta: np.ndarray,
) -> tuple[ArticulatedModel, ArticulatedPose]:
    """Move (model, pose) along a parameter-space step."""
    layout = ParamLayout.for_model(model)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (layout.size,):
        raise LengthMismatch("step does not match the parameter layout", details={"expected": layout.size})
    base = RigidTransform(exp_so3(delta[0:3]) @ pose.base.rotation, pose.base.translation + delta[3:6])
    states = dict(pose.joint_states)
    for child in layout.joint_children:
        states[child] = states[child] + float(delta[layout.joint_col(child)])
    new_model = model
    assembly_delta = np.stack([delta[layout.assembly_cols(k)] for k in range(model.num_parts)])
    if assembly_delta.any():
        new_model = replace(model, assembly=model.assembly + assembly_delta)
    return new_model, ArticulatedPose(base=base, joint_states=states)
