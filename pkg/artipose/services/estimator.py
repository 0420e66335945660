from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from artipose.cloud import NeighborIndex, PointCloud, chamfer, nearest
from artipose.config import settings
from artipose.equivconv import (
    ConvStack,
    EquivariantFeature,
    PerPointPose,
    invariant_input,
)
from artipose.kinematics import (
    ArticulatedModel,
    ArticulatedPose,
    JointKind,
    articulations,
    default_limits,
    forward,
    part_transforms,
)
from artipose.losses import (
    LossReport,
    ParamLayout,
    apply_step,
    default_half_len,
    freeze,
    objective,
    reg_loss,
    rec_loss,
    surrogate_grad,
)
from artipose.rotgroup import get_group
from artipose.se3 import RigidTransform, compose, exp_so3
from artipose.worker.pool import map_ordered

logger = logging.getLogger("artipose.services.estimator")

MAX_HALVINGS = 20
GRAD_TOL = 1e-10
FEEDBACK_INPUT_CHANNELS = 4
RESTART_SCALES = (1.0, 0.5, 1.5, 2.0)
_CUBE = np.array([d for d in itertools.product((-1, 0, 1), repeat=3) if any(d)], dtype=np.float64)
RESTART_DIRECTIONS = _CUBE / np.linalg.norm(_CUBE, axis=1, keepdims=True)


class EstimatorConfig(BaseModel):
    group: Literal["tetrahedral", "octahedral", "icosahedral"] = "octahedral"
    iterations: int = Field(50, ge=0)
    hypothesis_iterations: int = Field(10, ge=0)
    step_init: float = Field(1.0, gt=0)
    step_decay: float = Field(1.0, gt=0, le=1)
    revolute_grid: int = Field(12, ge=1)
    prismatic_grid: int = Field(8, ge=1)
    feedback_rounds: int = Field(0, ge=0)
    d_mode: Literal["uni", "bi"] = "bi"
    lam: float = Field(1.0, ge=0)
    top_k: int = Field(4, ge=1)
    restart_rounds: int = Field(4, ge=0)
    restart_tol: float = Field(1e-10, ge=0)
    seed: int = 0
    pre_align: bool = False
    base_translation: bool = False
    refine_assembly: bool = False
    k_v: int = Field(16, ge=1)
    half_len_ratio: float = Field(0.25, gt=0)
    jobs: int = Field(1, ge=1)

    @classmethod
    def from_settings(cls, **overrides) -> EstimatorConfig:
        values = {
            "group": settings.GROUP,
            "lam": settings.LAMBDA_REG,
            "k_v": settings.JOINT_SAMPLES,
            "half_len_ratio": settings.JOINT_HALF_LEN_RATIO,
            "seed": settings.SEED,
            "jobs": settings.JOBS,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class RefineTrace:
    pose: ArticulatedPose
    model: ArticulatedModel
    objectives: list[float] = field(default_factory=list)


@dataclass
class PoseEstimate:
    pose: ArticulatedPose
    per_part: list[RigidTransform]
    report: LossReport
    segmentation: np.ndarray
    g0: int
    model: ArticulatedModel
    hypotheses: list[ArticulatedPose]
    chamfer_l1: float
    objectives: list[float] = field(default_factory=list)

    def object_poses(self) -> list[RigidTransform]:
        """Per-part poses relative to canonical object space: base ∘ A_i."""
        A = articulations(self.model, self.pose.joint_states)
        return [compose(self.pose.base, a) for a in A]


def grid_values(lo: float, hi: float, n: int) -> np.ndarray:
    """Cell centres of an n-cell partition of [lo, hi); n = 1 gives the midpoint."""
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def _limits(joint) -> tuple[float, float]:
    return joint.limits if joint.limits is not None else default_limits(joint.kind)


def _initial_translation(X: PointCloud, model: ArticulatedModel, R: np.ndarray, cfg: EstimatorConfig) -> np.ndarray:
    if not cfg.base_translation:
        return np.zeros(3)
    return X.points.mean(axis=0) - R @ model.assembled().points.mean(axis=0)


def _mask(layout: ParamLayout, cfg: EstimatorConfig, rigid_only: bool = False) -> np.ndarray:
    mask = np.zeros(layout.size, dtype=bool)
    mask[0:3] = True
    mask[3:6] = cfg.base_translation
    if not rigid_only:
        for child in layout.joint_children:
            mask[layout.joint_col(child)] = True
        if cfg.refine_assembly:
            for k in range(layout.num_parts):
                mask[layout.assembly_cols(k)] = True
    return mask


def refine(
    X: PointCloud,
    model: ArticulatedModel,
    pose: ArticulatedPose,
    cfg: EstimatorConfig,
    iterations: int | None = None,
    rigid_only: bool = False,
) -> RefineTrace:
    """Damped Gauss-Newton descent on the frozen-correspondence objective, re-frozen every iteration."""
    iterations = cfg.iterations if iterations is None else iterations
    half_len = default_half_len(model, cfg.half_len_ratio)
    lam = 0.0 if rigid_only else cfg.lam

    def f(m: ArticulatedModel, p: ArticulatedPose) -> float:
        return objective(X, m, p, d_mode=cfg.d_mode, lam=lam, K_v=cfg.k_v, half_len=half_len)

    current = f(model, pose)
    trace = RefineTrace(pose=pose, model=model, objectives=[current])
    layout = ParamLayout.for_model(model)
    mask = _mask(layout, cfg, rigid_only)

    for it in range(iterations):
        corr = freeze(X, model, pose, d_mode=cfg.d_mode, lam=lam, K_v=cfg.k_v, half_len=half_len)
        _, grad, H = surrogate_grad(X, model, pose, corr)
        g = grad[mask]
        if float(np.linalg.norm(g)) <= GRAD_TOL:
            break
        Hm = H[np.ix_(mask, mask)]
        damping = 1e-6 * (np.trace(Hm) / Hm.shape[0]) + 1e-12
        direction = np.zeros(layout.size)
        direction[mask] = -np.linalg.solve(Hm + damping * np.eye(Hm.shape[0]), g)

        step = cfg.step_init * cfg.step_decay**it
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand_model, cand_pose = apply_step(model, pose, step * direction)
            value = f(cand_model, cand_pose)
            if value <= current:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            logger.debug("refine stalled iteration=%d objective=%.6g", it, current)
            break
        improvement = current - value
        model, pose, current = cand_model, cand_pose, value
        trace.objectives.append(current)
        if improvement <= 1e-15 * max(1.0, current):
            break

    trace.pose, trace.model = pose, model
    return trace


def lattice_spacing(model: ArticulatedModel) -> float:
    """Median nearest-neighbour distance over the assembled template points."""
    pts = model.assembled().points
    dist, _ = NeighborIndex(pts).knn(pts, k=2)
    return float(np.median(dist[:, 1]))


def _rotated(pose: ArticulatedPose, omega: np.ndarray, states: dict[int, float] | None = None) -> ArticulatedPose:
    base = RigidTransform(exp_so3(omega) @ pose.base.rotation, pose.base.translation)
    return ArticulatedPose(base, dict(pose.joint_states) if states is None else states)


def perturbations(model: ArticulatedModel, pose: ArticulatedPose, cfg: EstimatorConfig, scale: float, spacing: float) -> list[ArticulatedPose]:
    """Restart poses roughly one lattice spacing away from `pose`.

    Base rotations about 26 fixed directions, base rotations about each revolute
    axis with the child held in place, single joint-state moves and, when the base
    translation is free, translation moves along the coordinate axes.
    """
    angle = scale * spacing / (0.5 * model.diameter)
    out = [_rotated(pose, angle * d) for d in RESTART_DIRECTIONS]
    A = articulations(model, pose.joint_states)
    for joint in model.ordered_joints():
        if joint.kind == JointKind.revolute:
            axis = pose.base.rotation @ A[joint.parent].rotation @ joint.axis
            lever = 0.5 * model.parts[joint.child].diameter
            for sign in (1.0, -1.0):
                held = dict(pose.joint_states)
                held[joint.child] -= sign * angle
                out.append(_rotated(pose, sign * angle * axis, held))
        else:
            lever = 1.0
        for sign in (1.0, -1.0):
            moved = dict(pose.joint_states)
            moved[joint.child] += sign * scale * spacing / lever
            out.append(ArticulatedPose(pose.base, moved))
    if cfg.base_translation:
        for d in np.vstack([np.eye(3), -np.eye(3)]):
            out.append(ArticulatedPose(RigidTransform(pose.base.rotation, pose.base.translation + scale * spacing * d), dict(pose.joint_states)))
    return out


def escape_stall(X: PointCloud, trace: RefineTrace, cfg: EstimatorConfig) -> RefineTrace:
    """Restart short refinements around a stalled fit and keep any that ends lower.

    Nearest-neighbour descent stops in spurious minima roughly one lattice
    spacing from the truth. Each round tries the restart scales in order and
    moves to the first scale whose best restart lowers the objective; rounds
    stop once the reconstruction loss reaches restart_tol or nothing improves.
    """
    model, pose = trace.model, trace.pose
    spacing = lattice_spacing(model)
    tol = cfg.restart_tol * model.diameter**2
    for round_ in range(cfg.restart_rounds):
        _, Y = forward(model, pose)
        if chamfer(X, Y, mode=cfg.d_mode, norm="L2sq") <= tol:
            break
        current = trace.objectives[-1]
        improved = None
        for scale in RESTART_SCALES:
            starts = perturbations(model, pose, cfg, scale, spacing)
            tries = map_ordered(lambda p: refine(X, model, p, cfg, iterations=cfg.hypothesis_iterations), starts, cfg.jobs)
            best = min(range(len(tries)), key=lambda h: (tries[h].objectives[-1], h))
            if tries[best].objectives[-1] < current - 1e-12 * max(1.0, current):
                improved = tries[best]
                break
        if improved is None:
            logger.debug("restarts found nothing lower round=%d objective=%.6g", round_, current)
            break
        polished = refine(X, improved.model, improved.pose, cfg)
        model, pose = polished.model, polished.pose
        trace.objectives.extend(polished.objectives)
        logger.debug("restart accepted round=%d scale=%.2g objective=%.6g", round_, scale, trace.objectives[-1])
    trace.pose, trace.model = pose, model
    return trace


def _joint_grid_search(X: PointCloud, model: ArticulatedModel, base: RigidTransform, cfg: EstimatorConfig) -> dict[int, float]:
    joints = model.ordered_joints()
    states = {j.child: 0.5 * sum(_limits(j)) for j in joints}
    for joint in joints:
        n = cfg.revolute_grid if joint.kind == JointKind.revolute else cfg.prismatic_grid
        if n == 1:
            continue
        best_value, best_state = np.inf, states[joint.child]
        for value in grid_values(*_limits(joint), n):
            trial = dict(states)
            trial[joint.child] = float(value)
            _, Y = forward(model, ArticulatedPose(base, trial))
            loss = chamfer(X, Y, mode=cfg.d_mode, norm="L2sq")
            if loss < best_value:
                best_value, best_state = loss, float(value)
        states[joint.child] = best_state
    return states


def enumerate_hypotheses(X: PointCloud, model: ArticulatedModel, cfg: EstimatorConfig) -> list[ArticulatedPose]:
    """One pose per group element: base at the element, joint states by a per-joint grid search."""
    group = get_group(cfg.group)

    def hypothesis(g: int) -> ArticulatedPose:
        R = group.matrices[g]
        base = RigidTransform(R, _initial_translation(X, model, R, cfg))
        if cfg.pre_align:
            mids = {j.child: 0.5 * sum(_limits(j)) for j in model.joints}
            rigid = refine(X, model, ArticulatedPose(base, mids), cfg, iterations=cfg.hypothesis_iterations, rigid_only=True)
            base = rigid.pose.base
        return ArticulatedPose(base=base, joint_states=_joint_grid_search(X, model, base, cfg))

    return map_ordered(hypothesis, range(group.order), cfg.jobs)


def segment(X: PointCloud, model: ArticulatedModel, pose: ArticulatedPose) -> np.ndarray:
    """Label each observed point with the part of its nearest reconstructed point."""
    _, Y = forward(model, pose)
    _, idx = nearest(X.points, Y.points)
    return Y.labels[idx]


def estimate(X: PointCloud, model: ArticulatedModel, cfg: EstimatorConfig) -> PoseEstimate:
    hyps = enumerate_hypotheses(X, model, cfg)
    initial = rec_loss(X, model, hyps, cfg.d_mode, cfg.lam, jobs=cfg.jobs)
    top = [int(g) for g in np.argsort(initial.per_g_loss, kind="stable")[: cfg.top_k]]
    logger.info(
        "hypotheses scored group=%s count=%d best=%d loss=%.6g",
        cfg.group,
        len(hyps),
        initial.g0,
        initial.L_rec,
    )

    traces = map_ordered(
        lambda g: refine(X, model, hyps[g], cfg, iterations=cfg.hypothesis_iterations),
        top,
        cfg.jobs,
    )
    for g, trace in zip(top, traces):
        hyps[g] = trace.pose
    selection = rec_loss(X, model, hyps, cfg.d_mode, cfg.lam, jobs=cfg.jobs)
    g0 = selection.g0

    final = refine(X, model, hyps[g0], cfg)
    if cfg.restart_rounds:
        final = escape_stall(X, final, cfg)
    pose, fitted = final.pose, final.model
    hyps[g0] = pose
    _, Y = forward(fitted, pose)
    L_rec = chamfer(X, Y, mode=cfg.d_mode, norm="L2sq")
    per_g = list(selection.per_g_loss)
    per_g[g0] = min(per_g[g0], L_rec)
    half_len = default_half_len(fitted, cfg.half_len_ratio)
    report = LossReport(
        per_g_loss=tuple(per_g), g0=g0, L_rec=per_g[g0], L_reg=0.0, total=per_g[g0], lam=cfg.lam
    ).with_regularizer(reg_loss(fitted, pose, cfg.k_v, half_len))

    result = PoseEstimate(
        pose=pose,
        per_part=part_transforms(fitted, pose),
        report=report,
        segmentation=segment(X, fitted, pose),
        g0=g0,
        model=fitted,
        hypotheses=hyps,
        chamfer_l1=chamfer(X, Y, mode="uni", norm="L1"),
        objectives=final.objectives,
    )
    logger.info(
        "estimate done g0=%d L_rec=%.6g L_reg=%.6g iterations=%d",
        g0,
        report.L_rec,
        report.L_reg,
        len(final.objectives) - 1,
    )
    return result


def default_stack(seed: int = 0) -> ConvStack:
    return ConvStack.build(
        FEEDBACK_INPUT_CHANNELS,
        settings.FEATURE_WIDTHS,
        settings.NEIGHBOR_RADIUS,
        seed=seed,
        dtype=settings.dtype,
        num_points=settings.KERNEL_POINTS,
    )


def feedback_features(
    X: PointCloud,
    est: PoseEstimate,
    stack: ConvStack,
    rounds: int,
    group_kind: str = "octahedral",
    seed: int = 0,
    jobs: int = 1,
) -> tuple[EquivariantFeature, PerPointPose]:
    """Run the conv stack with per-point poses taken from the estimate.

    Round 0 uses identity poses (the plain group convolution). Later rounds feed
    the estimate's object-space part poses through the segmentation; the
    segmentation itself is never re-estimated from features.
    """
    group = get_group(group_kind)
    dtype = stack.kernels[0].weights.dtype
    Fin = invariant_input(len(X), stack.kernels[0].c_in, group, seed=seed, dtype=dtype)
    poses = PerPointPose.identity(len(X))
    features = stack(X, Fin, None, jobs=jobs)
    for r in range(rounds):
        poses = PerPointPose.from_parts(est.segmentation, est.object_poses())
        features = stack(X, Fin, poses, jobs=jobs)
        logger.debug("feedback round=%d done", r + 1)
    return features, poses
