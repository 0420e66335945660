"""Per-part pose errors, joint errors, residual calibration and table aggregation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from artipose.cloud import PointCloud, bbox_center, miou
from artipose.errors import CountMismatch, EmptyCloud, KindMismatch, TooFewSamples
from artipose.io import record_joints, record_transforms
from artipose.kinematics import Joint, JointKind
from artipose.schemas import MetricRowOut, PoseRecord
from artipose.se3 import RigidTransform, compose, geodesic_deg, invert, line_distance

logger = logging.getLogger("artipose.services.evaluation")

RANSAC_ITERATIONS = 100
RANSAC_ROT_DEG = 5.0
RANSAC_TRANS_RATIO = 0.02
MIN_CALIBRATION_SAMPLES = 3


@dataclass(frozen=True)
class PartError:
    R_err: float
    T_err: float


@dataclass(frozen=True)
class JointError:
    child: int
    kind: JointKind
    theta_err: float
    d_err: float | None


@dataclass
class MetricReport:
    per_part: list[PartError]
    joints: list[JointError] = field(default_factory=list)
    miou: float | None = None


def _translation_error(pred: RigidTransform, gt: RigidTransform, c_pred: np.ndarray, c_gt: np.ndarray) -> float:
    return float(np.linalg.norm(pred.apply(c_pred) - gt.apply(c_gt)))


def part_pose_error(pred: RigidTransform, gt: RigidTransform, pred_part: PointCloud, gt_part: PointCloud) -> PartError:
    """Rotation error in degrees, and translation error between the placed bounding-box centres."""
    if len(pred_part) == 0 or len(gt_part) == 0:
        raise EmptyCloud("part pose error needs non-empty parts")
    return PartError(
        R_err=geodesic_deg(pred.rotation, gt.rotation),
        T_err=_translation_error(pred, gt, bbox_center(pred_part), bbox_center(gt_part)),
    )


def joint_error(pred: Joint, gt: Joint) -> JointError:
    if pred.kind != gt.kind:
        raise KindMismatch("joint kinds differ", details={"pred": pred.kind.value, "gt": gt.kind.value})
    cos = abs(float(pred.axis @ gt.axis))
    theta = math.degrees(math.acos(min(1.0, cos)))
    d_err = None
    if gt.kind == JointKind.revolute:
        d_err = line_distance(pred.axis, pred.pivot, gt.axis, gt.pivot)
    return JointError(child=gt.child, kind=gt.kind, theta_err=theta, d_err=d_err)


def _consensus(samples: list[RigidTransform], diameter: float, rng: np.random.Generator) -> RigidTransform:
    trans_tol = RANSAC_TRANS_RATIO * diameter
    best_inliers: np.ndarray | None = None
    for _ in range(RANSAC_ITERATIONS):
        model = samples[int(rng.integers(len(samples)))]
        inliers = np.array(
            [
                geodesic_deg(model.rotation, s.rotation) < RANSAC_ROT_DEG
                and np.linalg.norm(s.translation - model.translation) < trans_tol
                for s in samples
            ]
        )
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best_inliers = inliers

    chosen = [s for s, keep in zip(samples, best_inliers) if keep]
    rotation = Rotation.from_matrix(np.stack([s.rotation for s in chosen])).mean().as_matrix()
    translation = np.mean([s.translation for s in chosen], axis=0)
    return RigidTransform(rotation, translation)


def calibrate_residual(
    preds_on_canonical: list[list[RigidTransform]],
    diameter: float = 1.0,
    seed: int = 0,
) -> list[RigidTransform]:
    """Per-part residual pose: the RANSAC consensus of predictions made on canonical inputs.

    preds_on_canonical holds one list of per-part transforms per sample.
    """
    if len(preds_on_canonical) < MIN_CALIBRATION_SAMPLES:
        raise TooFewSamples(
            "calibration needs at least three samples",
            details={"samples": len(preds_on_canonical), "required": MIN_CALIBRATION_SAMPLES},
        )
    K = len(preds_on_canonical[0])
    if any(len(s) != K for s in preds_on_canonical):
        raise CountMismatch("calibration samples disagree on the part count")
    rng = np.random.default_rng(seed)
    residuals = [_consensus([s[k] for s in preds_on_canonical], diameter, rng) for k in range(K)]
    logger.info("residual calibrated parts=%d samples=%d", K, len(preds_on_canonical))
    return residuals


def apply_calibration(per_part: list[RigidTransform], residuals: list[RigidTransform]) -> list[RigidTransform]:
    if len(per_part) != len(residuals):
        raise CountMismatch("prediction and residual part counts differ")
    return [compose(invert(res), P) for P, res in zip(per_part, residuals)]


def evaluate_record(
    pred: PoseRecord,
    gt: PoseRecord,
    residuals: list[RigidTransform] | None = None,
) -> MetricReport:
    """Score one prediction record against its ground-truth record."""
    if len(pred.per_part) != len(gt.per_part):
        raise CountMismatch("part counts differ", details={"pred": len(pred.per_part), "gt": len(gt.per_part)})
    K = len(gt.per_part)
    pred_T = record_transforms(pred)
    if residuals is not None:
        pred_T = apply_calibration(pred_T, residuals)
    gt_T = record_transforms(gt)
    zeros = [[0.0, 0.0, 0.0]] * K
    c_pred = np.asarray(pred.part_bbox_centers or zeros, dtype=np.float64)
    c_gt = np.asarray(gt.part_bbox_centers or zeros, dtype=np.float64)
    parts = [
        PartError(geodesic_deg(p.rotation, g.rotation), _translation_error(p, g, c_pred[k], c_gt[k]))
        for k, (p, g) in enumerate(zip(pred_T, gt_T))
    ]

    pred_joints = {j.child: j for j in record_joints(pred)}
    joints = []
    for g in record_joints(gt):
        if g.child not in pred_joints:
            raise CountMismatch("prediction lacks a joint", details={"child": g.child})
        joints.append(joint_error(pred_joints[g.child], g))

    score = None
    if pred.labels is not None and gt.labels is not None:
        score = miou(pred.labels, gt.labels, K)
    return MetricReport(per_part=parts, joints=joints, miou=score)


def lower_median(values: list[float]) -> float:
    ordered = sorted(values)
    return float(ordered[(len(ordered) - 1) // 2])


def aggregate(reports: list[MetricReport], dataset: str) -> list[MetricRowOut]:
    """One row per part: mean and median errors, joint errors of the joint driving that part."""
    if not reports:
        raise CountMismatch("nothing to aggregate")
    K = len(reports[0].per_part)
    J = len(reports[0].joints)
    for r in reports:
        if len(r.per_part) != K or len(r.joints) != J:
            raise CountMismatch("reports disagree on part or joint counts", details={"parts": K, "joints": J})

    scores = [r.miou for r in reports if r.miou is not None]
    mean_miou = float(np.mean(scores)) if scores else None
    rows = []
    for k in range(K):
        R = [r.per_part[k].R_err for r in reports]
        T = [r.per_part[k].T_err for r in reports]
        theta = [j.theta_err for r in reports for j in r.joints if j.child == k]
        dist = [j.d_err for r in reports for j in r.joints if j.child == k and j.d_err is not None]
        rows.append(
            MetricRowOut(
                dataset=dataset,
                part_id=k,
                R_err_mean=float(np.mean(R)),
                R_err_median=lower_median(R),
                T_err_mean=float(np.mean(T)),
                T_err_median=lower_median(T),
                theta_err_mean=float(np.mean(theta)) if theta else None,
                d_err_mean=float(np.mean(dist)) if dist else None,
                miou=mean_miou,
            )
        )
    return rows


def write_csv(path: str | Path, rows: list[MetricRowOut]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MetricRowOut.model_fields))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.model_dump().items()})
