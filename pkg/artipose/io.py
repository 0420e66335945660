"""File formats: ASCII point clouds, model and dataset manifests, group and feature dumps."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from artipose.cloud import PointCloud, bbox_center
from artipose.equivconv import EquivariantFeature
from artipose.errors import InvalidFile
from artipose.kinematics import (
    ArticulatedModel,
    ArticulatedPose,
    Joint,
    JointKind,
    build_tree,
    joints_in_camera,
)
from artipose.rotgroup import RotationGroup
from artipose.schemas import (
    DatasetManifest,
    EdgeOut,
    GroundTruthOut,
    JointOut,
    ModelManifest,
    PartPoseOut,
    PoseRecord,
    SampleEntry,
)
from artipose.se3 import RigidTransform

logger = logging.getLogger("artipose.io")

CLOUD_MAGIC = "apc"
DEFAULT_DIGITS = 9

M = TypeVar("M", bound=BaseModel)


def write_cloud(path: str | Path, cloud: PointCloud, digits: int = DEFAULT_DIGITS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = cloud.labels if cloud.labels is not None else np.full(len(cloud), -1)
    lines = [f"{CLOUD_MAGIC} {len(cloud)} {cloud.num_parts}"]
    for (x, y, z), label in zip(cloud.points, labels):
        lines.append(f"{x:.{digits}g} {y:.{digits}g} {z:.{digits}g} {int(label)}")
    path.write_text("\n".join(lines) + "\n")


def read_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    lines = path.read_text().splitlines()
    try:
        magic, n, _k = lines[0].split()
        if magic != CLOUD_MAGIC:
            raise ValueError("bad magic")
        rows = np.array([line.split() for line in lines[1 : 1 + int(n)]], dtype=np.float64)
        if rows.shape != (int(n), 4):
            raise ValueError("row count or width mismatch")
    except (IndexError, ValueError) as exc:
        raise InvalidFile("not a point-cloud file", details={"path": str(path), "error": str(exc)}) from exc
    labels = rows[:, 3].astype(np.int64)
    return PointCloud(rows[:, :3], None if np.all(labels < 0) else labels)


def write_json(path: str | Path, record: BaseModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(record.model_dump_json(indent=2))


def read_json(path: str | Path, schema: type[M]) -> M:
    path = Path(path)
    try:
        return schema.model_validate_json(path.read_text())
    except ValidationError as exc:
        raise InvalidFile(
            f"file does not match the {schema.__name__} schema",
            details={"path": str(path), "errors": json.loads(exc.json())},
        ) from exc


def _limits_out(limits) -> list[float] | None:
    return None if limits is None else [float(v) for v in limits]


def write_model(directory: str | Path, model: ArticulatedModel) -> Path:
    directory = Path(directory)
    part_files = []
    for k, part in enumerate(model.parts):
        name = f"part_{k}.apc"
        write_cloud(directory / name, part)
        part_files.append(name)
    edges = [
        EdgeOut(
            parent=j.parent,
            child=j.child,
            kind=j.kind.value,
            axis=j.axis.tolist(),
            pivot=None if j.pivot is None else j.pivot.tolist(),
            limits=_limits_out(j.limits),
        )
        for j in model.joints
    ]
    manifest = ModelManifest(
        K=model.num_parts,
        root=model.tree.root,
        order=list(model.tree.order),
        edges=edges,
        assembly=model.assembly.tolist(),
        part_files=part_files,
    )
    out = directory / "manifest.json"
    write_json(out, manifest)
    return out


def read_model(path: str | Path) -> ArticulatedModel:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = read_json(path, ModelManifest)
    parts = [read_cloud(path.parent / name) for name in manifest.part_files]
    if len(parts) != manifest.K:
        raise InvalidFile("part file count does not match K", details={"K": manifest.K, "files": len(parts)})
    joints = [
        Joint(
            JointKind(e.kind),
            np.asarray(e.axis),
            None if e.pivot is None else np.asarray(e.pivot),
            e.parent,
            e.child,
            None if e.limits is None else tuple(e.limits),
        )
        for e in manifest.edges
    ]
    tree = build_tree(manifest.K, [(e.parent, e.child) for e in manifest.edges], manifest.root)
    return ArticulatedModel(parts=parts, assembly=np.asarray(manifest.assembly), tree=tree, joints=joints)


def joint_out(joint: Joint) -> JointOut:
    return JointOut(
        kind=joint.kind.value,
        parent=joint.parent,
        child=joint.child,
        axis=joint.axis.tolist(),
        pivot=None if joint.pivot is None else joint.pivot.tolist(),
        limits=_limits_out(joint.limits),
    )


def part_pose_out(T: RigidTransform) -> PartPoseOut:
    return PartPoseOut(R=T.rotation.tolist(), t=T.translation.tolist())


def part_bbox_centers(parts: list[PointCloud]) -> list[list[float]]:
    """Bounding-box centres in each canonical part frame, where T_err is measured."""
    return [bbox_center(p).tolist() for p in parts]


def pose_fields(
    model: ArticulatedModel,
    pose: ArticulatedPose,
    per_part: list[RigidTransform],
    labels: np.ndarray | None = None,
) -> dict:
    """Shared PoseRecord fields for estimates and ground truth."""
    return {
        "base_quaternion": pose.base.quaternion().tolist(),
        "base_translation": pose.base.translation.tolist(),
        "joint_states": {int(k): float(v) for k, v in pose.joint_states.items()},
        "per_part": [part_pose_out(T) for T in per_part],
        "joints": [joint_out(j) for j in joints_in_camera(model, pose)],
        "part_bbox_centers": part_bbox_centers(model.parts),
        "labels": None if labels is None else [int(v) for v in labels],
    }


def record_transforms(record: PoseRecord) -> list[RigidTransform]:
    return [RigidTransform(np.asarray(p.R), np.asarray(p.t)) for p in record.per_part]


def record_joints(record: PoseRecord) -> list[Joint]:
    return [
        Joint(JointKind(j.kind), np.asarray(j.axis), None if j.pivot is None else np.asarray(j.pivot), j.parent, j.child)
        for j in record.joints
    ]


def write_dataset(
    directory: str | Path,
    manifest: DatasetManifest,
    model: ArticulatedModel,
    samples,
) -> Path:
    """samples: iterable of (cloud, GroundTruthOut)."""
    directory = Path(directory)
    write_model(directory / "model", model)
    entries = []
    for cloud, gt in samples:
        stem = f"sample_{gt.sample_index:05d}"
        write_cloud(directory / f"{stem}.apc", cloud)
        write_json(directory / f"{stem}.gt.json", gt)
        entries.append(SampleEntry(index=gt.sample_index, cloud=f"{stem}.apc", gt=f"{stem}.gt.json"))
    out = directory / "manifest.json"
    write_json(out, manifest.model_copy(update={"samples": entries}))
    logger.info("dataset written dir=%s samples=%d", directory, len(entries))
    return out


def read_dataset(directory: str | Path) -> tuple[DatasetManifest, ArticulatedModel, list[tuple[PointCloud, GroundTruthOut]]]:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json", DatasetManifest)
    model = read_model(directory / manifest.model)
    samples = [
        (read_cloud(directory / entry.cloud), read_json(directory / entry.gt, GroundTruthOut))
        for entry in manifest.samples
    ]
    return manifest, model, samples


def dump_group(path: str | Path, group: RotationGroup) -> None:
    lines = [f"{k} " + " ".join(f"{v:.17g}" for v in q) for k, q in enumerate(group.quaternions)]
    Path(path).write_text("\n".join(lines) + "\n")


def dump_features(path: str | Path, F: EquivariantFeature) -> None:
    header = np.asarray(F.values.shape, dtype="<i8")
    payload = np.ascontiguousarray(F.values, dtype="<f8")
    Path(path).write_bytes(header.tobytes() + payload.tobytes())


def load_features(path: str | Path, group: RotationGroup) -> EquivariantFeature:
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise InvalidFile("feature dump is truncated", details={"path": str(path)})
    shape = tuple(int(v) for v in np.frombuffer(raw[:24], dtype="<i8"))
    values = np.frombuffer(raw[24:], dtype="<f8")
    if values.size != int(np.prod(shape)):
        raise InvalidFile("feature payload does not match its header", details={"shape": list(shape)})
    return EquivariantFeature(values.reshape(shape).copy(), group)
