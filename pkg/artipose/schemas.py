from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field


class PartPoseOut(BaseModel):
    R: list[list[float]]
    t: list[float]


class JointOut(BaseModel):
    kind: Literal["revolute", "prismatic"]
    parent: int
    child: int
    axis: list[float]
    pivot: list[float] | None = None
    limits: list[float] | None = None


class PoseRecord(BaseModel):
    base_quaternion: list[float] = Field(description="w, x, y, z")
    base_translation: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    joint_states: dict[int, float] = Field(default_factory=dict)
    per_part: list[PartPoseOut]
    joints: list[JointOut] = Field(default_factory=list, description="camera-space joint lines")
    part_bbox_centers: list[list[float]] | None = None
    labels: list[int] | None = None


class EstimateOut(PoseRecord):
    group: str
    g0: int
    L_rec: float
    L_reg: float
    total: float
    per_g_loss: list[float]
    chamfer_l1: float | None = None
    miou: float | None = None
    metrics: dict[str, Any] | None = None


class IcpOut(PoseRecord):
    inlier_rmse: list[float]
    hypothesis_rmse: list[list[float]]
    converged: list[bool]
    miou: float | None = None


class GroundTruthOut(PoseRecord):
    sample_index: int
    state_index: int
    rot_index: int
    view: list[float] | None = None
    visible: list[int] | None = None


class LossReportOut(BaseModel):
    per_g_loss: list[float]
    g0: int
    L_rec: float
    L_reg: float
    total: float
    lam: float


class EdgeOut(BaseModel):
    parent: int
    child: int
    kind: Literal["revolute", "prismatic"]
    axis: list[float]
    pivot: list[float] | None = None
    limits: list[float] | None = None


class ModelManifest(BaseModel):
    K: int = Field(ge=2)
    root: int
    order: list[int]
    edges: list[EdgeOut]
    assembly: list[list[float]]
    part_files: list[str]


class SampleEntry(BaseModel):
    index: int
    cloud: str
    gt: str


class DatasetManifest(BaseModel):
    template: str
    kind: str
    states: int
    rots: int
    seed: int
    limits: dict[int, list[float]]
    partial: bool = False
    noise: float = 0.0
    symmetric: bool = False
    step: float
    model: str = "model/manifest.json"
    samples: list[SampleEntry] = Field(default_factory=list)


class MetricRowOut(BaseModel):
    dataset: str
    part_id: int
    R_err_mean: float
    R_err_median: float
    T_err_mean: float
    T_err_median: float
    theta_err_mean: float | None = None
    d_err_mean: float | None = None
    miou: float | None = None


class VerifyCheckOut(BaseModel):
    name: str
    passed: bool
    value: float | None = None
    tol: float | None = None
    details: dict[str, Any] | None = None


class VerifySummaryOut(BaseModel):
    passed: bool
    group: str
    tol: float
    checks: list[VerifyCheckOut]


SCHEMAS: dict[str, type[BaseModel]] = {
    "estimate": EstimateOut,
    "icp": IcpOut,
    "ground_truth": GroundTruthOut,
    "loss_report": LossReportOut,
    "model_manifest": ModelManifest,
    "dataset_manifest": DatasetManifest,
    "metric_row": MetricRowOut,
    "verify_summary": VerifySummaryOut,
}
