import math

import numpy as np
import pytest

from artipose.cloud import PointCloud
from artipose.equivconv import ConvStack
from artipose.kinematics import ArticulatedPose, forward, part_transforms
from artipose.rotgroup import get_group
from artipose.se3 import RigidTransform, exp_so3, geodesic_deg
from artipose.services.estimator import (
    FEEDBACK_INPUT_CHANNELS,
    RESTART_DIRECTIONS,
    EstimatorConfig,
    enumerate_hypotheses,
    escape_stall,
    estimate,
    feedback_features,
    grid_values,
    lattice_spacing,
    perturbations,
    refine,
)
from artipose.services.evaluation import part_pose_error
from artipose.services.synthdata import camera_view, generate, make_template, render_partial


def _observe(model, R, state):
    _, Y = forward(model, ArticulatedPose(RigidTransform(R), {1: state}))
    return PointCloud(Y.points), Y.labels


def test_grid_values_are_cell_centres():
    assert np.allclose(grid_values(0.0, 1.0, 4), [0.125, 0.375, 0.625, 0.875])
    assert np.allclose(grid_values(-1.0, 1.0, 1), [0.0])


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        EstimatorConfig(top_k=0)
    with pytest.raises(ValueError):
        EstimatorConfig(group="cyclic")


def test_one_hypothesis_per_group_element(hinge_model):
    group = get_group("tetrahedral")
    X, _ = _observe(hinge_model, group.matrices[3], 0.5)
    hyps = enumerate_hypotheses(X, hinge_model, EstimatorConfig(group="tetrahedral", revolute_grid=4))
    assert len(hyps) == group.order
    assert np.array_equal(hyps[3].base.rotation, group.matrices[3])
    assert hyps[3].joint_states[1] in set(grid_values(0.0, math.pi / 2, 4))


def test_refine_never_increases_the_objective(hinge_model):
    R = exp_so3([0.0, 0.15, 0.0])
    X, _ = _observe(hinge_model, R, 0.7)
    start = ArticulatedPose(RigidTransform.identity(), {1: 0.5})
    trace = refine(X, hinge_model, start, EstimatorConfig(iterations=15))
    assert all(b <= a for a, b in zip(trace.objectives, trace.objectives[1:]))
    assert trace.objectives[-1] < trace.objectives[0]


def test_estimate_recovers_pose_near_a_group_element(hinge_model):
    group = get_group("octahedral")
    R = exp_so3([0.0, 0.0, math.radians(8.0)]) @ group.matrices[5]
    X, labels = _observe(hinge_model, R, 0.7)
    cfg = EstimatorConfig(group="octahedral", top_k=24, hypothesis_iterations=10, iterations=40)
    est = estimate(X, hinge_model, cfg)
    assert geodesic_deg(est.pose.base.rotation, R) < 1.0
    assert est.pose.joint_states[1] == pytest.approx(0.7, abs=0.02)
    assert np.mean(est.segmentation == labels) > 0.95
    assert est.report.L_rec == min(est.report.per_g_loss)
    assert len(est.per_part) == 2
    assert all(b <= a for a, b in zip(est.objectives, est.objectives[1:]))


def test_feedback_rounds_use_estimated_poses(hinge_model, tetrahedral):
    X, _ = _observe(hinge_model, np.eye(3), 0.3)
    est = estimate(X, hinge_model, EstimatorConfig(group="tetrahedral", top_k=2, hypothesis_iterations=2, iterations=5))
    stack = ConvStack.build(FEEDBACK_INPUT_CHANNELS, (4,), 0.15, seed=0)
    plain, poses0 = feedback_features(X, est, stack, rounds=0, group_kind="tetrahedral")
    fed, poses1 = feedback_features(X, est, stack, rounds=1, group_kind="tetrahedral")
    assert plain.values.shape == fed.values.shape
    assert plain.values.shape[-1] == tetrahedral.order
    assert np.allclose(poses0.rotations, np.eye(3))
    assert len(poses1.rotations) == len(X)


def test_restart_poses(hinge_model):
    pose = ArticulatedPose(RigidTransform(exp_so3([0.3, -0.2, 0.5])), {1: 0.7})
    starts = perturbations(hinge_model, pose, EstimatorConfig(), 1.0, 0.05)
    assert len(starts) == len(RESTART_DIRECTIONS) + 4
    assert len(perturbations(hinge_model, pose, EstimatorConfig(base_translation=True), 1.0, 0.05)) == len(starts) + 6
    # rotating the base about the hinge while counter-rotating the joint holds the lid
    held = starts[len(RESTART_DIRECTIONS)]
    lid = part_transforms(hinge_model, pose)[1].rotation
    assert np.allclose(part_transforms(hinge_model, held)[1].rotation, lid)
    assert geodesic_deg(held.base.rotation, pose.base.rotation) > 1.0


def test_lattice_spacing(hinge_model):
    assert lattice_spacing(hinge_model) == pytest.approx(0.05, rel=0.25)


def test_restarts_leave_a_stalled_fit_no_worse(hinge_model):
    R = exp_so3([0.2, -0.1, 0.3])
    X, _ = _observe(hinge_model, R, 0.7)
    start = ArticulatedPose(RigidTransform(exp_so3([0.0, 0.0, 0.12]) @ R), {1: 0.75})
    cfg = EstimatorConfig(iterations=20, hypothesis_iterations=5)
    trace = refine(X, hinge_model, start, cfg)
    stalled = trace.objectives[-1]
    escaped = escape_stall(X, trace, cfg)
    assert escaped.objectives[-1] <= stalled
    assert all(b <= a for a, b in zip(escaped.objectives, escaped.objectives[1:]))
    assert geodesic_deg(escaped.pose.base.rotation, R) < 1.0


@pytest.mark.parametrize("kind", ["laptop", "oven_lid", "drawer"])
def test_noiseless_samples_close(kind):
    template = make_template(kind, step=0.05)
    for sample in generate(template, 1, 2, seed=7):
        est = estimate(PointCloud(sample.cloud.points), sample.model, EstimatorConfig())
        for k, (found, truth) in enumerate(zip(est.per_part, sample.transforms)):
            error = part_pose_error(found, truth, sample.model.parts[k], sample.model.parts[k])
            assert error.R_err < 2.0
            assert error.T_err < 0.01


def test_partial_views_recover_the_pose():
    template = make_template("laptop", step=0.04)
    for sample in generate(template, 1, 2, seed=7):
        partial = render_partial(sample, camera_view(template, sample, resolution=64), seed=7)
        est = estimate(PointCloud(partial.cloud.points), sample.model, EstimatorConfig(d_mode="uni"))
        errors = [geodesic_deg(f.rotation, t.rotation) for f, t in zip(est.per_part, sample.transforms)]
        assert max(errors) < 5.0
