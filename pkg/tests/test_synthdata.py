import math

import numpy as np
import pytest

from artipose.cloud import PointCloud, nearest
from artipose.errors import NoValidView
from artipose.kinematics import ArticulatedPose, forward
from artipose.se3 import RigidTransform
from artipose.services.synthdata import (
    MIN_POINTS_PER_PART,
    Sample,
    ViewSpec,
    add_noise,
    camera_view,
    generate,
    make_template,
    render_partial,
    visibility_mask,
)


def _layer(z, label=None, n=10):
    xs = np.arange(n) * 0.1
    grid = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    pts = np.column_stack([grid, np.full(len(grid), z)])
    return pts if label is None else (pts, np.full(len(pts), label))


def test_generation_is_deterministic(laptop_template):
    a = generate(laptop_template, 2, 2, seed=11)
    b = generate(laptop_template, 2, 2, seed=11, jobs=3)
    assert len(a) == 4
    for x, y in zip(a, b):
        assert np.array_equal(x.cloud.points, y.cloud.points)
        assert x.gt_pose.joint_states == y.gt_pose.joint_states


def test_laptop_angles_stay_within_limits(laptop_template):
    for sample in generate(laptop_template, 6, 1, seed=2):
        angle = sample.gt_pose.joint_states[1]
        assert math.radians(9) <= angle < math.radians(99)


def test_samples_share_states_across_rotations(laptop_template):
    samples = generate(laptop_template, 2, 3, seed=4)
    assert samples[0].gt_pose.joint_states == samples[2].gt_pose.joint_states
    assert not np.allclose(samples[0].gt_pose.base.rotation, samples[1].gt_pose.base.rotation)


def test_sample_cloud_is_exactly_the_forward_model(laptop_template):
    sample = generate(laptop_template, 1, 1, seed=5)[0]
    _, Y = forward(sample.model, sample.gt_pose)
    assert np.array_equal(sample.cloud.points, Y.points)
    assert np.array_equal(sample.cloud.labels, Y.labels)


def test_templates_are_unit_diameter_with_enough_points():
    for kind, step in (("laptop", 0.06), ("oven_lid", 0.06), ("drawer", 0.06), ("eyeglasses", 0.03)):
        model = make_template(kind, step=step).model()
        assert model.assembled().diameter == pytest.approx(1.0)
        assert min(len(p) for p in model.parts) >= MIN_POINTS_PER_PART
        assert np.allclose([p.points.min(axis=0) + p.points.max(axis=0) for p in model.parts], 0.0)


def test_symmetric_variant_drops_feature_boxes():
    full = make_template("drawer", step=0.06).model()
    plain = make_template("drawer", step=0.06, symmetric=True).model()
    assert min(len(p) for p in plain.parts) >= MIN_POINTS_PER_PART
    for part in plain.parts:
        assert nearest(-part.points, part.points)[0].max() < 1e-9
    assert nearest(-full.parts[0].points, full.parts[0].points)[0].max() > 0.01


def test_unknown_template():
    with pytest.raises(ValueError):
        make_template("teapot")


def test_front_layer_hides_the_back_layer():
    pts = np.concatenate([_layer(0.0), _layer(0.1)])
    mask = visibility_mask(pts, [0.0, 0.0, 1.0], 32)
    assert mask.sum() == 100
    assert np.all(pts[mask][:, 2] == 0.1)


def test_partial_view_is_a_subset_with_every_part():
    template = make_template("laptop", step=0.04)
    sample = generate(template, 1, 1, seed=8)[0]
    partial = render_partial(sample, camera_view(template, sample), seed=8)
    assert len(partial.cloud) < len(sample.cloud)
    assert np.array_equal(partial.cloud.points, sample.cloud.points[partial.visible])
    counts = np.bincount(sample.cloud.labels, minlength=2)
    kept = np.bincount(partial.cloud.labels, minlength=2)
    assert np.all(kept >= 0.1 * counts)


def test_fully_occluded_part_rejects_the_view(hinge_model):
    top, top_labels = _layer(0.1, 0)
    bottom, bottom_labels = _layer(0.0, 1)
    cloud = PointCloud(np.concatenate([top, bottom]), np.concatenate([top_labels, bottom_labels]))
    sample = Sample(cloud=cloud, gt_pose=ArticulatedPose(RigidTransform.identity(), {1: 0.0}), model=hinge_model)
    with pytest.raises(NoValidView):
        render_partial(sample, ViewSpec(direction=(0.0, 0.0, 1.0), max_attempts=1))


def test_view_resolution_floor():
    with pytest.raises(ValueError):
        ViewSpec(direction=(0.0, 0.0, 1.0), resolution=16)


def test_noise(laptop_template):
    sample = generate(laptop_template, 1, 1)[0]
    assert add_noise(sample, 0.0) is sample
    noisy = add_noise(sample, 0.01, seed=1)
    offsets = noisy.cloud.points - sample.cloud.points
    assert 0.005 < offsets.std() < 0.015
    assert np.array_equal(noisy.cloud.labels, sample.cloud.labels)
    with pytest.raises(ValueError):
        add_noise(sample, -1.0)
