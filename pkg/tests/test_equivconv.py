import numpy as np
import pytest

from artipose.cloud import PointCloud
from artipose.equivconv import (
    ConvStack,
    EquivariantFeature,
    PerPointPose,
    epn_conv,
    invariant_input,
    make_kernel,
    pool_invariant,
    pose_aware_conv,
    verify_part_level,
)
from artipose.errors import GroupMismatch, PoseMissing, ShapeMismatch
from artipose.rotgroup import act_on_feature_axis
from artipose.se3 import RigidTransform


def _random_cloud(rng, n=100):
    return PointCloud(rng.uniform(-0.5, 0.5, size=(n, 3)))


def _two_parts(rng, per_part=60):
    a = rng.uniform(-0.2, 0.2, size=(per_part, 3)) + [-0.25, 0.0, 0.0]
    b = rng.uniform(-0.2, 0.2, size=(per_part, 3)) + [0.25, 0.0, 0.0]
    return PointCloud(np.concatenate([a, b]), np.repeat([0, 1], per_part))


def test_kernel_layout():
    k = make_kernel(3, 5, 0.4, seed=1)
    assert k.kernel_points.shape == (15, 3)
    assert np.allclose(k.kernel_points[0], 0.0)
    assert np.allclose(np.linalg.norm(k.kernel_points[1:13], axis=1), 0.66)
    assert k.weights.shape == (15, 3, 5)
    assert k.influence == pytest.approx(0.2)
    assert np.all(k.response(np.zeros(3)) >= 0.0)


def test_feature_validation(octahedral):
    with pytest.raises(GroupMismatch):
        EquivariantFeature(np.zeros((4, 2, 12)), octahedral)
    with pytest.raises(ShapeMismatch):
        EquivariantFeature(np.zeros((4, 24)), octahedral)


def test_epn_conv_is_globally_equivariant(octahedral, rng):
    X = _random_cloud(rng)
    F = EquivariantFeature(rng.standard_normal((len(X), 3, octahedral.order)), octahedral)
    k = make_kernel(3, 4, 0.4, seed=2)
    base = epn_conv(X, F, k, 0.4)
    for a in (1, 5, 13, 23):
        rotated = PointCloud(X.points @ octahedral.matrices[a].T)
        out = epn_conv(rotated, act_on_feature_axis(octahedral, a, F), k, 0.4)
        expected = act_on_feature_axis(octahedral, a, base)
        assert np.abs(out.values - expected.values).max() < 1e-10


def test_pose_aware_with_identity_poses_equals_epn(tetrahedral, rng):
    X = _random_cloud(rng, 80)
    F = EquivariantFeature(rng.standard_normal((len(X), 2, tetrahedral.order)), tetrahedral)
    k = make_kernel(2, 3, 0.4, seed=4)
    plain = epn_conv(X, F, k, 0.4)
    posed = pose_aware_conv(X, F, PerPointPose.identity(len(X)), k, 0.4)
    assert np.array_equal(plain.values, posed.values)


def test_parallel_conv_matches_sequential(tetrahedral, rng):
    X = _random_cloud(rng, 60)
    F = invariant_input(len(X), 2, tetrahedral, seed=3)
    k = make_kernel(2, 3, 0.4, seed=5)
    assert np.array_equal(epn_conv(X, F, k, 0.4, jobs=1).values, epn_conv(X, F, k, 0.4, jobs=4).values)


def test_part_level_invariance_and_equivariance(octahedral, rng):
    X = _two_parts(rng)
    poses = [RigidTransform.identity(), RigidTransform.identity()]
    report = verify_part_level(X, poses, trials=6, tol=1e-10, group=octahedral, seed=7)
    assert report.passed
    assert len(report.invariance_by_trial) == 6


def test_identity_feed_fails_under_motion(octahedral, rng):
    X = _two_parts(rng)
    poses = [RigidTransform.identity(), RigidTransform.identity()]
    control = verify_part_level(X, poses, trials=4, tol=1e-10, group=octahedral, seed=7, feed="identity", motion_deg=30.0)
    assert not control.passed
    assert control.max_invariance_violation > 1e-7


def test_identity_motion_is_trivially_equivariant(tetrahedral, rng):
    X = _two_parts(rng, 40)
    poses = [RigidTransform.identity(), RigidTransform.identity()]
    report = verify_part_level(X, poses, trials=2, tol=0.0, group=tetrahedral, identity_motion=True)
    assert report.max_invariance_violation == 0.0
    assert report.max_equivariance_violation == 0.0


def test_pose_noise_degrades_invariance(tetrahedral, rng):
    X = _two_parts(rng, 40)
    poses = [RigidTransform.identity(), RigidTransform.identity()]
    clean = verify_part_level(X, poses, trials=2, tol=1e-10, group=tetrahedral, seed=1)
    noisy = verify_part_level(X, poses, trials=2, tol=1e-10, group=tetrahedral, seed=1, pose_noise=(5.0, 0.01))
    assert noisy.max_invariance_violation > clean.max_invariance_violation


def test_from_parts_needs_every_pose():
    with pytest.raises(PoseMissing):
        PerPointPose.from_parts(np.array([0, 1, 2]), [RigidTransform.identity()] * 2)


def test_pose_count_must_match_points(tetrahedral, rng):
    X = _random_cloud(rng, 10)
    F = invariant_input(10, 2, tetrahedral)
    with pytest.raises(PoseMissing):
        pose_aware_conv(X, F, PerPointPose.identity(9), make_kernel(2, 2, 0.4), 0.4)


def test_stack_and_pooling(tetrahedral, rng):
    X = _random_cloud(rng, 50)
    stack = ConvStack.build(2, (4, 6), 0.4, seed=0)
    F = stack(X, invariant_input(50, 2, tetrahedral))
    assert F.values.shape == (50, 6, tetrahedral.order)
    pooled = pool_invariant(F, "max")
    shifted = pool_invariant(act_on_feature_axis(tetrahedral, 3, F), "max")
    assert np.array_equal(pooled, shifted)
    attention = pool_invariant(F, "attention")
    assert attention.shape == (50, 6)
    assert np.allclose(attention, pool_invariant(act_on_feature_axis(tetrahedral, 3, F), "attention"))


def test_float32_stays_within_single_precision_tolerance(octahedral, rng):
    X = _random_cloud(rng, 80)
    F32 = EquivariantFeature(rng.standard_normal((80, 2, octahedral.order)).astype(np.float32), octahedral)
    k = make_kernel(2, 3, 0.4, seed=9, dtype=np.float32)
    base = epn_conv(X, F32, k, 0.4)
    rotated = PointCloud(X.points @ octahedral.matrices[7].T)
    out = epn_conv(rotated, act_on_feature_axis(octahedral, 7, F32), k, 0.4)
    assert out.values.dtype == np.float32
    assert np.abs(out.values - act_on_feature_axis(octahedral, 7, base).values).max() < 1e-5


def test_moving_one_part_by_a_group_element_permutes_only_its_features(octahedral, rng):
    X = _two_parts(rng)
    part_a = X.labels == 0
    F = EquivariantFeature(rng.standard_normal((len(X), 3, octahedral.order)), octahedral)
    k = make_kernel(3, 4, 0.4, seed=6)
    base = pose_aware_conv(X, F, PerPointPose.identity(len(X)), k, 0.4)

    a = 7
    motion = RigidTransform(octahedral.matrices[a], [0.3, -0.2, 0.1])
    moved_pts = X.points.copy()
    moved_pts[part_a] = motion.apply(X.points[part_a])
    moved_values = F.values.copy()
    moved_values[part_a] = act_on_feature_axis(octahedral, a, F).values[part_a]
    poses = PerPointPose.from_parts(X.labels, [motion, RigidTransform.identity()])
    out = pose_aware_conv(PointCloud(moved_pts, X.labels), EquivariantFeature(moved_values, octahedral), poses, k, 0.4)

    expected = act_on_feature_axis(octahedral, a, base).values
    assert np.abs(out.values[part_a] - expected[part_a]).max() < 1e-10
    assert np.abs(out.values[~part_a] - base.values[~part_a]).max() < 1e-10


def test_invariance_violation_grows_with_pose_error(tetrahedral, rng):
    X = _two_parts(rng, 40)
    poses = [RigidTransform.identity(), RigidTransform.identity()]
    violations = [
        verify_part_level(X, poses, trials=2, tol=1e-10, group=tetrahedral, seed=1, pose_noise=noise).max_invariance_violation
        for noise in ((2.0, 0.004), (10.0, 0.02), (30.0, 0.06))
    ]
    assert violations[0] < violations[1] < violations[2]
