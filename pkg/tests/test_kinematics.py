import itertools
import math

import numpy as np
import pytest

from artipose.cloud import PointCloud
from artipose.errors import BadAxis, DegenerateMotion, MissingJointState, TooFewParts
from artipose.kinematics import (
    ArticulatedModel,
    ArticulatedPose,
    Joint,
    JointKind,
    UnionFind,
    articulations,
    build_tree,
    estimate_joint_from_motion,
    forward,
    infer_chain,
    joints_in_camera,
    maximum_spanning_tree,
    part_transforms,
    unify_axes,
    within_limits,
)
from artipose.se3 import RigidTransform, compose, random_transform, rotation_about_line


def test_build_tree_orders_children_before_root():
    tree = build_tree(4, [(0, 1), (1, 2), (0, 3)], 0)
    assert tree.order[-1] == 0
    for e in tree.edges:
        assert tree.order.index(e.child) < tree.order.index(e.parent)
    assert [(e.parent, e.child) for e in tree.path_to(2)] == [(0, 1), (1, 2)]
    assert tree.children(0) == [1, 3]
    assert sorted(tree.subtree(1)) == [1, 2]


def test_build_tree_requires_spanning_edges():
    with pytest.raises(TooFewParts):
        build_tree(3, [(0, 1)], 0)


def test_model_needs_two_parts():
    tree = build_tree(1, [], 0)
    with pytest.raises(TooFewParts):
        ArticulatedModel(parts=[PointCloud(np.zeros((3, 3)))], assembly=np.zeros((1, 3)), tree=tree)


def test_joint_validates_axis():
    with pytest.raises(BadAxis):
        Joint(JointKind.revolute, [0.0, 0.0, 2.0], [0.0, 0.0, 0.0], 0, 1)


def test_forward_at_rest_is_the_assembled_shape(hinge_model):
    pose = ArticulatedPose(RigidTransform.identity(), {1: 0.0})
    _, Y = forward(hinge_model, pose)
    assert np.allclose(Y.points, hinge_model.assembled().points)
    assert Y.labels.tolist() == hinge_model.assembled().labels.tolist()


def test_forward_applies_hinge_about_its_line(hinge_model):
    angle = 0.8
    pose = ArticulatedPose(RigidTransform.identity(), {1: angle})
    transforms = part_transforms(hinge_model, pose)
    hinge = hinge_model.joint_for(1)
    expected = compose(rotation_about_line(hinge.axis, hinge.pivot, angle), RigidTransform.pure_translation(hinge_model.assembly[1]))
    assert np.allclose(transforms[1].as_matrix(), expected.as_matrix())
    assert np.allclose(transforms[0].translation, hinge_model.assembly[0])


def test_base_transform_moves_everything(hinge_model, rng):
    base = random_transform(rng)
    _, Y0 = forward(hinge_model, ArticulatedPose(RigidTransform.identity(), {1: 0.3}))
    _, Y1 = forward(hinge_model, ArticulatedPose(base, {1: 0.3}))
    assert np.allclose(base.apply(Y0.points), Y1.points)


def test_missing_joint_state(hinge_model):
    with pytest.raises(MissingJointState):
        articulations(hinge_model, {})
    with pytest.raises(MissingJointState):
        ArticulatedPose(RigidTransform.identity(), {}).state(1)


def test_chain_articulation_composes_parent_first():
    parts = [PointCloud(np.eye(3) * 0.1) for _ in range(3)]
    joints = [
        Joint(JointKind.revolute, [0.0, 0.0, 1.0], [0.0, 0.0, 0.0], 0, 1),
        Joint(JointKind.prismatic, [1.0, 0.0, 0.0], None, 1, 2),
    ]
    model = ArticulatedModel(parts=parts, assembly=np.zeros((3, 3)), tree=build_tree(3, [(0, 1), (1, 2)], 0), joints=joints)
    A = articulations(model, {1: math.pi / 2, 2: 1.0})
    # the slide axis turns with the parent
    assert np.allclose(A[2].apply(np.zeros((1, 3))), [[0.0, 1.0, 0.0]])
    assert [j.child for j in model.ordered_joints()] == [1, 2]


def test_within_limits(hinge_model):
    assert within_limits(hinge_model, ArticulatedPose(RigidTransform.identity(), {1: 0.5}))
    assert not within_limits(hinge_model, ArticulatedPose(RigidTransform.identity(), {1: 2.0}))


def test_joints_in_camera_follow_base(hinge_model, rng):
    base = random_transform(rng)
    joint = joints_in_camera(hinge_model, ArticulatedPose(base, {1: 0.4}))[0]
    rest = hinge_model.joint_for(1)
    assert np.allclose(joint.axis, base.rotation @ rest.axis)
    assert np.allclose(joint.pivot, base.apply(rest.pivot))


def _exhaustive_best(W):
    n = W.shape[0]
    edges = list(itertools.combinations(range(n), 2))
    best, best_tree = -math.inf, None
    for subset in itertools.combinations(edges, n - 1):
        uf = UnionFind(n)
        if all(uf.union(a, b) for a, b in subset):
            weight = sum(W[a, b] for a, b in subset)
            if weight > best:
                best, best_tree = weight, sorted(subset)
    return best_tree


def test_maximum_spanning_tree_matches_enumeration(rng):
    for _ in range(60):
        n = int(rng.integers(2, 6))
        W = np.triu(rng.uniform(size=(n, n)), 1)
        W = W + W.T
        assert maximum_spanning_tree(W) == _exhaustive_best(W)


def test_infer_chain_links_touching_parts():
    a = PointCloud(np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]))
    b = PointCloud(np.array([[0.12, 0.0, 0.0], [0.3, 0.0, 0.0]]))
    c = PointCloud(np.array([[0.32, 0.0, 0.0], [0.5, 0.0, 0.0]]))
    tree = infer_chain([a, b, c])
    assert {(e.parent, e.child) for e in tree.edges} == {(1, 0), (1, 2)}
    assert tree.root == 1


def test_infer_chain_needs_two_parts():
    with pytest.raises(TooFewParts):
        infer_chain([PointCloud(np.zeros((2, 3)))])


def test_estimate_revolute_joint_from_motion(rng):
    axis = np.array([0.0, 0.6, 0.8])
    pivot = np.array([0.1, -0.2, 0.3])
    a = random_transform(rng)
    b = compose(rotation_about_line(axis, pivot, 0.5), a)
    found_axis, found_pivot = estimate_joint_from_motion(a, b, "revolute")
    assert np.allclose(np.abs(found_axis @ axis), 1.0)
    # the recovered pivot lies on the true line
    offset = found_pivot - pivot
    assert np.linalg.norm(offset - (offset @ axis) * axis) < 1e-9


def test_estimate_prismatic_joint_from_motion(rng):
    a = random_transform(rng)
    b = compose(RigidTransform.pure_translation([0.0, 0.0, 0.2]), a)
    axis, pivot = estimate_joint_from_motion(a, b, JointKind.prismatic)
    assert np.allclose(axis, [0.0, 0.0, 1.0])
    assert pivot is None


def test_small_rotation_is_degenerate(rng):
    a = random_transform(rng)
    b = compose(rotation_about_line([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], math.radians(0.5)), a)
    with pytest.raises(DegenerateMotion):
        estimate_joint_from_motion(a, b, "revolute")
    with pytest.raises(DegenerateMotion):
        estimate_joint_from_motion(a, a, "prismatic")


def test_unify_axes_shares_one_line_direction():
    joints = [
        Joint(JointKind.revolute, [0.0, 1.0, 0.0], [0.0, 0.0, 0.0], 0, 1),
        Joint(JointKind.revolute, [0.0, -1.0, 0.0], [1.0, 0.0, 0.0], 0, 2),
    ]
    unified = unify_axes(joints)
    assert np.allclose(unified[0].axis, [0.0, 1.0, 0.0])
    assert np.allclose(unified[1].axis, [0.0, -1.0, 0.0])
    assert np.allclose(np.abs(unified[0].axis @ unified[1].axis), 1.0)
