import math

import numpy as np
import pytest

from artipose.cloud import PointCloud
from artipose.errors import LabelMismatch
from artipose.kinematics import ArticulatedPose, forward, part_transforms
from artipose.rotgroup import get_group
from artipose.se3 import RigidTransform, exp_so3, geodesic_deg, random_transform
from artipose.services.icp_baseline import icp, oracle_icp, register_part, rigid_fit
from artipose.services.synthdata import generate
from conftest import box_lattice


def _asymmetric_cloud(rng, n=300):
    return PointCloud(rng.uniform(size=(n, 3)) * [0.4, 0.2, 0.1])


def test_rigid_fit_recovers_exact_transform(rng):
    A = rng.standard_normal((30, 3))
    T = random_transform(rng)
    fitted = rigid_fit(A, T.apply(A))
    assert np.allclose(fitted.rotation, T.rotation)
    assert np.allclose(fitted.translation, T.translation)
    assert np.linalg.det(fitted.rotation) == pytest.approx(1.0)


def test_icp_from_the_truth_converges_immediately(rng):
    src = _asymmetric_cloud(rng)
    result = icp(src, src, RigidTransform.identity())
    assert result.inlier_rmse < 1e-9
    assert result.converged
    assert result.iterations_used <= 2


def test_icp_recovers_a_small_rotation(rng):
    src = _asymmetric_cloud(rng)
    T = RigidTransform(exp_so3([0.0, 0.0, math.radians(3.0)]), [0.01, -0.005, 0.0])
    result = icp(src, src.transformed(T), RigidTransform.identity(), max_iter=100)
    assert geodesic_deg(result.transform.rotation, T.rotation) < 1e-3
    assert np.allclose(result.transform.translation, T.translation, atol=1e-5)
    assert result.rmse_history[-1] <= result.rmse_history[0]


def test_icp_without_inliers_is_flagged(rng):
    src = _asymmetric_cloud(rng)
    far = src.transformed(RigidTransform.pure_translation([100.0, 0.0, 0.0]))
    result = icp(src, far, RigidTransform.identity(), inlier_r=0.05)
    assert result.no_inliers
    assert result.iterations_used == 0
    assert result.transform.is_identity()


def test_partial_mode_adds_translation_hypotheses(octahedral, rng):
    src = _asymmetric_cloud(rng, 80)
    _, full = register_part(src, src, octahedral)
    _, partial = register_part(src, src, octahedral, partial=True, max_iter=5)
    assert len(full) == octahedral.order
    assert len(partial) == 10 * octahedral.order


def test_oracle_icp_recovers_part_poses_of_asymmetric_parts(hinge_model, octahedral, rng):
    base = RigidTransform(exp_so3([0.1, -0.05, 0.12]) @ octahedral.matrices[9], [0.05, -0.02, 0.08])
    pose = ArticulatedPose(base, {1: 0.6})
    _, observed = forward(hinge_model, pose)
    template = PointCloud.concat(hinge_model.parts)
    result = oracle_icp(template, observed, octahedral)
    for found, truth in zip(result.transforms, part_transforms(hinge_model, pose)):
        assert geodesic_deg(found.rotation, truth.rotation) < 1e-3
        assert np.allclose(found.translation, truth.translation, atol=1e-5)
    assert np.mean(result.labels == observed.labels) > 0.95
    assert result.templates_used == [0, 0]
    assert len(result.hypothesis_rmse[0]) == octahedral.order


def test_symmetric_box_is_ambiguous_up_to_its_symmetry():
    icosahedral = get_group("icosahedral")
    box = PointCloud(box_lattice((0.4, 0.2, 0.1), 0.05))
    flipped = []
    for seed in range(20):
        T = random_transform(np.random.default_rng(seed))
        best, _ = register_part(box, box.transformed(T), icosahedral, seed=seed)
        flipped.append(best.inlier_rmse < 1e-6 and geodesic_deg(best.transform.rotation, T.rotation) > 90.0)
    # an exact fit that is a box symmetry away from the truth
    assert any(flipped)


def test_oracle_icp_on_synthetic_laptops(laptop_template):
    icosahedral = get_group("icosahedral")
    errors = []
    for sample in generate(laptop_template, 2, 2, seed=7):
        template = PointCloud.concat(sample.model.parts)
        result = oracle_icp(template, sample.cloud, icosahedral)
        errors.extend(geodesic_deg(f.rotation, t.rotation) for f, t in zip(result.transforms, sample.transforms))
    assert np.mean(errors) < 5.0


def test_best_template_is_chosen_per_part(hinge_model, octahedral):
    pose = ArticulatedPose(RigidTransform.identity(), {1: 0.4})
    _, observed = forward(hinge_model, pose)
    good = PointCloud.concat(hinge_model.parts)
    squashed = PointCloud.concat([PointCloud(p.points * [1.0, 1.0, 0.5]) for p in hinge_model.parts])
    result = oracle_icp([squashed, good], observed, octahedral)
    assert result.templates_used == [1, 1]


def test_oracle_icp_part_count_must_match(hinge_model, octahedral):
    _, observed = forward(hinge_model, ArticulatedPose(RigidTransform.identity(), {1: 0.2}))
    three = PointCloud.concat(hinge_model.parts + [hinge_model.parts[0]])
    with pytest.raises(LabelMismatch):
        oracle_icp(three, observed, octahedral)
