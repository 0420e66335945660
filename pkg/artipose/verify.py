"""Property suite behind `artipose verify`.

Each check returns a VerifyCheckOut; the suite never raises on a failed
property, the CLI turns `passed=False` into exit code 4.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from collections.abc import Callable

import numpy as np
from scipy.spatial.transform import Rotation

from artipose.cloud import PointCloud, miou, miou_exhaustive
from artipose.equivconv import EquivariantFeature, epn_conv, make_kernel, verify_part_level
from artipose.kinematics import (
    ArticulatedModel,
    ArticulatedPose,
    Joint,
    JointKind,
    UnionFind,
    build_tree,
    forward,
    maximum_spanning_tree,
)
from artipose.losses import ParamLayout, apply_step, freeze, rec_loss, surrogate, surrogate_grad
from artipose.rotgroup import RotationGroup, act_on_feature_axis, get_group, quantize_many
from artipose.schemas import VerifyCheckOut, VerifySummaryOut
from artipose.se3 import RigidTransform, geodesic_deg, line_distance, random_transform

logger = logging.getLogger("artipose.verify")

NEGATIVE_CONTROL_MARGIN = 1e3
FD_STEP = 1e-6
FD_REL_TOL = 1e-4


def check_group_laws(group: RotationGroup) -> VerifyCheckOut:
    G = group.order
    C = group.cayley
    closure = bool(np.all((C >= 0) & (C < G)))
    identity = bool(np.array_equal(C[0], np.arange(G)) and np.array_equal(C[:, 0], np.arange(G)))
    inverses = bool(np.all(C[np.arange(G), group.inverse] == 0) and np.all(C[group.inverse, np.arange(G)] == 0))
    # (a b) c == a (b c) for every triple, as index arithmetic on the table
    assoc = bool(np.array_equal(C[C, :], C[:, C]))
    products = np.einsum("aij,bjk->abik", group.matrices, group.matrices)
    matrix_err = float(np.abs(products - group.matrices[C]).max())
    passed = closure and identity and inverses and assoc and matrix_err < 1e-12
    return VerifyCheckOut(
        name="group_laws",
        passed=passed,
        value=matrix_err,
        tol=1e-12,
        details={"order": G, "closure": closure, "identity": identity, "inverses": inverses, "associative": assoc},
    )


def check_quantize(group: RotationGroup, samples: int = 1000, seed: int = 0) -> VerifyCheckOut:
    rotations = Rotation.random(samples, random_state=np.random.default_rng(seed)).as_matrix()
    fast = quantize_many(group, rotations)
    angles = np.array([[geodesic_deg(g, R) for g in group.matrices] for R in rotations])
    brute = np.argmin(angles, axis=1)
    # equal distance counts as agreement
    gap = float(np.abs(angles[np.arange(samples), fast] - angles[np.arange(samples), brute]).max())
    return VerifyCheckOut(name="quantize_brute_force", passed=gap < 1e-6, value=gap, tol=1e-6, details={"samples": samples})


def check_global_equivariance(group: RotationGroup, tol: float, points: int = 128, seed: int = 0, jobs: int = 1, dtype=np.float64) -> VerifyCheckOut:
    rng = np.random.default_rng(seed)
    X = PointCloud(rng.uniform(-0.5, 0.5, size=(points, 3)))
    k = make_kernel(3, 4, 0.4, seed=seed, dtype=dtype)
    F = EquivariantFeature(rng.standard_normal((points, 3, group.order)).astype(dtype), group)
    base = epn_conv(X, F, k, 0.4, jobs=jobs)
    worst = 0.0
    for a in range(group.order):
        rotated = PointCloud(X.points @ group.matrices[a].T)
        out = epn_conv(rotated, act_on_feature_axis(group, a, F), k, 0.4, jobs=jobs)
        expected = act_on_feature_axis(group, a, base)
        worst = max(worst, float(np.abs(out.values - expected.values).max()))
    return VerifyCheckOut(name="global_equivariance", passed=worst <= tol, value=worst, tol=tol, details={"points": points})


def _two_part_cloud(rng: np.random.Generator, per_part: int = 64) -> tuple[PointCloud, list[RigidTransform]]:
    a = rng.uniform(-0.2, 0.2, size=(per_part, 3)) + np.array([-0.25, 0.0, 0.0])
    b = rng.uniform(-0.2, 0.2, size=(per_part, 3)) + np.array([0.25, 0.0, 0.0])
    labels = np.repeat([0, 1], per_part)
    return PointCloud(np.concatenate([a, b]), labels), [RigidTransform.identity(), RigidTransform.identity()]


def check_part_level(group: RotationGroup, tol: float, trials: int = 20, seed: int = 0, jobs: int = 1) -> list[VerifyCheckOut]:
    X, poses = _two_part_cloud(np.random.default_rng(seed))
    tracked = verify_part_level(X, poses, trials, tol, group, seed=seed, jobs=jobs)
    control = verify_part_level(X, poses, trials, tol, group, seed=seed, feed="identity", motion_deg=30.0, jobs=jobs)
    margin = control.max_invariance_violation / max(tol, 1e-300)
    return [
        VerifyCheckOut(name="part_invariance", passed=tracked.max_invariance_violation <= tol, value=tracked.max_invariance_violation, tol=tol),
        VerifyCheckOut(name="part_equivariance", passed=tracked.max_equivariance_violation <= tol, value=tracked.max_equivariance_violation, tol=tol),
        VerifyCheckOut(
            name="negative_control",
            passed=margin >= NEGATIVE_CONTROL_MARGIN,
            value=control.max_invariance_violation,
            tol=tol * NEGATIVE_CONTROL_MARGIN,
            details={"margin": margin},
        ),
    ]


def random_model(rng: np.random.Generator, points: int = 40) -> ArticulatedModel:
    """Three-part chain 0-1-2 with one revolute and one prismatic joint."""
    parts = [PointCloud(rng.uniform(-0.1, 0.1, size=(points, 3))) for _ in range(3)]
    assembly = np.array([[0.0, 0.0, 0.0], [0.25, 0.0, 0.0], [0.5, 0.0, 0.0]])
    axis = rng.standard_normal(3)
    slide = rng.standard_normal(3)
    joints = [
        Joint(JointKind.revolute, axis / np.linalg.norm(axis), np.array([0.12, 0.0, 0.0]), 0, 1),
        Joint(JointKind.prismatic, slide / np.linalg.norm(slide), None, 1, 2),
    ]
    tree = build_tree(3, [(0, 1), (1, 2)], 0)
    return ArticulatedModel(parts=parts, assembly=assembly, tree=tree, joints=joints)


def check_gradient(instances: int = 20, seed: int = 0) -> VerifyCheckOut:
    """Analytic gradient of the frozen surrogate against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        model = random_model(rng)
        pose = ArticulatedPose(random_transform(rng, 0.1), {1: float(rng.uniform(0.1, 1.2)), 2: float(rng.uniform(0.0, 0.2))})
        _, truth = forward(model, ArticulatedPose(random_transform(rng, 0.1), {1: 0.5, 2: 0.1}))
        X = PointCloud(truth.points + rng.normal(0.0, 0.01, size=truth.points.shape))
        corr = freeze(X, model, pose, lam=1.0, K_v=8, half_len=0.1)
        _, grad, _ = surrogate_grad(X, model, pose, corr)
        layout = ParamLayout.for_model(model)
        fd = np.zeros(layout.size)
        for i in range(layout.size):
            step = np.zeros(layout.size)
            step[i] = FD_STEP
            plus = surrogate(X, *apply_step(model, pose, step), corr)
            minus = surrogate(X, *apply_step(model, pose, -step), corr)
            fd[i] = (plus - minus) / (2.0 * FD_STEP)
        rel = float(np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
        worst = max(worst, rel)
    return VerifyCheckOut(name="gradient_fd", passed=worst < FD_REL_TOL, value=worst, tol=FD_REL_TOL, details={"instances": instances})


def check_min_of_n(group: RotationGroup, seed: int = 0) -> VerifyCheckOut:
    rng = np.random.default_rng(seed)
    model = random_model(rng)
    _, X = forward(model, ArticulatedPose(random_transform(rng, 0.0), {1: 0.4, 2: 0.1}))
    hyps = [ArticulatedPose(RigidTransform(R), {1: 0.4, 2: 0.1}) for R in group.matrices]
    report = rec_loss(X, model, hyps)
    slack = float(min(report.per_g_loss) - report.L_rec)
    return VerifyCheckOut(name="min_of_n", passed=slack >= 0.0 and report.L_rec == report.per_g_loss[report.g0], value=slack, tol=0.0)


def _exhaustive_mst_weight(weights: np.ndarray) -> float:
    n = weights.shape[0]
    edges = list(itertools.combinations(range(n), 2))
    best = -math.inf
    for subset in itertools.combinations(edges, n - 1):
        uf = UnionFind(n)
        if all(uf.union(a, b) for a, b in subset):
            best = max(best, sum(weights[a, b] for a, b in subset))
    return best


def check_mst(cases: int = 200, seed: int = 0) -> VerifyCheckOut:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(2, 6))
        W = rng.uniform(0.0, 1.0, size=(n, n))
        W = np.triu(W, 1) + np.triu(W, 1).T
        tree = maximum_spanning_tree(W)
        worst = max(worst, abs(sum(W[a, b] for a, b in tree) - _exhaustive_mst_weight(W)))
    return VerifyCheckOut(name="mst_oracle", passed=worst < 1e-12, value=worst, tol=1e-12, details={"cases": cases})


def check_metric_oracles(seed: int = 0) -> VerifyCheckOut:
    rng = np.random.default_rng(seed)
    skew = abs(line_distance([0, 0, 1], [0, 0, 0], [1, 0, 0], [0, 1, 0]) - 1.0)
    worst_miou = 0.0
    for _ in range(50):
        K = int(rng.integers(2, 6))
        n = int(rng.integers(5, 60))
        pred, gt = rng.integers(0, K, size=n), rng.integers(0, K, size=n)
        worst_miou = max(worst_miou, abs(miou(pred, gt, K) - miou_exhaustive(pred, gt, K)))
    worst = max(skew, worst_miou)
    return VerifyCheckOut(name="metric_oracles", passed=worst < 1e-12, value=worst, tol=1e-12, details={"skew_line": skew, "miou": worst_miou})


def run_suite(group_kind: str, tol: float, seed: int = 0, jobs: int = 1, dtype=np.float64) -> VerifySummaryOut:
    group = get_group(group_kind)
    steps: list[Callable[[], VerifyCheckOut | list[VerifyCheckOut]]] = [
        lambda: check_group_laws(group),
        lambda: check_quantize(group, seed=seed),
        lambda: check_global_equivariance(group, tol, seed=seed, jobs=jobs, dtype=dtype),
        lambda: check_part_level(group, tol, seed=seed, jobs=jobs),
        lambda: check_min_of_n(group, seed=seed),
        lambda: check_gradient(seed=seed),
        lambda: check_mst(seed=seed),
        lambda: check_metric_oracles(seed=seed),
    ]
    checks: list[VerifyCheckOut] = []
    for step in steps:
        started = time.perf_counter()
        result = step()
        for check in result if isinstance(result, list) else [result]:
            logger.info("check done name=%s passed=%s value=%.3g seconds=%.2f", check.name, check.passed, check.value or 0.0, time.perf_counter() - started)
            checks.append(check)
    return VerifySummaryOut(passed=all(c.passed for c in checks), group=group.kind.value, tol=tol, checks=checks)
