import numpy as np
import pytest

from artipose.cloud import PointCloud
from artipose.kinematics import ArticulatedModel, Joint, JointKind, build_tree
from artipose.rotgroup import get_group
from artipose.services.synthdata import make_template


@pytest.fixture
def octahedral():
    return get_group("octahedral")


@pytest.fixture
def tetrahedral():
    return get_group("tetrahedral")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def box_lattice(extents, step):
    """Surface lattice of an origin-centred box."""
    half = np.asarray(extents, dtype=np.float64) / 2.0
    axes = [np.linspace(-h, h, max(3, int(np.ceil(2 * h / step)) + 1)) for h in half]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    on_surface = np.any(np.isclose(np.abs(grid), half), axis=1)
    return grid[on_surface]


@pytest.fixture
def hinge_model():
    """Two plates joined by a revolute hinge along x, plus a bump on each plate."""
    plate = box_lattice((0.6, 0.04, 0.4), 0.05)
    base = np.concatenate([plate, box_lattice((0.1, 0.06, 0.1), 0.05) + [0.2, 0.05, 0.1]])
    lid = np.concatenate([plate, box_lattice((0.1, 0.06, 0.1), 0.05) + [-0.2, 0.05, 0.1]])
    parts = [PointCloud(base - base.mean(axis=0)), PointCloud(lid - lid.mean(axis=0))]
    assembly = np.array([[0.0, 0.0, 0.0], [0.0, 0.06, 0.0]])
    hinge = Joint(JointKind.revolute, [1.0, 0.0, 0.0], [0.0, 0.03, -0.2], 0, 1, (0.0, np.pi / 2))
    return ArticulatedModel(parts=parts, assembly=assembly, tree=build_tree(2, [(0, 1)], 0), joints=[hinge])


@pytest.fixture
def laptop_template():
    return make_template("laptop", step=0.06)
