"""Finite rotation groups (tetrahedral, octahedral, icosahedral).

Elements are unit quaternions (w, x, y, z) in a canonical sign with the
identity at index 0. The Cayley table is built once by quaternion product
followed by nearest-element matching.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial.transform import Rotation

from artipose.errors import GroupConstructionError, GroupMismatch
from artipose.se3 import validate_rotation

if TYPE_CHECKING:
    from artipose.equivconv import EquivariantFeature

logger = logging.getLogger("artipose.rotgroup")

GroupElementId = int

MATCH_TOL_RAD = 1e-6
_PHI = (1.0 + math.sqrt(5.0)) / 2.0


class GroupKind(str, enum.Enum):
    tetrahedral = "tetrahedral"
    octahedral = "octahedral"
    icosahedral = "icosahedral"


GROUP_ORDER = {GroupKind.tetrahedral: 12, GroupKind.octahedral: 24, GroupKind.icosahedral: 60}

# Largest distance from any rotation to its nearest group element.
COVERING_RADIUS_DEG = {
    GroupKind.tetrahedral: 90.0,
    GroupKind.octahedral: 2.0 * math.degrees(math.atan(math.sqrt(23.0 - 16.0 * math.sqrt(2.0)))),
    GroupKind.icosahedral: 2.0 * math.degrees(math.acos(math.sqrt((1.0 + 3.0 * math.cos(math.pi / 5.0)) / 4.0))),
}


@dataclass(frozen=True, eq=False)
class RotationGroup:
    kind: GroupKind
    quaternions: np.ndarray  # (G, 4), scalar first
    matrices: np.ndarray  # (G, 3, 3)
    cayley: np.ndarray  # (G, G), cayley[a, b] = index of a∘b
    inverse: np.ndarray  # (G,)

    @property
    def order(self) -> int:
        return int(self.quaternions.shape[0])

    def compose(self, a: GroupElementId, b: GroupElementId) -> GroupElementId:
        return int(self.cayley[a, b])

    def permutation(self, g: GroupElementId) -> np.ndarray:
        """Group-axis index map of the feature action: out[..., k] = F[..., perm[k]]."""
        return self.cayley[:, g]

    def matrix(self, g: GroupElementId) -> np.ndarray:
        return self.matrices[g]


def _canonical_sign(q: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    q = np.where(np.abs(q) < tol, 0.0, q)
    nonzero = np.flatnonzero(q)
    if q[0] < 0 or (q[0] == 0 and q[nonzero[0]] < 0):
        q = -q
    return q + 0.0  # folds -0.0


def _signed_variants(base: tuple[float, ...]):
    nz = [i for i, v in enumerate(base) if v != 0]
    for signs in itertools.product((1.0, -1.0), repeat=len(nz)):
        q = np.array(base, dtype=np.float64)
        for i, s in zip(nz, signs):
            q[i] *= s
        yield q


def _is_even(perm: tuple[int, ...]) -> bool:
    inversions = sum(1 for i in range(len(perm)) for j in range(i + 1, len(perm)) if perm[i] > perm[j])
    return inversions % 2 == 0


def _raw_elements(kind: GroupKind) -> list[np.ndarray]:
    elements: list[np.ndarray] = []
    # tetrahedral core: ±1 on an axis and (±1/2, ±1/2, ±1/2, ±1/2)
    for i in range(4):
        base = [0.0] * 4
        base[i] = 1.0
        elements.extend(_signed_variants(tuple(base)))
    elements.extend(_signed_variants((0.5, 0.5, 0.5, 0.5)))

    if kind == GroupKind.octahedral:
        c = math.sqrt(0.5)
        for i, j in itertools.combinations(range(4), 2):
            base = [0.0] * 4
            base[i] = base[j] = c
            elements.extend(_signed_variants(tuple(base)))
    elif kind == GroupKind.icosahedral:
        values = (0.0, 0.5, 0.5 / _PHI, 0.5 * _PHI)
        for perm in itertools.permutations(range(4)):
            if not _is_even(perm):
                continue
            base = tuple(values[perm[k]] for k in range(4))
            elements.extend(_signed_variants(base))
    return elements


def _dedupe_and_sort(elements: list[np.ndarray]) -> np.ndarray:
    seen: dict[tuple, np.ndarray] = {}
    for q in elements:
        q = _canonical_sign(q / np.linalg.norm(q))
        key = tuple(np.round(q, 9))
        seen.setdefault(key, q)
    ordered = sorted(seen.values(), key=lambda q: tuple(np.round(-q, 9)))
    return np.stack(ordered)


def _match(products: np.ndarray, quaternions: np.ndarray) -> np.ndarray:
    """Index of the nearest element for each product; fails on misses or ambiguity."""
    dots = np.abs(products @ quaternions.T)
    angles = 2.0 * np.arccos(np.clip(dots, -1.0, 1.0))
    order = np.argsort(angles, axis=1, kind="stable")
    best = order[:, 0]
    best_angle = angles[np.arange(len(best)), best]
    second_angle = angles[np.arange(len(best)), order[:, 1]]
    if best_angle.max() > MATCH_TOL_RAD:
        raise GroupConstructionError(
            "element list is not closed under composition",
            details={"worst_match_rad": float(best_angle.max())},
        )
    if second_angle.min() <= MATCH_TOL_RAD:
        raise GroupConstructionError("ambiguous element matching", details={"tol_rad": MATCH_TOL_RAD})
    return best


def build_group(kind: GroupKind | str) -> RotationGroup:
    kind = GroupKind(kind)
    quaternions = _dedupe_and_sort(_raw_elements(kind))
    G = quaternions.shape[0]
    if G != GROUP_ORDER[kind]:
        raise GroupConstructionError(
            "unexpected group order", details={"kind": kind.value, "order": G}
        )

    rotations = Rotation.from_quat(quaternions, scalar_first=True)
    left = Rotation.from_quat(np.repeat(quaternions, G, axis=0), scalar_first=True)
    right = Rotation.from_quat(np.tile(quaternions, (G, 1)), scalar_first=True)
    products = (left * right).as_quat(scalar_first=True)
    cayley = _match(products, quaternions).reshape(G, G)

    for row in cayley:
        if len(set(row.tolist())) != G:
            raise GroupConstructionError("cayley row is not a permutation", details={"kind": kind.value})
    inverse = np.argmin(cayley, axis=1)  # the identity has index 0
    if not np.all(cayley[np.arange(G), inverse] == 0):
        raise GroupConstructionError("missing inverse", details={"kind": kind.value})

    matrices = rotations.as_matrix()
    for arr in (quaternions, matrices, cayley, inverse):
        arr.setflags(write=False)
    logger.debug("group built kind=%s order=%d", kind.value, G)
    return RotationGroup(kind=kind, quaternions=quaternions, matrices=matrices, cayley=cayley, inverse=inverse)


@lru_cache(maxsize=None)
def get_group(kind: GroupKind | str) -> RotationGroup:
    return build_group(GroupKind(kind))


def quantize_many(group: RotationGroup, rotations: np.ndarray) -> np.ndarray:
    """Nearest element index for a stack of rotation matrices (no validation)."""
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    q = Rotation.from_matrix(rotations).as_quat(scalar_first=True)
    return np.argmax(np.abs(q @ group.quaternions.T), axis=1)


def quantize(group: RotationGroup, R: np.ndarray) -> tuple[GroupElementId, np.ndarray]:
    """Nearest group element g and the residual g⁻¹∘R. Ties go to the lowest index."""
    R = validate_rotation(R)
    g = int(quantize_many(group, R)[0])
    residual = group.matrices[g].T @ R
    return g, residual


def act_on_feature_axis(group: RotationGroup, g: GroupElementId, F: EquivariantFeature) -> EquivariantFeature:
    if F.group.kind != group.kind or F.values.shape[-1] != group.order:
        raise GroupMismatch(
            "feature group axis does not match the acting group",
            details={"feature_group": F.group.kind.value, "group": group.kind.value},
        )
    return replace(F, values=F.values[..., group.permutation(g)])
