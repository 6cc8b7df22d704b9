"""Parametric kinematic skeleton: rest joints, bone lengths, forward kinematics.

The body is modeled as joints only: a template joint table plus a linear
10-component shape basis, articulated by per-joint relative rotations over a
fixed parent/child tree. The bundled canonical skeleton follows the common
24-joint body convention (Pelvis = 0 ... R_Hand = 23, 23 bones).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

NUM_SHAPE_COEFFS = 10

CANONICAL_JOINT_NAMES = [
    "Pelvis", "L_Hip", "R_Hip", "Spine1", "L_Knee", "R_Knee", "Spine2",
    "L_Ankle", "R_Ankle", "Spine3", "L_Foot", "R_Foot", "Neck", "L_Collar",
    "R_Collar", "Head", "L_Shoulder", "R_Shoulder", "L_Elbow", "R_Elbow",
    "L_Wrist", "R_Wrist", "L_Hand", "R_Hand",
]

CANONICAL_PARENTS = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17,
    18, 19, 20, 21,
]

# Rest pose: y up, x to the body's left, z forward; pelvis at the origin.
# Arms extended along x (T pose). Units are meters, ~1.7 m stature.
_CANONICAL_TEMPLATE = [
    (0.000, 0.000, 0.000),    # Pelvis
    (0.090, -0.060, 0.000),   # L_Hip
    (-0.090, -0.060, 0.000),  # R_Hip
    (0.000, 0.110, -0.010),   # Spine1
    (0.100, -0.480, 0.000),   # L_Knee
    (-0.100, -0.480, 0.000),  # R_Knee
    (0.000, 0.240, -0.020),   # Spine2
    (0.105, -0.880, -0.020),  # L_Ankle
    (-0.105, -0.880, -0.020), # R_Ankle
    (0.000, 0.300, -0.010),   # Spine3
    (0.110, -0.940, 0.100),   # L_Foot
    (-0.110, -0.940, 0.100),  # R_Foot
    (0.000, 0.470, -0.020),   # Neck
    (0.070, 0.400, -0.010),   # L_Collar
    (-0.070, 0.400, -0.010),  # R_Collar
    (0.000, 0.580, 0.020),    # Head
    (0.170, 0.440, -0.010),   # L_Shoulder
    (-0.170, 0.440, -0.010),  # R_Shoulder
    (0.430, 0.440, -0.010),   # L_Elbow
    (-0.430, 0.440, -0.010),  # R_Elbow
    (0.680, 0.440, -0.010),   # L_Wrist
    (-0.680, 0.440, -0.010),  # R_Wrist
    (0.780, 0.440, -0.010),   # L_Hand
    (-0.780, 0.440, -0.010),  # R_Hand
]

_ORTHONORMALITY_TOL = 1e-9
_FK_ROTATION_TOL = 1e-6


class KinematicTree:
    """Fixed parent/child joint hierarchy rooted at joint 0.

    `parents[j]` is the parent index of joint j, with -1 marking the root.
    The tree must be connected and acyclic with the root at index 0.
    """

    def __init__(self, parents):
        parents = np.asarray(parents, dtype=int)
        if parents.ndim != 1 or parents.size < 2:
            raise ValueError("parents must be a flat array of at least 2 joints")
        if parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        if np.count_nonzero(parents == -1) != 1:
            raise ValueError("exactly one root joint is required")
        n = parents.size
        for j in range(1, n):
            p = parents[j]
            if not 0 <= p < n:
                raise ValueError(f"joint {j} has out-of-range parent {p}")
        # Connectivity / acyclicity: every joint must reach the root.
        for j in range(n):
            seen = set()
            k = j
            while k != 0:
                if k in seen:
                    raise ValueError(f"cycle detected at joint {j}")
                seen.add(k)
                k = int(parents[k])
        self.parents = parents
        self.parents.flags.writeable = False
        self.num_joints = n
        self._children = [[] for _ in range(n)]
        for j in range(1, n):
            self._children[int(parents[j])].append(j)
        self.bone_list = [(int(parents[c]), c) for c in range(1, n)]

    @property
    def num_bones(self) -> int:
        return self.num_joints - 1

    def parent_of(self, j: int) -> int | None:
        p = int(self.parents[j])
        return None if p < 0 else p

    def children_of(self, j: int) -> list[int]:
        return list(self._children[j])

    def chain_of(self, j: int) -> list[int]:
        """Joint indices from the root down to (and including) j."""
        chain = [j]
        while self.parents[chain[-1]] >= 0:
            chain.append(int(self.parents[chain[-1]]))
        return chain[::-1]

    def is_leaf(self, j: int) -> bool:
        return not self._children[j]


@dataclass
class SkeletonModel:
    """Template joints plus a linear shape basis over a kinematic tree.

    template_joints: (J, 3) rest positions in meters.
    shape_basis: (J, 3, K) displacement per unit shape coefficient.
    """

    template_joints: np.ndarray
    shape_basis: np.ndarray
    tree: KinematicTree
    joint_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.template_joints = np.asarray(self.template_joints, dtype=float)
        self.shape_basis = np.asarray(self.shape_basis, dtype=float)
        n = self.tree.num_joints
        if self.template_joints.shape != (n, 3):
            raise ValueError(f"template_joints must be ({n}, 3)")
        if self.shape_basis.shape[:2] != (n, 3) or self.shape_basis.ndim != 3:
            raise ValueError(f"shape_basis must be ({n}, 3, K)")
        if not self.joint_names:
            self.joint_names = [f"joint_{j}" for j in range(n)]
        if len(self.joint_names) != n:
            raise ValueError("joint_names length mismatch")
        for p, c in self.tree.bone_list:
            if np.linalg.norm(self.template_joints[c] - self.template_joints[p]) <= 0.0:
                raise ValueError(f"template bone ({p},{c}) has zero length")
        self.template_joints.flags.writeable = False
        self.shape_basis.flags.writeable = False

    @property
    def num_joints(self) -> int:
        return self.tree.num_joints

    @property
    def num_shape_coeffs(self) -> int:
        return self.shape_basis.shape[2]


class BodyState:
    """Pose rotations, shape coefficients, and camera translation of one body.

    `theta_ref` freezes the rotations passed at construction and is never
    touched by refinement; it serves as the prior that scores direction
    hypotheses.
    """

    def __init__(self, theta, beta, trans, theta_ref=None):
        self.theta = np.array(theta, dtype=float)
        self.beta = np.array(beta, dtype=float)
        self.trans = np.array(trans, dtype=float)
        if self.theta.ndim != 3 or self.theta.shape[1:] != (3, 3):
            raise ValueError("theta must be (J, 3, 3)")
        if self.trans.shape != (3,):
            raise ValueError("trans must be a 3-vector")
        _check_rotations(self.theta, _ORTHONORMALITY_TOL)
        if theta_ref is None:
            theta_ref = self.theta.copy()
        else:
            theta_ref = np.array(theta_ref, dtype=float)
        theta_ref.flags.writeable = False
        self.theta_ref = theta_ref

    @property
    def num_joints(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "BodyState":
        dup = BodyState.__new__(BodyState)
        dup.theta = self.theta.copy()
        dup.beta = self.beta.copy()
        dup.trans = self.trans.copy()
        dup.theta_ref = self.theta_ref  # frozen, safe to share
        return dup


def _check_rotations(rots: np.ndarray, tol: float) -> None:
    gram = np.einsum("jab,jac->jbc", rots, rots)
    eye = np.eye(3)
    err = np.abs(gram - eye).max()
    if err > tol:
        raise ValueError(f"rotation fails orthonormality by {err:.3e} (tol {tol:.0e})")
    dets = np.linalg.det(rots)
    if np.abs(dets - 1.0).max() > max(tol, 1e-9):
        raise ValueError("rotation determinant differs from +1")


def rest_joints(model: SkeletonModel, beta) -> np.ndarray:
    """Rest-pose joints for shape coefficients beta: template + basis blend."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (model.num_shape_coeffs,):
        raise ValueError(f"beta must have {model.num_shape_coeffs} entries")
    return model.template_joints + model.shape_basis @ beta


def bone_length_3d(model: SkeletonModel, beta, bone: tuple[int, int]) -> float:
    """Rest-pose length of one (parent, child) bone.

    Pure rotations preserve rest offsets under forward kinematics, so the
    rest-pose length equals the posed length for any theta.
    """
    p, c = bone
    if (p, c) not in model.tree.bone_list:
        raise ValueError(f"({p},{c}) is not a bone of this tree")
    rest = rest_joints(model, beta)
    return float(np.linalg.norm(rest[c] - rest[p]))


def bone_lengths(model: SkeletonModel, beta) -> np.ndarray:
    """Lengths of all bones, ordered like tree.bone_list."""
    rest = rest_joints(model, beta)
    pairs = np.asarray(model.tree.bone_list, dtype=int)
    return np.linalg.norm(rest[pairs[:, 1]] - rest[pairs[:, 0]], axis=1)


def forward_kinematics(model: SkeletonModel, state: BodyState):
    """World-space joints and absolute rotations from relative rotations.

    Returns (positions (J, 3), abs_rots (J, 3, 3)) in the body frame; camera
    translation is not applied. The root stays at its rest position and each
    absolute rotation is the ordered product of relative rotations along the
    chain from the root.
    """
    if state.theta.shape[0] != model.num_joints:
        raise ValueError("state/model joint count mismatch")
    _check_rotations(state.theta, _FK_ROTATION_TOL)
    rest = rest_joints(model, state.beta)
    return _fk(rest, state.theta, model.tree)


def _fk(rest: np.ndarray, theta: np.ndarray, tree: KinematicTree):
    n = tree.num_joints
    pos = np.empty((n, 3))
    abs_rots = np.empty((n, 3, 3))
    pos[0] = rest[0]
    abs_rots[0] = theta[0]
    for c in range(1, n):
        p = int(tree.parents[c])
        abs_rots[c] = abs_rots[p] @ theta[c]
        pos[c] = pos[p] + abs_rots[p] @ (rest[c] - rest[p])
    return pos, abs_rots


def absolute_rotations(theta: np.ndarray, tree: KinematicTree) -> np.ndarray:
    """Per-joint absolute rotations (chain products of relative rotations)."""
    n = tree.num_joints
    abs_rots = np.empty((n, 3, 3))
    abs_rots[0] = theta[0]
    for c in range(1, n):
        abs_rots[c] = abs_rots[int(tree.parents[c])] @ theta[c]
    return abs_rots


def fk_shape_linearization(model: SkeletonModel, theta: np.ndarray):
    """Linearize FK positions as an affine function of beta at fixed theta.

    positions(beta) = base + sensitivity @ beta, exactly (FK is affine in the
    rest joints and the rest joints are affine in beta).

    Returns (base (J, 3), sensitivity (J, 3, K), abs_rots (J, 3, 3)).
    """
    tree = model.tree
    n = tree.num_joints
    abs_rots = absolute_rotations(theta, tree)
    base = np.empty((n, 3))
    sens = np.empty((n, 3, model.num_shape_coeffs))
    base[0] = model.template_joints[0]
    sens[0] = model.shape_basis[0]
    for c in range(1, n):
        p = int(tree.parents[c])
        base[c] = base[p] + abs_rots[p] @ (model.template_joints[c] - model.template_joints[p])
        sens[c] = sens[p] + abs_rots[p] @ (model.shape_basis[c] - model.shape_basis[p])
    return base, sens, abs_rots


def _canonical_shape_basis(template: np.ndarray) -> np.ndarray:
    """Deterministic 10-component basis with interpretable body variations.

    Every component is orthogonalized against uniform scaling of the
    template: a shape change must redistribute proportions, never resize the
    whole skeleton, so body shape cannot trade off against camera depth under
    projection.
    """
    basis = np.zeros((24, 3, NUM_SHAPE_COEFFS))
    x, y = 0, 1
    z = 2
    legs = [4, 5, 7, 8, 10, 11]
    leg_all = [1, 2] + legs
    arms = [16, 17, 18, 19, 20, 21, 22, 23]
    upper = [3, 6, 9, 12, 13, 14, 15] + arms
    sign_x = np.sign(template[:, x])

    for j in upper:                                       # upper/lower ratio
        basis[j, :, 0] = 0.075 * template[j]
    for j in leg_all:
        basis[j, :, 0] = -0.075 * template[j]
    for j in legs:                                        # leg length
        basis[j, y, 1] = 0.10 * template[j, y]
    for j in arms:                                        # arm span
        basis[j, x, 2] = 0.10 * template[j, x]
    for j in upper:                                       # torso height
        basis[j, y, 3] = 0.125 * template[j, y]
    for j in [13, 14] + arms:                             # shoulder width
        basis[j, x, 4] = 0.06 * sign_x[j]
    for j in leg_all:                                     # hip width
        basis[j, x, 5] = 0.05 * sign_x[j]
    basis[12, y, 6] = 0.020                               # neck/head height
    basis[15, y, 6] = 0.045
    for j in (10, 11):                                    # foot reach
        basis[j, z, 7] = 0.050
    for j in (22, 23):                                    # hand reach
        basis[j, x, 8] = 0.010 * sign_x[j]
    for j, amount in ((3, 0.010), (6, 0.020), (9, 0.015), (12, 0.005)):
        basis[j, z, 9] = amount                           # spine curvature

    scale_dir = template.reshape(-1)
    norm_sq = scale_dir @ scale_dir
    for k in range(NUM_SHAPE_COEFFS):
        comp = basis[:, :, k].reshape(-1)
        comp -= (comp @ scale_dir) / norm_sq * scale_dir
        basis[:, :, k] = comp.reshape(24, 3)
    return basis


@lru_cache(maxsize=1)
def default_skeleton() -> SkeletonModel:
    """The bundled canonical 24-joint skeleton."""
    template = np.array(_CANONICAL_TEMPLATE, dtype=float)
    return SkeletonModel(
        template_joints=template,
        shape_basis=_canonical_shape_basis(template),
        tree=KinematicTree(CANONICAL_PARENTS),
        joint_names=list(CANONICAL_JOINT_NAMES),
    )


def save_skeleton(model: SkeletonModel, path) -> None:
    """Write a skeleton model to JSON (lengths in meters).

    Schema: template_joints (J x 3), shape_basis (K stacked J x 3 arrays),
    parents (J ints, root -1), joint_names (J strings).
    """
    payload = {
        "template_joints": model.template_joints.tolist(),
        "shape_basis": [model.shape_basis[:, :, k].tolist()
                        for k in range(model.num_shape_coeffs)],
        "parents": model.tree.parents.tolist(),
        "joint_names": list(model.joint_names),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_skeleton(path) -> SkeletonModel:
    """Read a skeleton model from the JSON schema written by save_skeleton."""
    payload = json.loads(Path(path).read_text())
    stacked = np.asarray(payload["shape_basis"], dtype=float)
    if stacked.ndim != 3:
        raise ValueError("shape_basis must be a list of J x 3 arrays")
    return SkeletonModel(
        template_joints=np.asarray(payload["template_joints"], dtype=float),
        shape_basis=np.moveaxis(stacked, 0, 2),
        tree=KinematicTree(payload["parents"]),
        joint_names=list(payload["joint_names"]),
    )
