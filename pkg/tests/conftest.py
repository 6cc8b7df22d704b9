import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from kitro.skeleton import BodyState, KinematicTree, SkeletonModel, default_skeleton


@pytest.fixture(scope="session")
def model():
    return default_skeleton()


def random_rotations(n: int, seed: int) -> np.ndarray:
    """Independent uniform random rotation matrices (scipy, not kitro)."""
    return Rotation.random(n, random_state=seed).as_matrix()


def random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def chain_skeleton(n_joints: int, spacing: float = 0.3,
                   n_coeffs: int = 2) -> SkeletonModel:
    """Straight single-chain skeleton along +x with a simple stretch basis."""
    template = np.zeros((n_joints, 3))
    template[:, 0] = spacing * np.arange(n_joints)
    basis = np.zeros((n_joints, 3, n_coeffs))
    basis[:, 0, 0] = 0.05 * np.arange(n_joints)  # stretch the chain
    if n_coeffs > 1:
        basis[:, 1, 1] = 0.02  # shear everything upward
        basis[0, 1, 1] = 0.0
    return SkeletonModel(
        template_joints=template,
        shape_basis=basis,
        tree=KinematicTree([-1] + list(range(n_joints - 1))),
    )


def random_state(model: SkeletonModel, seed: int, beta_scale: float = 1.0,
                 depth: float = 4.0) -> BodyState:
    rng = np.random.default_rng(seed)
    theta = random_rotations(model.num_joints, seed)
    beta = np.clip(rng.standard_normal(model.num_shape_coeffs), -2, 2) * beta_scale
    trans = np.array([rng.normal(0, 0.1), rng.normal(0, 0.1), depth])
    return BodyState(theta=theta, beta=beta, trans=trans)
