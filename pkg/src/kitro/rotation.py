"""Rotation utilities: Rodrigues formula, swing-twist split, optimal alignment.

The swing of a joint rotation reorients its bone (2 DoF, axis perpendicular
to the bone); the twist spins about the bone axis itself (1 DoF). Refinement
edits only swings, so everything here is built from direction pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AmbiguousAxisError, NumericalDegradationError

_PARALLEL_TOL = 1e-12
_UNIT_TOL = 1e-9


@dataclass
class SwingTwist:
    """Decomposition rot = swing @ twist about a reference bone direction."""

    swing: np.ndarray
    twist: np.ndarray
    twist_angle: float


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rodrigues(axis, angle: float) -> np.ndarray:
    """Rotation matrix for a unit axis and angle: I + sin K + (1-cos) K^2."""
    axis = np.asarray(axis, dtype=float)
    if abs(np.linalg.norm(axis) - 1.0) > _UNIT_TOL:
        raise ValueError("rotation axis must be a unit vector")
    k = _skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _perpendicular_axis(v: np.ndarray) -> np.ndarray:
    # Smallest-index basis vector not parallel to v, crossed in.
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        cand = np.cross(e, v)
        n = np.linalg.norm(cand)
        if n > _PARALLEL_TOL:
            return cand / n
    raise ValueError("zero vector has no perpendicular")


def swing_between(from_dir, to_dir, resolve_antiparallel: bool = False) -> np.ndarray:
    """Minimal rotation mapping from_dir onto to_dir (axis perpendicular to both).

    Parallel inputs give the identity. Antiparallel inputs have no unique axis
    and raise AmbiguousAxisError unless resolve_antiparallel is set, in which
    case a deterministic perpendicular axis is used for the half-turn.
    """
    f = np.asarray(from_dir, dtype=float)
    t = np.asarray(to_dir, dtype=float)
    fn, tn = np.linalg.norm(f), np.linalg.norm(t)
    if fn <= 0.0 or tn <= 0.0:
        raise ValueError("directions must be nonzero")
    f, t = f / fn, t / tn
    cross = np.cross(f, t)
    sin = np.linalg.norm(cross)
    cos = float(f @ t)
    if sin < _PARALLEL_TOL:
        if cos >= 0.0:
            return np.eye(3)
        if not resolve_antiparallel:
            raise AmbiguousAxisError("antiparallel directions: swing axis is ambiguous")
        return rodrigues(_perpendicular_axis(f), np.pi)
    return rodrigues(cross / sin, np.arctan2(sin, cos))


def swing_twist_decompose(rot, t_r) -> SwingTwist:
    """Split rot into swing (reorients t_r) and twist (about t_r).

    swing = swing_between(t_r, rot @ t_r) and twist = swing.T @ rot, so the
    product reconstructs rot. Raises AmbiguousAxisError when rot turns t_r
    onto its exact opposite.
    """
    rot = np.asarray(rot, dtype=float)
    t_r = np.asarray(t_r, dtype=float)
    if abs(np.linalg.norm(t_r) - 1.0) > _UNIT_TOL:
        raise ValueError("t_r must be a unit vector")
    swing = swing_between(t_r, rot @ t_r)
    twist = swing.T @ rot
    # Twist angle about t_r from the skew part and trace of the twist matrix.
    w = np.array([
        twist[2, 1] - twist[1, 2],
        twist[0, 2] - twist[2, 0],
        twist[1, 0] - twist[0, 1],
    ]) / 2.0
    sin = float(w @ t_r)
    cos = (np.trace(twist) - 1.0) / 2.0
    return SwingTwist(swing=swing, twist=twist, twist_angle=float(np.arctan2(sin, cos)))


def rotation_cosine(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic cosine between two rotations: (trace(r1.T r2) - 1) / 2 in [-1, 1]."""
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.clip(c, -1.0, 1.0))


def best_rotation_multi(from_dirs, to_dirs) -> np.ndarray:
    """Proper rotation minimizing sum ||R f_i - g_i||^2 over normalized pairs.

    Classic SVD alignment with determinant correction; directions are
    normalized internally, so only orientations matter.
    """
    f = np.atleast_2d(np.asarray(from_dirs, dtype=float))
    g = np.atleast_2d(np.asarray(to_dirs, dtype=float))
    if f.shape != g.shape or f.shape[0] < 1 or f.shape[1] != 3:
        raise ValueError("from_dirs/to_dirs must be matching (N, 3) arrays")
    fn = np.linalg.norm(f, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if np.any(fn < _PARALLEL_TOL) or np.any(gn < _PARALLEL_TOL):
        raise ValueError("alignment directions must be nonzero")
    f = f / fn[:, None]
    g = g / gn[:, None]
    h = f.T @ g  # sum of outer products f_i g_i^T
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest proper rotation by polar projection (SVD)."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def update_joint_rotation(state, tree, p: int, r_sw: np.ndarray,
                          abs_rots: np.ndarray) -> np.ndarray:
    """New relative rotation for joint p realizing the world swing r_sw.

    Conjugates the swing into joint p's local frame so that re-running FK
    rotates p's bone(s) by r_sw in world space:

        theta_p' = abs(parent).T @ r_sw @ abs(parent) @ theta_p

    `abs_rots` must reflect all already-updated ancestors of p (callers
    traverse root-outward); the root has no parent and takes the swing
    directly. The result is re-orthonormalized when drift exceeds 1e-9 and
    rejected beyond 1e-6.
    """
    parent = tree.parent_of(p)
    b = (abs_rots[parent] @ state.theta[p]) if parent is not None else state.theta[p]
    if parent is None:
        new_theta = r_sw @ b
    else:
        a = abs_rots[parent]
        new_theta = a.T @ r_sw @ b
    drift = np.abs(new_theta.T @ new_theta - np.eye(3)).max()
    if drift > 1e-6:
        raise NumericalDegradationError(
            f"updated rotation at joint {p} drifted {drift:.3e} from orthonormal")
    if drift > 1e-9:
        new_theta = orthonormalize(new_theta)
    return new_theta


def swing_between_batch(from_dirs: np.ndarray, to_dirs: np.ndarray) -> np.ndarray:
    """Vectorized swing_between over rows, resolving degenerate rows in place.

    Parallel rows give the identity; antiparallel rows take the deterministic
    perpendicular-axis half-turn. Intended for hot paths (hypothesis scoring).
    """
    f = from_dirs / np.linalg.norm(from_dirs, axis=1, keepdims=True)
    t = to_dirs / np.linalg.norm(to_dirs, axis=1, keepdims=True)
    cross = np.cross(f, t)
    sin = np.linalg.norm(cross, axis=1)
    cos = np.einsum("ij,ij->i", f, t)
    n = f.shape[0]
    out = np.empty((n, 3, 3))
    regular = sin >= _PARALLEL_TOL
    if np.any(regular):
        axis = cross[regular] / sin[regular, None]
        angle = np.arctan2(sin[regular], cos[regular])
        k = np.zeros((axis.shape[0], 3, 3))
        k[:, 0, 1], k[:, 0, 2] = -axis[:, 2], axis[:, 1]
        k[:, 1, 0], k[:, 1, 2] = axis[:, 2], -axis[:, 0]
        k[:, 2, 0], k[:, 2, 1] = -axis[:, 1], axis[:, 0]
        out[regular] = (np.eye(3)
                        + np.sin(angle)[:, None, None] * k
                        + (1.0 - np.cos(angle))[:, None, None] * (k @ k))
    for i in np.flatnonzero(~regular):
        out[i] = np.eye(3) if cos[i] >= 0.0 else rodrigues(_perpendicular_axis(f[i]), np.pi)
    return out
