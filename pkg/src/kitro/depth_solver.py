"""Closed-form two-solution bone geometry.

Given the parent joint's position/depth in the camera frame, the unit ray
through the child's 2D keypoint, and the 3D bone length, the child joint must
lie where the ray meets the sphere of radius bone_len around the parent. That
gives at most two points: one with the bone leaning toward the camera, one
leaning away. A negative radicand (ray misses the sphere) is clamped to zero,
collapsing both candidates onto the ray's closest approach.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_RAY_TOL = 1e-6
_CONSISTENCY_TOL = 1e-6


@dataclass
class BoneCandidate:
    """One child-joint candidate: camera-frame position and radial depth."""

    position: np.ndarray
    depth: float
    valid: bool


@dataclass
class BoneSolutionPair:
    """Both candidates of one bone solve, plus the clamp diagnostics.

    `toward` always carries the smaller depth. `rectified` marks a clamped
    (negative) discriminant, in which case the two candidates coincide.
    """

    toward: BoneCandidate
    away: BoneCandidate
    discriminant: float
    rectified: bool
    parent_pos: np.ndarray

    def candidate(self, branch) -> BoneCandidate:
        if branch in (0, "toward"):
            return self.toward
        if branch in (1, "away"):
            return self.away
        raise ValueError(f"branch must be toward/away, got {branch!r}")

    def direction(self, branch) -> np.ndarray:
        return self.candidate(branch).position - self.parent_pos

    @property
    def gap_deg(self) -> float:
        """Angle in degrees separating the two candidate bone directions."""
        dt = self.direction("toward")
        da = self.direction("away")
        nt, na = np.linalg.norm(dt), np.linalg.norm(da)
        if nt < 1e-12 or na < 1e-12:
            return 0.0
        cos = np.clip(dt @ da / (nt * na), -1.0, 1.0)
        return math.degrees(math.acos(cos))


@dataclass
class FacingVerdict:
    """Which branch a reference bone direction points to, and the margin call."""

    facing: str
    matches: bool
    ambiguous: bool
    gap_deg: float


def solve_child_batch(parent_pos: np.ndarray, parent_depth: np.ndarray,
                      child_ray: np.ndarray, bone_len: float):
    """Vectorized bone solve for N parents sharing one child ray.

    Parent rays are derived as parent_pos / parent_depth. Returns arrays
    (positions (N, 2, 3), depths (N, 2), discriminant (N,), rectified (N,),
    valid (N, 2)) with branch order [toward, away].
    """
    p = parent_pos / parent_depth[:, None]
    c = child_ray
    cross = np.cross(p, c[None, :])
    sin = np.linalg.norm(cross, axis=1)
    cos = p @ c
    alpha = np.arctan2(sin, cos)
    sa, ca = np.sin(alpha), np.cos(alpha)
    disc = bone_len * bone_len - (parent_depth * sa) ** 2
    fj = np.sqrt(np.maximum(disc, 0.0))
    rectified = disc < 0.0
    foot = parent_depth[:, None] * (ca[:, None] * c[None, :] - p)
    depths = np.stack([parent_depth * ca - fj, parent_depth * ca + fj], axis=1)
    offsets = np.stack([foot - fj[:, None] * c[None, :],
                        foot + fj[:, None] * c[None, :]], axis=1)
    positions = parent_pos[:, None, :] + offsets
    valid = depths > 0.0
    return positions, depths, disc, rectified, valid


def solve_child(parent_pos, parent_depth: float, child_ray, parent_ray,
                bone_len: float) -> BoneSolutionPair:
    """Both candidate child joints for one bone.

    The parent must sit on its own ray (parent_pos = parent_depth *
    parent_ray within 1e-6); candidates land on the child ray at distance
    bone_len from the parent, or coincide at the closest approach when the
    ray misses the sphere (rectified).
    """
    parent_pos = np.asarray(parent_pos, dtype=float)
    child_ray = np.asarray(child_ray, dtype=float)
    parent_ray = np.asarray(parent_ray, dtype=float)
    if parent_depth <= 0.0:
        raise ValueError(f"parent depth must be positive, got {parent_depth}")
    if bone_len <= 0.0:
        raise ValueError(f"bone length must be positive, got {bone_len}")
    if abs(np.linalg.norm(child_ray) - 1.0) > _RAY_TOL:
        raise ValueError("child ray must be a unit vector")
    if abs(np.linalg.norm(parent_ray) - 1.0) > _RAY_TOL:
        raise ValueError("parent ray must be a unit vector")
    if np.abs(parent_pos - parent_depth * parent_ray).max() > _CONSISTENCY_TOL:
        raise ValueError("parent_pos is inconsistent with parent_depth * parent_ray")

    positions, depths, disc, rectified, valid = solve_child_batch(
        parent_pos[None, :], np.array([parent_depth]), child_ray, bone_len)
    return BoneSolutionPair(
        toward=BoneCandidate(positions[0, 0], float(depths[0, 0]), bool(valid[0, 0])),
        away=BoneCandidate(positions[0, 1], float(depths[0, 1]), bool(valid[0, 1])),
        discriminant=float(disc[0]),
        rectified=bool(rectified[0]),
        parent_pos=parent_pos.copy(),
    )


def classify_facing(pair: BoneSolutionPair, chosen, reference_dir,
                    margin_deg: float = 10.0) -> FacingVerdict:
    """Which branch the reference bone direction indicates, vs. the chosen one.

    The verdict is the candidate direction angularly closest to
    reference_dir. When the two candidates are separated by less than
    margin_deg the case is flagged ambiguous (callers typically count those
    as tolerated).
    """
    ref = np.asarray(reference_dir, dtype=float)
    nr = np.linalg.norm(ref)
    if nr <= 0.0:
        raise ValueError("reference direction must be nonzero")
    ref = ref / nr
    chosen_name = "toward" if chosen in (0, "toward") else "away"
    dt = pair.direction("toward")
    da = pair.direction("away")
    ct = ref @ dt / max(np.linalg.norm(dt), 1e-300)
    ca = ref @ da / max(np.linalg.norm(da), 1e-300)
    facing = "toward" if ct >= ca else "away"
    gap = pair.gap_deg
    return FacingVerdict(
        facing=facing,
        matches=facing == chosen_name,
        ambiguous=margin_deg > 0.0 and gap < margin_deg,
        gap_deg=gap,
    )
