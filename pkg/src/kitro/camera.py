"""Full-perspective pinhole camera: projection, ray casting, translation fit."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfigurationError, NonProjectableError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal length, principal point, image size (pixels)."""

    f: float
    cx: float
    cy: float
    H: float
    W: float

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError("focal length must be positive")

    @classmethod
    def from_image_size(cls, H: float, W: float) -> "CameraIntrinsics":
        """Default construction: f = sqrt(H^2 + W^2), principal point centered."""
        return cls(f=math.sqrt(H * H + W * W), cx=W / 2.0, cy=H / 2.0, H=H, W=W)

    def with_focal(self, f: float) -> "CameraIntrinsics":
        return CameraIntrinsics(f=f, cx=self.cx, cy=self.cy, H=self.H, W=self.W)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.f, 0.0, self.cx],
            [0.0, self.f, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def to_dict(self) -> dict:
        return {"f": self.f, "cx": self.cx, "cy": self.cy, "H": self.H, "W": self.W}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(f=float(d["f"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   H=float(d["H"]), W=float(d["W"]))


def project(intr: CameraIntrinsics, points) -> np.ndarray:
    """Perspective projection of camera-frame points (N, 3) to pixels (N, 2).

    Every point must have positive depth z; the first offender is named in
    the raised error.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    z = pts[:, 2]
    bad = np.flatnonzero(z <= 0.0)
    if bad.size:
        raise NonProjectableError(
            f"point {bad[0]} has non-positive depth z={z[bad[0]]:.6g}")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = intr.f * pts[:, 0] / z + intr.cx
    uv[:, 1] = intr.f * pts[:, 1] / z + intr.cy
    return uv


def cast_ray(intr: CameraIntrinsics, pixel) -> np.ndarray:
    """Unit camera-frame ray through a pixel (inverse intrinsics, normalized)."""
    u, v = float(pixel[0]), float(pixel[1])
    ray = np.array([(u - intr.cx) / intr.f, (v - intr.cy) / intr.f, 1.0])
    return ray / np.linalg.norm(ray)


def _translation_system(joints3d: np.ndarray, keypoints2d: np.ndarray,
                        intr: CameraIntrinsics):
    n = joints3d.shape[0]
    x, y, z = joints3d[:, 0], joints3d[:, 1], joints3d[:, 2]
    du = keypoints2d[:, 0] - intr.cx
    dv = keypoints2d[:, 1] - intr.cy
    a = np.zeros((2 * n, 3))
    a[0::2, 0] = intr.f
    a[0::2, 2] = -du
    a[1::2, 1] = intr.f
    a[1::2, 2] = -dv
    b = np.empty(2 * n)
    b[0::2] = du * z - intr.f * x
    b[1::2] = dv * z - intr.f * y
    return a, b


def solve_translation(joints3d, keypoints2d, intr: CameraIntrinsics) -> np.ndarray:
    """Closed-form camera translation from body-frame joints and 2D keypoints.

    Minimizes the linearized algebraic residuals

        f (x_i + t_x) - (u_i - c_x)(z_i + t_z)
        f (y_i + t_y) - (v_i - c_y)(z_i + t_z)

    over all joints as a 2N x 3 least-squares system.
    """
    joints3d = np.asarray(joints3d, dtype=float)
    keypoints2d = np.asarray(keypoints2d, dtype=float)
    if joints3d.shape[0] < 3:
        raise ValueError("need at least 3 correspondences")
    a, b = _translation_system(joints3d, keypoints2d, intr)
    t, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 3:
        raise DegenerateConfigurationError(
            "translation system is rank-deficient (keypoints at the principal point?)")
    return t


def translation_residual(joints3d, keypoints2d, intr: CameraIntrinsics, t) -> float:
    """Norm of the algebraic residual minimized by solve_translation at t."""
    a, b = _translation_system(np.asarray(joints3d, dtype=float),
                               np.asarray(keypoints2d, dtype=float), intr)
    return float(np.linalg.norm(a @ np.asarray(t, dtype=float) - b))


def update_translation(t_star, t_current) -> np.ndarray:
    """Moving-average translation update: (t* + t) / 2."""
    return (np.asarray(t_star, dtype=float) + np.asarray(t_current, dtype=float)) / 2.0
