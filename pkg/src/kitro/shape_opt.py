"""Shape refinement: Adam descent on the projected-vs-given 2D bone-length L1 loss.

Pose rotations and camera translation are held fixed, so FK positions are an
affine function of the shape coefficients and the gradient is available in
closed form through the perspective division.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, project
from .errors import NonProjectableError
from .skeleton import BodyState, SkeletonModel, fk_shape_linearization, forward_kinematics

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# |bl_proj - bl_2d| below this counts as the L1 kink (subgradient 0); without
# the deadband, float noise at an exact fit flips signs and Adam scales the
# noise up to full-size steps.
KINK_TOL_PX = 1e-9


@dataclass
class AdamState:
    """First/second moment accumulators for one shape-coefficient vector."""

    lr: float = 0.1
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step_count: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m.shape != params.shape:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def projected_bone_length(model: SkeletonModel, beta, theta, trans,
                          intr: CameraIntrinsics, bone: tuple[int, int]) -> float:
    """Pixel distance between the projections of one bone's endpoint joints."""
    state = BodyState(theta=theta, beta=beta, trans=trans)
    pos, _ = forward_kinematics(model, state)
    p, c = bone
    uv = project(intr, np.stack([pos[p], pos[c]]) + np.asarray(trans, dtype=float))
    return float(np.linalg.norm(uv[0] - uv[1]))


def bone_length_2d(keypoints2d, bone: tuple[int, int]) -> float:
    """Pixel distance between two given 2D keypoints."""
    kp = np.asarray(keypoints2d, dtype=float)
    p, c = bone
    return float(np.linalg.norm(kp[p] - kp[c]))


def _loss_terms(model, base, sens, beta, trans, intr, keypoints2d):
    """Projected lengths, 2D lengths, projections, and camera points."""
    pos = base + sens @ beta
    pts = pos + trans
    if np.any(pts[:, 2] <= 0.0):
        bad = int(np.flatnonzero(pts[:, 2] <= 0.0)[0])
        raise NonProjectableError(f"joint {bad} is behind the camera")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = intr.f * pts[:, 0] / pts[:, 2] + intr.cx
    uv[:, 1] = intr.f * pts[:, 1] / pts[:, 2] + intr.cy
    pairs = np.asarray(model.tree.bone_list, dtype=int)
    d_uv = uv[pairs[:, 0]] - uv[pairs[:, 1]]
    bl_proj = np.linalg.norm(d_uv, axis=1)
    kp = np.asarray(keypoints2d, dtype=float)
    bl_2d = np.linalg.norm(kp[pairs[:, 0]] - kp[pairs[:, 1]], axis=1)
    return bl_proj, bl_2d, d_uv, pts, pairs


def shape_loss(model: SkeletonModel, beta, theta, trans,
               intr: CameraIntrinsics, keypoints2d) -> float:
    """Sum over bones of |projected length - 2D keypoint length| in pixels."""
    beta = np.asarray(beta, dtype=float)
    trans = np.asarray(trans, dtype=float)
    base, sens, _ = fk_shape_linearization(model, np.asarray(theta, dtype=float))
    bl_proj, bl_2d, *_ = _loss_terms(model, base, sens, beta, trans, intr, keypoints2d)
    return float(np.abs(bl_proj - bl_2d).sum())


def shape_gradient(model: SkeletonModel, beta, theta, trans,
                   intr: CameraIntrinsics, keypoints2d) -> np.ndarray:
    """Analytic gradient of shape_loss with respect to beta.

    Chain rule through the affine FK-in-beta map and the perspective
    division; the L1 subgradient at an exactly matched bone is taken as 0.
    """
    beta = np.asarray(beta, dtype=float)
    trans = np.asarray(trans, dtype=float)
    base, sens, _ = fk_shape_linearization(model, np.asarray(theta, dtype=float))
    return _gradient_from_linearization(model, base, sens, beta, trans, intr, keypoints2d)[1]


def _gradient_from_linearization(model, base, sens, beta, trans, intr, keypoints2d):
    bl_proj, bl_2d, d_uv, pts, pairs = _loss_terms(
        model, base, sens, beta, trans, intr, keypoints2d)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    dz = sens[:, 2, :]
    du = intr.f * (sens[:, 0, :] * z[:, None] - x[:, None] * dz) / (z ** 2)[:, None]
    dv = intr.f * (sens[:, 1, :] * z[:, None] - y[:, None] * dz) / (z ** 2)[:, None]
    d_du = du[pairs[:, 0]] - du[pairs[:, 1]]
    d_dv = dv[pairs[:, 0]] - dv[pairs[:, 1]]
    safe = np.where(bl_proj > 0.0, bl_proj, 1.0)
    dlen = (d_uv[:, 0, None] * d_du + d_uv[:, 1, None] * d_dv) / safe[:, None]
    dlen[bl_proj == 0.0] = 0.0
    diff = bl_proj - bl_2d
    sign = np.where(np.abs(diff) > KINK_TOL_PX, np.sign(diff), 0.0)
    loss = float(np.abs(diff).sum())
    return loss, sign @ dlen


def refine_shape(state: BodyState, model: SkeletonModel, intr: CameraIntrinsics,
                 keypoints2d, steps: int = 10, lr: float = 0.1,
                 adam: AdamState | None = None):
    """Run `steps` Adam steps on the bone-length loss from state.beta.

    Returns (beta, losses, adam) where losses holds the loss before each step
    plus the final value. A non-finite loss or an infeasible projection
    aborts the run, returning the last finite beta.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    base, sens, _ = fk_shape_linearization(model, state.theta)
    if adam is None:
        adam = AdamState(lr=lr)
    else:
        adam.lr = lr
    beta = state.beta.copy()
    trans = state.trans
    losses: list[float] = []
    last_finite = beta

    def evaluate(b):
        try:
            loss, grad = _gradient_from_linearization(
                model, base, sens, b, trans, intr, keypoints2d)
        except NonProjectableError:
            return None, None
        return (loss, grad) if np.isfinite(loss) else (None, None)

    for _ in range(steps):
        loss, grad = evaluate(beta)
        if loss is None:
            return last_finite, losses, adam
        losses.append(loss)
        last_finite = beta
        beta = adam.step(beta, grad)
    loss, _ = evaluate(beta)
    if loss is None:
        return last_finite, losses, adam
    losses.append(loss)
    return beta, losses, adam
