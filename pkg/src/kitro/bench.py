"""Synthetic benchmark: sample generation, metrics, and the descent baseline.

Ground-truth bodies stand in for dataset annotations; the perturbed copies
stand in for a regression model's initial estimates. All randomness is
per-sample seeded so batches are reproducible under any parallel split.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, cast_ray, project
from .depth_solver import classify_facing, solve_child
from .errors import DegenerateConfigurationError, NonProjectableError
from .rotation import rodrigues
from .skeleton import (BodyState, SkeletonModel, bone_lengths,
                       fk_shape_linearization, forward_kinematics)

log = logging.getLogger(__name__)

DEFAULT_DEPTH_RANGE = (2.0, 8.0)
DEFAULT_ANGLE_LIMIT_DEG = 60.0
_LATERAL_SIGMA_M = 0.15
_MIN_JOINT_DEPTH_M = 0.1
_MARGIN_FACTOR = 4.0
_MAX_ATTEMPTS = 100


@dataclass
class PerturbSpec:
    """Noise applied to the ground truth to fake an initial estimate."""

    rot_sigma_deg: float = 10.0
    beta_sigma: float = 0.5
    trans_sigma_m: float = 0.05

    def __post_init__(self):
        if min(self.rot_sigma_deg, self.beta_sigma, self.trans_sigma_m) < 0:
            raise ValueError("perturbation sigmas must be >= 0")

    def to_dict(self) -> dict:
        return {"rot_sigma_deg": self.rot_sigma_deg, "beta_sigma": self.beta_sigma,
                "trans_sigma_m": self.trans_sigma_m}


@dataclass
class SyntheticSample:
    """One benchmark item: ground truth, perturbed init, and 2D evidence."""

    gt: BodyState
    init: BodyState
    keypoints2d: np.ndarray
    intr: CameraIntrinsics
    seed: int


@dataclass
class MetricsReport:
    """Aggregate metrics of one evaluated batch (means unless suffixed)."""

    mpjpe: float
    pa_mpjpe: float
    reproj_px: float
    mpjpe_median: float
    pa_mpjpe_median: float
    reproj_px_median: float
    per_joint_mpjpe: np.ndarray
    improvement_fraction: float
    facing_accuracy: float
    facing_accuracy_margin: float
    rectification_rate: float | None
    n_samples: int
    n_behind_camera: int

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["per_joint_mpjpe"] = self.per_joint_mpjpe.tolist()
        return d


def _random_rotation(rng: np.random.Generator, max_angle_rad: float) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle_rad)
    return rodrigues(axis, angle)


def _rotvec_noise(rng: np.random.Generator, sigma_rad: float) -> np.ndarray:
    vec = rng.standard_normal(3) * sigma_rad
    angle = np.linalg.norm(vec)
    if angle < 1e-12:
        return np.eye(3)
    return rodrigues(vec / angle, angle)


def _draw_gt(rng, model, angle_limit_rad, depth_range):
    n = model.num_joints
    theta = np.empty((n, 3, 3))
    theta[0] = _random_rotation(rng, np.pi)
    for j in range(1, n):
        theta[j] = _random_rotation(rng, angle_limit_rad)
    beta = np.clip(rng.standard_normal(model.num_shape_coeffs), -3.0, 3.0)
    trans = np.array([rng.normal(0.0, _LATERAL_SIGMA_M),
                      rng.normal(0.0, _LATERAL_SIGMA_M),
                      rng.uniform(*depth_range)])
    return BodyState(theta=theta, beta=beta, trans=trans)


def _within_margin(uv: np.ndarray, intr: CameraIntrinsics) -> bool:
    half_w = _MARGIN_FACTOR * intr.W / 2.0
    half_h = _MARGIN_FACTOR * intr.H / 2.0
    return bool(np.all(np.abs(uv[:, 0] - intr.cx) <= half_w)
                and np.all(np.abs(uv[:, 1] - intr.cy) <= half_h))


def generate_samples(model: SkeletonModel, n: int,
                     perturb: PerturbSpec | None = None,
                     noise2d_px: float = 0.0, seed: int = 0,
                     intr: CameraIntrinsics | None = None,
                     angle_limit_deg: float = DEFAULT_ANGLE_LIMIT_DEG,
                     depth_range: tuple[float, float] = DEFAULT_DEPTH_RANGE,
                     ) -> list[SyntheticSample]:
    """Draw n reproducible synthetic samples.

    Ground-truth poses use per-joint random axis-angle rotations (root
    unconstrained), shapes are clipped standard normals, and the camera
    translation places the body 2-8 m deep. A body projecting outside a 4x
    image margin is redrawn, up to 100 attempts. Keypoint noise is added
    after acceptance. RNG streams are seeded per sample (seed + index).
    """
    if n <= 0:
        raise ValueError("sample count must be positive")
    if noise2d_px < 0:
        raise ValueError("keypoint noise must be >= 0")
    perturb = perturb or PerturbSpec()
    intr = intr or CameraIntrinsics.from_image_size(1000, 1000)
    samples = []
    for i in range(n):
        rng = np.random.default_rng(seed + i)
        for attempt in range(_MAX_ATTEMPTS):
            gt = _draw_gt(rng, model, np.radians(angle_limit_deg), depth_range)
            pos, _ = forward_kinematics(model, gt)
            cam_pts = pos + gt.trans
            if np.any(cam_pts[:, 2] <= _MIN_JOINT_DEPTH_M):
                continue
            uv = project(intr, cam_pts)
            if _within_margin(uv, intr):
                break
        else:
            raise RuntimeError(f"sample {i}: no acceptable pose in {_MAX_ATTEMPTS} attempts")

        sigma_rad = np.radians(perturb.rot_sigma_deg)
        theta_init = np.stack([_rotvec_noise(rng, sigma_rad) @ gt.theta[j]
                               for j in range(model.num_joints)])
        beta_init = gt.beta + rng.standard_normal(model.num_shape_coeffs) * perturb.beta_sigma
        trans_init = gt.trans + rng.standard_normal(3) * perturb.trans_sigma_m
        keypoints = uv + rng.standard_normal(uv.shape) * noise2d_px
        samples.append(SyntheticSample(
            gt=gt,
            init=BodyState(theta=theta_init, beta=beta_init, trans=trans_init),
            keypoints2d=keypoints,
            intr=intr,
            seed=seed + i,
        ))
    return samples


def _pelvis_center(joints: np.ndarray, pelvis_mode: str) -> np.ndarray:
    if pelvis_mode == "joint0":
        return joints[0]
    if pelvis_mode == "hip-mean":
        return joints[[1, 2]].mean(axis=0)
    raise ValueError(f"unknown pelvis mode {pelvis_mode!r}")


def mpjpe(pred_joints, gt_joints, pelvis_mode: str = "joint0") -> float:
    """Mean per-joint distance in mm after pelvis alignment."""
    pred = np.asarray(pred_joints, dtype=float)
    gt = np.asarray(gt_joints, dtype=float)
    pred = pred - _pelvis_center(pred, pelvis_mode)
    gt = gt - _pelvis_center(gt, pelvis_mode)
    return float(np.linalg.norm(pred - gt, axis=1).mean() * 1000.0)


def per_joint_error_mm(pred_joints, gt_joints, pelvis_mode: str = "joint0") -> np.ndarray:
    pred = np.asarray(pred_joints, dtype=float)
    gt = np.asarray(gt_joints, dtype=float)
    pred = pred - _pelvis_center(pred, pelvis_mode)
    gt = gt - _pelvis_center(gt, pelvis_mode)
    return np.linalg.norm(pred - gt, axis=1) * 1000.0


def pa_mpjpe(pred_joints, gt_joints) -> float:
    """Mean per-joint distance in mm after similarity (Procrustes) alignment.

    The alignment solves rotation, translation, and uniform scale via the SVD
    of the centered cross-covariance.
    """
    pred = np.asarray(pred_joints, dtype=float)
    gt = np.asarray(gt_joints, dtype=float)
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    x = pred - mu_p
    y = gt - mu_g
    var = (x ** 2).sum()
    if var < 1e-18:
        raise DegenerateConfigurationError("all predicted points coincide")
    h = x.T @ y
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    scale = (s[0] + s[1] + d * s[2]) / var
    aligned = scale * x @ rot.T + mu_g
    return float(np.linalg.norm(aligned - gt, axis=1).mean() * 1000.0)


def reprojection_error(state: BodyState, model: SkeletonModel,
                       intr: CameraIntrinsics, keypoints2d) -> float:
    """Mean pixel distance between projected joints and the given keypoints.

    Returns inf when any joint sits behind the camera.
    """
    pos, _ = forward_kinematics(model, state)
    try:
        uv = project(intr, pos + state.trans)
    except NonProjectableError:
        return float("inf")
    return float(np.linalg.norm(uv - np.asarray(keypoints2d, dtype=float), axis=1).mean())


@dataclass
class FacingReport:
    """How often the init pose indicates the ground-truth toward/away branch."""

    accuracy: float
    accuracy_with_margin: float
    n_bones: int
    n_ambiguous: int


def facing_report(samples, results=None, margin_deg: float = 10.0,
                  model: SkeletonModel | None = None) -> FacingReport:
    """Bone-facing accuracy of the initial poses against the ground truth.

    For each bone, candidates are rebuilt from the ground-truth parent
    position and the sample's keypoint ray; the ground-truth branch is the
    candidate nearest the true child, the init branch is the candidate
    nearest the init bone direction. With the margin, cases whose two
    candidates are separated by less than margin_deg count as correct.
    `results` is accepted for signature symmetry and only length-checked.
    """
    from .skeleton import default_skeleton
    model = model or default_skeleton()
    if results is not None and len(results) != len(samples):
        raise ValueError("results must align with samples")
    hits = 0
    hits_margin = 0
    total = 0
    ambiguous = 0
    for sample in samples:
        gt_pos, _ = forward_kinematics(model, sample.gt)
        init_pos, _ = forward_kinematics(model, sample.init)
        gt_cam = gt_pos + sample.gt.trans
        blens = bone_lengths(model, sample.gt.beta)
        for bi, (p, c) in enumerate(model.tree.bone_list):
            parent_pos = gt_cam[p]
            depth = float(np.linalg.norm(parent_pos))
            ray = cast_ray(sample.intr, sample.keypoints2d[c])
            try:
                pair = solve_child(parent_pos, depth, ray, parent_pos / depth,
                                   float(blens[bi]))
            except ValueError:
                continue
            gt_branch = ("toward"
                         if np.linalg.norm(pair.toward.position - gt_cam[c])
                         <= np.linalg.norm(pair.away.position - gt_cam[c])
                         else "away")
            verdict = classify_facing(pair, gt_branch, init_pos[c] - init_pos[p],
                                      margin_deg=margin_deg)
            total += 1
            hits += verdict.matches
            hits_margin += verdict.matches or verdict.ambiguous
            ambiguous += verdict.ambiguous
    return FacingReport(
        accuracy=hits / total if total else 0.0,
        accuracy_with_margin=hits_margin / total if total else 0.0,
        n_bones=total,
        n_ambiguous=ambiguous,
    )


def depth_error_mm(pred_joints_cam, gt_joints_cam) -> float:
    """Mean absolute per-joint z difference in mm (depth-error proxy)."""
    pred = np.asarray(pred_joints_cam, dtype=float)
    gt = np.asarray(gt_joints_cam, dtype=float)
    return float(np.abs(pred[:, 2] - gt[:, 2]).mean() * 1000.0)


def _reproj_loss_and_grads(model, theta, beta, trans, intr, keypoints2d,
                           subtrees):
    """Frobenius reprojection loss and its gradients at the current params."""
    base, sens, abs_rots = fk_shape_linearization(model, theta)
    pos = base + sens @ beta
    pts = pos + trans
    if np.any(pts[:, 2] <= 0.0):
        return None
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = intr.f * pts[:, 0] / pts[:, 2] + intr.cx
    uv[:, 1] = intr.f * pts[:, 1] / pts[:, 2] + intr.cy
    res = uv - keypoints2d
    loss = float(np.sqrt((res ** 2).sum()))
    if loss == 0.0:
        zero_d = np.zeros((model.num_joints, 3))
        return loss, zero_d, np.zeros(model.num_shape_coeffs), np.zeros(3)
    g_uv = res / loss
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    g_p = np.empty_like(pts)
    g_p[:, 0] = g_uv[:, 0] * intr.f / z
    g_p[:, 1] = g_uv[:, 1] * intr.f / z
    g_p[:, 2] = -(g_uv[:, 0] * x + g_uv[:, 1] * y) * intr.f / (z * z)
    g_trans = g_p.sum(axis=0)
    g_beta = np.einsum("jd,jdk->k", g_p, sens)
    g_delta = np.empty((model.num_joints, 3))
    tree = model.tree
    for j in range(model.num_joints):
        qs = subtrees[j]
        r = pos[qs] - pos[j]
        s = np.cross(r, g_p[qs]).sum(axis=0)
        parent = tree.parent_of(j)
        a = abs_rots[parent] if parent is not None else np.eye(3)
        g_delta[j] = a.T @ s
    return loss, g_delta, g_beta, g_trans


def _subtree_lists(tree) -> list[np.ndarray]:
    subs = [[j] for j in range(tree.num_joints)]
    order = sorted(range(tree.num_joints), key=lambda j: -len(tree.chain_of(j)))
    for j in order:
        p = tree.parent_of(j)
        if p is not None:
            subs[p].extend(subs[j])
    return [np.array(sorted(s), dtype=int) for s in subs]


def baseline_refine_reproj(state: BodyState, model: SkeletonModel,
                           intr: CameraIntrinsics, keypoints2d,
                           steps: int = 100, lr: float = 0.01) -> BodyState:
    """Joint gradient descent on the reprojection loss over (theta, beta, t).

    Rotations are optimized on the manifold: each Adam step produces
    per-joint axis-angle increments that are composed onto the current
    rotations. Used as the comparison baseline; stops early on divergence
    (loss above 10x the initial value).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    keypoints2d = np.asarray(keypoints2d, dtype=float)
    work = state.copy()
    subtrees = _subtree_lists(model.tree)
    n = model.num_joints
    k = model.num_shape_coeffs
    params = np.zeros(3 * n + k + 3)
    adam_m = np.zeros_like(params)
    adam_v = np.zeros_like(params)
    initial_loss = None
    for step in range(steps):
        out = _reproj_loss_and_grads(model, work.theta, work.beta,
                                     work.trans, intr, keypoints2d, subtrees)
        if out is None:
            break
        loss, g_delta, g_beta, g_trans = out
        if initial_loss is None:
            initial_loss = loss
        elif loss > 10.0 * initial_loss:
            break
        grad = np.concatenate([g_delta.reshape(-1), g_beta, g_trans])
        adam_m = 0.9 * adam_m + 0.1 * grad
        adam_v = 0.999 * adam_v + 0.001 * grad * grad
        m_hat = adam_m / (1.0 - 0.9 ** (step + 1))
        v_hat = adam_v / (1.0 - 0.999 ** (step + 1))
        update = -lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        delta = update[:3 * n].reshape(n, 3)
        for j in range(n):
            angle = np.linalg.norm(delta[j])
            if angle > 1e-15:
                work.theta[j] = rodrigues(delta[j] / angle, angle) @ work.theta[j]
        work.beta[...] = work.beta + update[3 * n:3 * n + k]
        work.trans[...] = work.trans + update[3 * n + k:]
    return work


def evaluate(samples, final_states, pelvis_mode: str = "joint0",
             rectification_rate: float | None = None,
             margin_deg: float = 10.0,
             model: SkeletonModel | None = None) -> MetricsReport:
    """Score refined states against their samples' ground truth."""
    from .skeleton import default_skeleton
    model = model or default_skeleton()
    if len(samples) != len(final_states):
        raise ValueError("samples/results length mismatch")
    mp, pa, rp = [], [], []
    per_joint = []
    improved = 0
    behind = 0
    for sample, final in zip(samples, final_states):
        gt_pos, _ = forward_kinematics(model, sample.gt)
        pred_pos, _ = forward_kinematics(model, final)
        init_pos, _ = forward_kinematics(model, sample.init)
        m_final = mpjpe(pred_pos, gt_pos, pelvis_mode)
        m_init = mpjpe(init_pos, gt_pos, pelvis_mode)
        mp.append(m_final)
        pa.append(pa_mpjpe(pred_pos, gt_pos))
        r = reprojection_error(final, model, sample.intr, sample.keypoints2d)
        behind += not np.isfinite(r)
        rp.append(r)
        per_joint.append(per_joint_error_mm(pred_pos, gt_pos, pelvis_mode))
        improved += m_final < m_init
    facing = facing_report(samples, margin_deg=margin_deg, model=model)
    finite_rp = [r for r in rp if np.isfinite(r)]

    def stable_mean(values):
        # sort before summing so batch permutations cannot shift rounding
        return float(np.mean(np.sort(values))) if len(values) else float("inf")

    return MetricsReport(
        mpjpe=stable_mean(mp),
        pa_mpjpe=stable_mean(pa),
        reproj_px=stable_mean(finite_rp),
        mpjpe_median=float(np.median(mp)),
        pa_mpjpe_median=float(np.median(pa)),
        reproj_px_median=float(np.median(rp)),
        per_joint_mpjpe=np.sort(np.asarray(per_joint), axis=0).mean(axis=0),
        improvement_fraction=improved / len(samples),
        facing_accuracy=facing.accuracy,
        facing_accuracy_margin=facing.accuracy_with_margin,
        rectification_rate=rectification_rate,
        n_samples=len(samples),
        n_behind_camera=behind,
    )


def body_state_to_dict(state: BodyState) -> dict:
    return {
        "theta": state.theta.reshape(state.num_joints, 9).tolist(),
        "beta": state.beta.tolist(),
        "trans": state.trans.tolist(),
    }


def body_state_from_dict(d: dict) -> BodyState:
    theta = np.asarray(d["theta"], dtype=float).reshape(-1, 3, 3)
    return BodyState(theta=theta, beta=np.asarray(d["beta"], dtype=float),
                     trans=np.asarray(d["trans"], dtype=float))


def sample_to_dict(sample: SyntheticSample) -> dict:
    return {
        "gt": body_state_to_dict(sample.gt),
        "init": body_state_to_dict(sample.init),
        "keypoints2d": sample.keypoints2d.tolist(),
        "intr": sample.intr.to_dict(),
        "seed": sample.seed,
    }


def sample_from_dict(d: dict) -> SyntheticSample:
    return SyntheticSample(
        gt=body_state_from_dict(d["gt"]),
        init=body_state_from_dict(d["init"]),
        keypoints2d=np.asarray(d["keypoints2d"], dtype=float),
        intr=CameraIntrinsics.from_dict(d["intr"]),
        seed=int(d["seed"]),
    )


def write_samples(samples, path) -> None:
    with Path(path).open("w") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_dict(sample)) + "\n")


def read_samples(path) -> list[SyntheticSample]:
    samples = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(sample_from_dict(json.loads(line)))
    return samples
