"""Iterative refinement loop over camera translation, shape, and pose.

Each iteration runs the three stages in order: closed-form translation with a
moving-average update, Adam descent on the 2D bone-length loss, then
hypothesis-tree construction / scoring / selection and the pose write-back.
Chains whose root hangs off another chain (the arms, off the upper spine) are
built only after that chain's path is selected.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraIntrinsics, project, solve_translation, update_translation
from .errors import KitroError, NonProjectableError
from .hypothesis import (apply_pose_update, build_tree, chain_plan, greedy_select,
                         score_edges, select_path, selected_position, tree_debug_dict)
from .shape_opt import AdamState, refine_shape
from .skeleton import BodyState, SkeletonModel, bone_lengths, forward_kinematics

log = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    """Knobs of the refinement loop; defaults match the published settings."""

    iterations: int = 10
    shape_steps: int = 10
    shape_lr: float = 0.1
    enable_camera: bool = True
    enable_shape: bool = True
    enable_pose: bool = True
    soft_update: bool = True
    selection_mode: str = "tree"
    dump_trees: bool = False
    adam_carry: bool = False

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.shape_steps < 0:
            raise ValueError("shape_steps must be >= 0")
        if self.shape_lr <= 0:
            raise ValueError("shape_lr must be > 0")
        if self.selection_mode not in ("tree", "greedy"):
            raise ValueError(f"unknown selection_mode {self.selection_mode!r}")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "shape_steps": self.shape_steps,
            "shape_lr": self.shape_lr,
            "enable_camera": self.enable_camera,
            "enable_shape": self.enable_shape,
            "enable_pose": self.enable_pose,
            "soft_update": self.soft_update,
            "selection_mode": self.selection_mode,
            "dump_trees": self.dump_trees,
            "adam_carry": self.adam_carry,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class IterationSnapshot:
    """Parameters and metrics recorded after one iteration (or at init)."""

    theta: np.ndarray
    beta: np.ndarray
    trans: np.ndarray
    reproj_px: float
    mpjpe: float | None = None
    pa_mpjpe: float | None = None


@dataclass
class RefinementTrace:
    """Per-iteration history of one refinement run (index 0 = initialization)."""

    snapshots: list[IterationSnapshot] = field(default_factory=list)
    solved_nodes: int = 0
    rectified_nodes: int = 0
    error: str | None = None
    tree_dumps: list = field(default_factory=list)

    @property
    def rectification_rate(self) -> float:
        return self.rectified_nodes / self.solved_nodes if self.solved_nodes else 0.0

    def metric_series(self, name: str) -> list:
        return [getattr(s, name) for s in self.snapshots]


def _mean_reprojection_px(state: BodyState, model: SkeletonModel,
                          intr: CameraIntrinsics, keypoints2d) -> float:
    pos, _ = forward_kinematics(model, state)
    try:
        uv = project(intr, pos + state.trans)
    except NonProjectableError:
        return float("inf")
    return float(np.linalg.norm(uv - keypoints2d, axis=1).mean())


def _snapshot(state, model, intr, keypoints2d, gt_joints, pelvis_mode):
    snap = IterationSnapshot(
        theta=state.theta.copy(), beta=state.beta.copy(), trans=state.trans.copy(),
        reproj_px=_mean_reprojection_px(state, model, intr, keypoints2d))
    if gt_joints is not None:
        from .bench import mpjpe, pa_mpjpe  # local import; bench builds on refiner-free ops
        pos, _ = forward_kinematics(model, state)
        snap.mpjpe = mpjpe(pos, gt_joints, pelvis_mode=pelvis_mode)
        snap.pa_mpjpe = pa_mpjpe(pos, gt_joints)
    return snap


def _pose_stage(work: BodyState, model: SkeletonModel, intr: CameraIntrinsics,
                keypoints2d, cfg: RefineConfig, trace: RefinementTrace) -> None:
    pos, _ = forward_kinematics(model, work)
    root_cam = pos[0] + work.trans
    blens = bone_lengths(model, work.beta)
    blen_of = {bone: blens[i] for i, bone in enumerate(model.tree.bone_list)}
    pick = select_path if cfg.selection_mode == "tree" else greedy_select

    trees, selections = {}, {}
    for spec in chain_plan(model):
        if spec.gate is None:
            root_pos = root_cam
        else:
            parent_chain, depth = spec.gate
            root_pos = selected_position(trees[parent_chain],
                                         selections[parent_chain], depth)
        tree = build_tree(spec.bones, root_pos, keypoints2d,
                          [blen_of[b] for b in spec.bones], intr)
        tree.chain_id = spec.chain_id
        score_edges(tree, work, model)
        trees[spec.chain_id] = tree
        selections[spec.chain_id] = pick(tree)
        trace.solved_nodes += tree.node_count()
        trace.rectified_nodes += tree.rectified_count()

    new_theta = apply_pose_update(
        work, model, selections, trees,
        lambda_override=None if cfg.soft_update else 1.0)
    work.theta[...] = new_theta
    if cfg.dump_trees:
        trace.tree_dumps.append(
            [tree_debug_dict(trees[cid], selections[cid]) for cid in trees])


def refine(state: BodyState, model: SkeletonModel, intr: CameraIntrinsics,
           keypoints2d, cfg: RefineConfig | None = None, gt_joints=None,
           pelvis_mode: str = "joint0"):
    """Run the full refinement loop on one body.

    Returns (refined BodyState, RefinementTrace). The trace holds iterations
    0..M; when gt_joints (body-frame joints) is given, pose metrics are
    recorded alongside the reprojection error. A stage failure aborts the
    loop, returning the last completed iteration's state with the error
    recorded on the trace.
    """
    cfg = cfg or RefineConfig()
    keypoints2d = np.asarray(keypoints2d, dtype=float)
    if not np.all(np.isfinite(keypoints2d)):
        raise ValueError("keypoints must be finite")
    work = state.copy()
    trace = RefinementTrace()
    trace.snapshots.append(_snapshot(work, model, intr, keypoints2d, gt_joints, pelvis_mode))
    adam: AdamState | None = None
    for m in range(cfg.iterations):
        before = work.copy()
        try:
            if cfg.enable_camera:
                pos, _ = forward_kinematics(model, work)
                t_star = solve_translation(pos, keypoints2d, intr)
                work.trans[...] = update_translation(t_star, work.trans)
            if cfg.enable_shape:
                if not cfg.adam_carry:
                    adam = None
                work.beta[...], _, adam = refine_shape(
                    work, model, intr, keypoints2d,
                    steps=cfg.shape_steps, lr=cfg.shape_lr, adam=adam)
            if cfg.enable_pose:
                _pose_stage(work, model, intr, keypoints2d, cfg, trace)
        except (KitroError, ValueError) as exc:
            work = before
            trace.error = f"iteration {m}: {exc}"
            log.warning("refinement aborted at %s", trace.error)
            break
        trace.snapshots.append(_snapshot(work, model, intr, keypoints2d, gt_joints, pelvis_mode))
    return work, trace


@dataclass
class RefineResult:
    """Refined state and trace of one sample; error mirrors trace.error."""

    state: BodyState
    trace: RefinementTrace

    @property
    def error(self) -> str | None:
        return self.trace.error


def refine_batch(samples, model: SkeletonModel, cfg: RefineConfig | None = None,
                 threads: int = 1, pelvis_mode: str = "joint0"):
    """Refine a list of synthetic samples, isolating per-sample failures.

    Returns (results, report): order-preserving RefineResult list plus an
    aggregate dict with per-iteration medians. Thread count never changes the
    outputs; samples are independent.
    """
    cfg = cfg or RefineConfig()

    def run(sample) -> RefineResult:
        gt_pos, _ = forward_kinematics(model, sample.gt)
        try:
            state, trace = refine(sample.init, model, sample.intr,
                                  sample.keypoints2d, cfg, gt_joints=gt_pos,
                                  pelvis_mode=pelvis_mode)
        except Exception as exc:  # isolate unexpected per-sample failures
            trace = RefinementTrace(error=f"unhandled: {exc}")
            trace.snapshots.append(_snapshot(sample.init, model, sample.intr,
                                             sample.keypoints2d, gt_pos, pelvis_mode))
            state = sample.init.copy()
        return RefineResult(state=state, trace=trace)

    if threads <= 1 or len(samples) <= 1:
        results = [run(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, samples))
    return results, _aggregate_report(results, cfg)


def _aggregate_report(results, cfg: RefineConfig) -> dict:
    n_iters = max((len(r.trace.snapshots) for r in results), default=0)
    series = {"reproj_px": [], "mpjpe": [], "pa_mpjpe": []}
    for name in series:
        for i in range(n_iters):
            vals = [r.trace.metric_series(name)[i] for r in results
                    if len(r.trace.snapshots) > i
                    and r.trace.metric_series(name)[i] is not None]
            series[name].append(float(np.median(vals)) if vals else None)
    solved = sum(r.trace.solved_nodes for r in results)
    rectified = sum(r.trace.rectified_nodes for r in results)
    return {
        "config": cfg.to_dict(),
        "n_samples": len(results),
        "n_failed": sum(1 for r in results if r.error is not None),
        "median_by_iteration": series,
        "rectification_rate": rectified / solved if solved else 0.0,
    }
