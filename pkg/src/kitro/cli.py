"""Command-line front end: generate, refine, eval, ablate.

All file I/O is JSON/JSONL. Exit codes: 0 success, 1 partial sample
failures, 2 usage/config error, 3 I/O error. Set KITRO_LOG to control log
verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench
from .camera import CameraIntrinsics
from .refiner import RefineConfig, refine_batch
from .skeleton import default_skeleton, load_skeleton

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
EXIT_IO = 3


class CliIOError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("KITRO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _positive_int(value: str) -> int:
    n = int(value)
    if n <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {n}")
    return n


def _check_output(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not force:
        raise CliIOError(f"{out} exists; pass --force to overwrite")
    if out.parent and not out.parent.exists():
        raise CliIOError(f"output directory {out.parent} does not exist")
    return out


def _load_model(args):
    if getattr(args, "skeleton", None):
        try:
            return load_skeleton(args.skeleton)
        except OSError as exc:
            raise CliIOError(f"cannot read skeleton: {exc}") from exc
    return default_skeleton()


def _read_samples(path: str):
    try:
        return bench.read_samples(path)
    except OSError as exc:
        raise CliIOError(f"cannot read samples: {exc}") from exc


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (flags take precedence)")
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--shape-steps", type=int, default=None)
    parser.add_argument("--shape-lr", type=float, default=None)
    parser.add_argument("--no-camera", action="store_true")
    parser.add_argument("--no-shape", action="store_true")
    parser.add_argument("--no-pose", action="store_true")
    parser.add_argument("--hard-update", action="store_true")
    parser.add_argument("--greedy", action="store_true")
    parser.add_argument("--adam-carry", action="store_true")
    parser.add_argument("--dump-trees", action="store_true")
    parser.add_argument("--focal-override", type=float, default=None)
    parser.add_argument("--threads", type=_positive_int, default=1)
    parser.add_argument("--pelvis-mode", choices=["joint0", "hip-mean"],
                        default="joint0")


def _build_config(args) -> RefineConfig:
    """Merge precedence: flags > config file > defaults."""
    values = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except OSError as exc:
            raise CliIOError(f"cannot read config: {exc}") from exc
    if args.iterations is not None:
        values["iterations"] = args.iterations
    if args.shape_steps is not None:
        values["shape_steps"] = args.shape_steps
    if args.shape_lr is not None:
        values["shape_lr"] = args.shape_lr
    if args.no_camera:
        values["enable_camera"] = False
    if args.no_shape:
        values["enable_shape"] = False
    if args.no_pose:
        values["enable_pose"] = False
    if args.hard_update:
        values["soft_update"] = False
    if args.greedy:
        values["selection_mode"] = "greedy"
    if args.adam_carry:
        values["adam_carry"] = True
    if args.dump_trees:
        values["dump_trees"] = True
    return RefineConfig.from_dict(values)


def _apply_focal_override(samples, focal: float | None):
    if focal is None:
        return samples
    for sample in samples:
        sample.intr = sample.intr.with_focal(focal)
    return samples


def cmd_generate(args) -> int:
    out = _check_output(args.output, args.force)
    model = _load_model(args)
    perturb = bench.PerturbSpec(rot_sigma_deg=args.rot_sigma,
                                beta_sigma=args.beta_sigma,
                                trans_sigma_m=args.trans_sigma)
    intr = CameraIntrinsics.from_image_size(args.image_size[0], args.image_size[1])
    samples = bench.generate_samples(
        model, args.count, perturb=perturb, noise2d_px=args.noise2d,
        seed=args.seed, intr=intr, angle_limit_deg=args.angle_limit)
    try:
        bench.write_samples(samples, out)
    except OSError as exc:
        raise CliIOError(f"cannot write samples: {exc}") from exc
    print(f"wrote {len(samples)} samples to {out} (seed {args.seed})")
    return EXIT_OK


def _trace_payload(trace) -> dict:
    payload = {
        "reproj_px": trace.metric_series("reproj_px"),
        "mpjpe": trace.metric_series("mpjpe"),
        "pa_mpjpe": trace.metric_series("pa_mpjpe"),
        "rectification_rate": trace.rectification_rate,
        "error": trace.error,
    }
    if trace.tree_dumps:
        payload["trees"] = trace.tree_dumps
    return payload


def cmd_refine(args) -> int:
    out = _check_output(args.output, args.force)
    trace_out = _check_output(args.trace, args.force) if args.trace else None
    samples = _read_samples(args.input)
    samples = _apply_focal_override(samples, args.focal_override)
    model = _load_model(args)
    cfg = _build_config(args)
    results, report = refine_batch(samples, model, cfg, threads=args.threads,
                                   pelvis_mode=args.pelvis_mode)
    try:
        with out.open("w") as fh:
            for sample, result in zip(samples, results):
                fh.write(json.dumps({
                    "refined": bench.body_state_to_dict(result.state),
                    "error": result.error,
                    "seed": sample.seed,
                }) + "\n")
        if trace_out:
            trace_out.write_text(json.dumps({
                "config": cfg.to_dict(),
                "report": report,
                "traces": [_trace_payload(r.trace) for r in results],
            }, indent=2))
    except OSError as exc:
        raise CliIOError(f"cannot write results: {exc}") from exc
    n_failed = report["n_failed"]
    print(f"refined {len(results)} samples ({n_failed} failed) -> {out}")
    return EXIT_PARTIAL if n_failed else EXIT_OK


def _read_results(path: str):
    states, errors = [], []
    try:
        with Path(path).open() as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                states.append(bench.body_state_from_dict(d["refined"]))
                errors.append(d.get("error"))
    except OSError as exc:
        raise CliIOError(f"cannot read results: {exc}") from exc
    return states, errors


_ARM_CHAIN_PAIRS = [(22, 23), (20, 21), (18, 19), (16, 17), (13, 14)]
_ARM_CHAIN_LABELS = ["Hand", "Wrist", "Elbow", "Shoulder", "Collar"]


def _chain_profile(samples, states, model, pelvis_mode) -> dict:
    """Per-joint improvement along the arm chain, distal to proximal."""
    from .skeleton import forward_kinematics
    init_err = []
    final_err = []
    for sample, state in zip(samples, states):
        gt_pos, _ = forward_kinematics(model, sample.gt)
        init_pos, _ = forward_kinematics(model, sample.init)
        pred_pos, _ = forward_kinematics(model, state)
        init_err.append(bench.per_joint_error_mm(init_pos, gt_pos, pelvis_mode))
        final_err.append(bench.per_joint_error_mm(pred_pos, gt_pos, pelvis_mode))
    init_err = np.mean(init_err, axis=0)
    final_err = np.mean(final_err, axis=0)
    profile = []
    for label, (l, r) in zip(_ARM_CHAIN_LABELS, _ARM_CHAIN_PAIRS):
        profile.append({
            "joint": label,
            "init_mm": float((init_err[l] + init_err[r]) / 2.0),
            "refined_mm": float((final_err[l] + final_err[r]) / 2.0),
            "improvement_mm": float(((init_err[l] - final_err[l])
                                     + (init_err[r] - final_err[r])) / 2.0),
        })
    return {"ordering": "distal-to-proximal", "joints": profile}


def cmd_eval(args) -> int:
    out = _check_output(args.output, args.force)
    samples = _read_samples(args.input)
    states, errors = _read_results(args.results)
    if len(states) != len(samples):
        print(f"error: {len(samples)} samples vs {len(states)} results",
              file=sys.stderr)
        return EXIT_USAGE
    model = _load_model(args)
    rect_rate = None
    curves = None
    if args.trace:
        try:
            trace_doc = json.loads(Path(args.trace).read_text())
        except OSError as exc:
            raise CliIOError(f"cannot read trace: {exc}") from exc
        rect_rate = trace_doc.get("report", {}).get("rectification_rate")
        curves = trace_doc.get("report", {}).get("median_by_iteration")
    report = bench.evaluate(samples, states, pelvis_mode=args.pelvis_mode,
                            rectification_rate=rect_rate, model=model)
    init_mp = []
    final_mp = []
    from .skeleton import forward_kinematics
    for sample, state in zip(samples, states):
        gt_pos, _ = forward_kinematics(model, sample.gt)
        init_pos, _ = forward_kinematics(model, sample.init)
        pred_pos, _ = forward_kinematics(model, state)
        init_mp.append(bench.mpjpe(init_pos, gt_pos, args.pelvis_mode))
        final_mp.append(bench.mpjpe(pred_pos, gt_pos, args.pelvis_mode))
    improvements = [i - f for i, f in zip(init_mp, final_mp)]
    hist, edges = np.histogram(improvements, bins=20)
    payload = {
        "config": {"pelvis_mode": args.pelvis_mode},
        "metrics": report.to_dict(),
        "n_errors": sum(1 for e in errors if e),
        "improvement_mm": {
            "per_sample": improvements,
            "histogram_counts": hist.tolist(),
            "histogram_edges": edges.tolist(),
        },
        "chain_profile": _chain_profile(samples, states, model, args.pelvis_mode),
    }
    if curves is not None:
        payload["median_by_iteration"] = curves
    try:
        out.write_text(json.dumps(payload, indent=2))
    except OSError as exc:
        raise CliIOError(f"cannot write report: {exc}") from exc
    print(f"MPJPE {report.mpjpe:.2f} mm | PA-MPJPE {report.pa_mpjpe:.2f} mm | "
          f"reproj {report.reproj_px:.3f} px | improved "
          f"{report.improvement_fraction:.1%} -> {out}")
    return EXIT_OK


def _ablation_rows() -> list[dict]:
    rows = []
    for camera in (False, True):
        for shape in (False, True):
            for pose in (False, True):
                rows.append({
                    "label": f"camera={'on' if camera else 'off'},"
                             f"shape={'on' if shape else 'off'},"
                             f"pose={'on' if pose else 'off'}",
                    "enable_camera": camera, "enable_shape": shape,
                    "enable_pose": pose,
                    "selection_mode": "tree", "soft_update": True,
                })
    for mode in ("greedy", "tree"):
        for soft in (True, False):
            rows.append({
                "label": f"pose={mode}+{'soft' if soft else 'hard'}-update",
                "enable_camera": True, "enable_shape": True, "enable_pose": True,
                "selection_mode": mode, "soft_update": soft,
            })
    return rows


def cmd_ablate(args) -> int:
    out = _check_output(args.output, args.force)
    samples = _read_samples(args.input)
    samples = _apply_focal_override(samples, args.focal_override)
    model = _load_model(args)
    base_cfg = _build_config(args)
    cache: dict[tuple, dict] = {}
    rows = []
    any_failed = False
    for row in _ablation_rows():
        cfg = RefineConfig(
            iterations=base_cfg.iterations, shape_steps=base_cfg.shape_steps,
            shape_lr=base_cfg.shape_lr, enable_camera=row["enable_camera"],
            enable_shape=row["enable_shape"], enable_pose=row["enable_pose"],
            soft_update=row["soft_update"], selection_mode=row["selection_mode"],
            adam_carry=base_cfg.adam_carry)
        key = tuple(sorted(cfg.to_dict().items()))
        if key not in cache:
            results, report = refine_batch(samples, model, cfg,
                                           threads=args.threads,
                                           pelvis_mode=args.pelvis_mode)
            metrics = bench.evaluate(
                samples, [r.state for r in results], pelvis_mode=args.pelvis_mode,
                rectification_rate=report["rectification_rate"], model=model)
            cache[key] = {"metrics": metrics.to_dict(),
                          "n_failed": report["n_failed"]}
        entry = cache[key]
        any_failed = any_failed or entry["n_failed"] > 0
        rows.append({**row, **entry})
        log.info("ablation %s: median MPJPE %.2f mm", row["label"],
                 entry["metrics"]["mpjpe_median"])
    try:
        out.write_text(json.dumps({
            "config": base_cfg.to_dict(),
            "pelvis_mode": args.pelvis_mode,
            "n_samples": len(samples),
            "rows": rows,
        }, indent=2))
    except OSError as exc:
        raise CliIOError(f"cannot write table: {exc}") from exc
    print(f"wrote {len(rows)} ablation rows -> {out}")
    return EXIT_PARTIAL if any_failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kitro",
        description="Kinematic-tree refinement of 3D body pose from 2D keypoints")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic sample file")
    gen.add_argument("-n", "--count", type=_positive_int, required=True)
    gen.add_argument("-o", "--output", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise2d", type=float, default=0.0,
                     help="keypoint Gaussian noise std (px)")
    gen.add_argument("--rot-sigma", type=float, default=10.0,
                     help="per-joint rotation noise std (deg)")
    gen.add_argument("--beta-sigma", type=float, default=0.5)
    gen.add_argument("--trans-sigma", type=float, default=0.05)
    gen.add_argument("--angle-limit", type=float, default=60.0,
                     help="per-joint ground-truth angle limit (deg)")
    gen.add_argument("--image-size", type=float, nargs=2, default=[1000, 1000],
                     metavar=("H", "W"))
    gen.add_argument("--skeleton", help="skeleton model JSON (default: bundled)")
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_generate)

    ref = sub.add_parser("refine", help="refine a sample file")
    ref.add_argument("-i", "--input", required=True)
    ref.add_argument("-o", "--output", required=True)
    ref.add_argument("--trace", help="write per-iteration traces to this JSON file")
    ref.add_argument("--skeleton")
    ref.add_argument("--force", action="store_true")
    _add_config_flags(ref)
    ref.set_defaults(func=cmd_refine)

    ev = sub.add_parser("eval", help="score refined results against ground truth")
    ev.add_argument("-i", "--input", required=True, help="samples JSONL")
    ev.add_argument("-r", "--results", required=True, help="refined results JSONL")
    ev.add_argument("-o", "--output", required=True, help="report JSON")
    ev.add_argument("--trace", help="trace JSON from refine (adds curves)")
    ev.add_argument("--skeleton")
    ev.add_argument("--pelvis-mode", choices=["joint0", "hip-mean"],
                    default="joint0")
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="run the stage/selection ablation grid")
    ab.add_argument("-i", "--input", required=True)
    ab.add_argument("-o", "--output", required=True)
    ab.add_argument("--skeleton")
    ab.add_argument("--force", action="store_true")
    _add_config_flags(ab)
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
