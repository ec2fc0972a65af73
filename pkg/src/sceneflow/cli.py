"""``sceneflow`` command line.

Every failure prints one ``ERROR <CODE>: <message>`` line to stderr and
exits nonzero; exit status 0 means the command fully succeeded.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .config import load_optimizer_config, load_preprocess_config, load_scene, load_weights
from .errors import FormatError, InvalidInputError, SceneFlowError
from .evaluation import evaluate
from .geometry import static_flow, unproject
from .icp import IcpConfig, icp_flow, icp_register
from .losses import total_loss
from .optimizer import estimate_flow, level_problems
from .preprocess import PreprocessConfig, preprocess
from .synth import render


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"ERROR USAGE: {message}\n")
        raise SystemExit(2)


def _load_flow(path, n, what):
    flow = formats.read_flow(path)
    if len(flow) != n:
        raise InvalidInputError(f"{what} has {len(flow)} vectors but the cloud has {n} points")
    return flow


# -- subcommands ---------------------------------------------------------------


def cmd_unproject(args):
    depth = formats.read_depth_image(args.depth, args.depth_scale)
    K = formats.read_intrinsics(args.intrinsics)
    image = formats.read_rgb_image(args.image) if args.image else None
    cloud = unproject(depth, K, image)
    formats.write_ply(args.out, cloud, binary=not args.ascii)
    print(f"points {len(cloud)}")


def cmd_preprocess(args):
    cloud = formats.read_ply(args.inp)
    cfg = load_preprocess_config(args.config) if args.config else PreprocessConfig()
    occl = [args.pose, args.depth2, args.intrinsics]
    if any(occl) and not all(occl):
        raise InvalidInputError("occlusion removal needs --pose, --depth2 and --intrinsics together")
    pose = depth2 = K = None
    if all(occl):
        pose = formats.read_pose(args.pose)
        depth2 = formats.read_depth_image(args.depth2, args.depth_scale)
        K = formats.read_intrinsics(args.intrinsics)
    out, kept = preprocess(cloud, cfg, pose, depth2, K)
    formats.write_ply(args.out, out, binary=not args.ascii)
    if args.out_indices:
        Path(args.out_indices).write_text("".join(f"{i}\n" for i in kept), encoding="utf-8")
    print(f"kept {len(out)}")
    print(f"removed {len(cloud) - len(out)}")


def cmd_loss(args):
    pc1 = formats.read_ply(args.pc1)
    pc2 = formats.read_ply(args.pc2)
    pose = formats.read_pose(args.pose)
    depth2 = formats.read_depth_image(args.depth2, args.depth_scale)
    K = formats.read_intrinsics(args.intrinsics)
    weights, factor, k = load_weights(args.weights)
    overall = _load_flow(args.flow, len(pc1), "--flow")
    static = static_flow(pc1, pose)
    dynamic = _load_flow(args.dynamic, len(pc1), "--dynamic") if args.dynamic else overall - static
    problems, ids1, _ = level_problems(pc1, pc2, static, depth2, K, weights.levels, factor, k)
    parts, total = total_loss(problems, [(overall[i], dynamic[i]) for i in ids1], weights)
    for lvl, b in enumerate(parts):
        sys.stdout.write(b.to_text(f"level{lvl}."))
    print(f"total {total!r}")


def cmd_estimate(args):
    pc1 = formats.read_ply(args.pc1)
    pc2 = formats.read_ply(args.pc2)
    pose = formats.read_pose(args.pose)
    depth2 = formats.read_depth_image(args.depth2, args.depth_scale)
    K = formats.read_intrinsics(args.intrinsics)
    cfg = load_optimizer_config(args.config) if args.config else None
    est = estimate_flow(pc1, pc2, depth2, K, pose, cfg)
    formats.write_flow(args.out_flow, est.overall)
    if args.out_dynamic:
        formats.write_flow(args.out_dynamic, est.dynamic)
    if args.trace:
        Path(args.trace).write_text(est.trace_csv(), encoding="utf-8")
    last = est.loss_trace[-1]
    print(f"points {len(pc1)}")
    print(f"iterations {len(est.loss_trace) - len(est.level_assignments)}")
    print(f"final_loss {last.breakdown.total!r}")


def cmd_icp(args):
    src = formats.read_ply(args.source)
    tgt = formats.read_ply(args.target)
    cfg = IcpConfig(args.max_iterations, args.convergence_delta, args.max_correspondence_distance)
    res = icp_register(src, tgt, cfg)
    formats.write_pose(args.out_pose, res.transform)
    if args.out_flow:
        formats.write_flow(args.out_flow, icp_flow(src, res.transform))
    print(f"rms {res.rms!r}")
    print(f"iterations {res.iterations}")


def cmd_eval(args):
    pred = formats.read_flow(args.pred)
    gt = formats.read_flow(args.gt)
    if args.indices:
        try:
            idx = np.array([int(x) for x in Path(args.indices).read_text(encoding="utf-8").split()], dtype=np.intp)
        except (OSError, ValueError) as exc:
            raise FormatError(args.indices, f"cannot read point indices ({exc})") from None
        if len(idx) and (idx.min() < 0 or idx.max() >= len(gt)):
            raise FormatError(args.indices, f"index out of range for {len(gt)} ground-truth vectors")
        gt = gt[idx]
    report = evaluate(pred, gt)
    sys.stdout.write(report.to_csv() if args.csv else report.to_text())


def cmd_synth(args):
    spec = load_scene(args.spec)
    res = render(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scale = args.depth_scale
    formats.write_depth_image(out / "depth1.png", res.depth1, scale)
    formats.write_depth_image(out / "depth2.png", res.depth2, scale)
    formats.write_rgb_image(out / "image1.png", res.image1)
    formats.write_rgb_image(out / "image2.png", res.image2)
    formats.write_intrinsics(out / "intrinsics.txt", spec.intrinsics)
    formats.write_pose(out / "pose.txt", res.gt_pose)
    formats.write_flow(out / "gt_flow.sfl", res.gt_flow)
    formats.write_flow(out / "static_flow.sfl", static_flow(res.pc1_exact, res.gt_pose))
    # Exact (unquantized) geometry; the depth images carry the 16-bit version.
    formats.write_ply(out / "pc1.ply", unproject(res.depth1, spec.intrinsics, res.image1))
    formats.write_ply(out / "pc2.ply", unproject(res.depth2, spec.intrinsics, res.image2))
    formats.write_mask(out / "occlusion.txt", res.occlusion_mask)
    formats.write_mask(out / "moving.txt", res.moving_mask)
    print(f"points {len(res.gt_flow)}")
    print(f"occluded {int(res.occlusion_mask.sum())}")
    print(f"moving {int(res.moving_mask.sum())}")


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sceneflow", description="Unsupervised 3-D scene flow by direct loss minimization.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.set_defaults(func=func)
        return sp

    def depth_scale(sp):
        sp.add_argument("--depth-scale", type=float, default=formats.DEFAULT_DEPTH_SCALE,
                        help="meters per depth-image unit (default 1/256)")

    sp = add("unproject", cmd_unproject, "lift a depth image to a PLY point cloud")
    sp.add_argument("--depth", required=True)
    sp.add_argument("--intrinsics", required=True)
    sp.add_argument("--image")
    sp.add_argument("--out", required=True)
    sp.add_argument("--ascii", action="store_true", help="write ascii PLY")
    depth_scale(sp)

    sp = add("preprocess", cmd_preprocess, "crop ground, sky and far points; optionally drop occluded points")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--pose")
    sp.add_argument("--depth2")
    sp.add_argument("--intrinsics")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--out-indices", help="write the kept input indices, one per line")
    sp.add_argument("--ascii", action="store_true")
    depth_scale(sp)

    sp = add("loss", cmd_loss, "evaluate the multi-level objective at a given flow")
    for name in ("pc1", "pc2", "flow", "pose", "depth2", "intrinsics", "weights"):
        sp.add_argument(f"--{name}", required=True)
    sp.add_argument("--dynamic", help="dynamic flow (default: flow minus the camera-induced flow)")
    depth_scale(sp)

    sp = add("estimate", cmd_estimate, "estimate scene flow by coarse-to-fine optimization")
    for name in ("pc1", "pc2", "pose", "depth2", "intrinsics"):
        sp.add_argument(f"--{name}", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out-flow", required=True)
    sp.add_argument("--out-dynamic")
    sp.add_argument("--trace", help="write the loss trace as CSV")
    depth_scale(sp)

    sp = add("icp", cmd_icp, "rigidly register source to target with point-to-point ICP")
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--out-pose", required=True)
    sp.add_argument("--out-flow")
    d = IcpConfig()
    sp.add_argument("--max-iterations", type=int, default=d.max_iterations)
    sp.add_argument("--convergence-delta", type=float, default=d.convergence_delta)
    sp.add_argument("--max-correspondence-distance", type=float, default=d.max_correspondence_distance)

    sp = add("eval", cmd_eval, "compare predicted and ground-truth flow")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--indices", help="select these ground-truth rows (e.g. preprocess --out-indices)")
    sp.add_argument("--csv", action="store_true")

    sp = add("synth", cmd_synth, "render a synthetic RGB-D scene with ground truth")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out-dir", required=True)
    depth_scale(sp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except SceneFlowError as exc:
        sys.stderr.write(f"ERROR {exc.code}: {exc}\n")
        return exc.exit_status
    except OSError as exc:
        sys.stderr.write(f"ERROR IO: {exc}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
