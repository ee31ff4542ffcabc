"""Command-line surface tying the pipeline together.

Subcommands: synth, train, render, extract-mesh, export-points, eval.
Global flags (--config, --seed, --threads, --set) follow the precedence
defaults < config file < --set; the effective config is echoed into every
output directory.  Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import TrainState, load_checkpoint
from .config import ConfigError, effective_config, write_config
from .flatten import export_surface_points, world_normals
from .imgio import read_pfm, read_png, write_pfm, write_png
from .mesh import marching_cubes, read_mesh_ply, write_mesh_obj, write_mesh_ply
from .metrics import MetricReport, chamfer, f1_score, psnr, ssim
from .neus import render_image
from .plyio import points_to_ply
from .scene import generate_synthetic, load_scene
from .splat import rasterize
from .training import train


def _common(parser):
    parser.add_argument("--config", help="config file (key = value sections)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker pool size for renderers/metrics")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        dest="sets", help="config override (repeatable)")


def build_parser():
    p = argparse.ArgumentParser(prog="sdfsplat",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    _common(s)
    s.add_argument("--preset", default=None,
                   help="sphere | box | torus | two_spheres")
    s.add_argument("--views", type=int, default=None)
    s.add_argument("--resolution", type=int, default=None)
    s.add_argument("--point-cloud", action="store_true", default=None,
                   help="also write a noisy surface point cloud")
    s.add_argument("--out", required=True, help="scene directory to create")

    s = sub.add_parser("train", help="train on a scene directory")
    _common(s)
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--log-every", type=int, default=0)

    s = sub.add_parser("render", help="render a view from a checkpoint")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--view", type=int, default=0)
    s.add_argument("--renderer", choices=("neus", "splat"), default="neus")
    s.add_argument("--out", required=True, help="output path base (.png/.pfm)")

    s = sub.add_parser("extract-mesh", help="marching cubes on a checkpoint")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--out", required=True, help="output base (.ply and .obj)")

    s = sub.add_parser("export-points",
                       help="write flattened-Gaussian centers as PLY")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval", help="metrics against ground truth")
    _common(s)
    s.add_argument("--mesh", help="predicted mesh (.ply)")
    s.add_argument("--gt-mesh", help="ground-truth mesh (.ply)")
    s.add_argument("--image", help="rendered image (.png or .pfm)")
    s.add_argument("--gt-image", help="reference image (.png or .pfm)")
    s.add_argument("--tau", type=float, default=0.01,
                   help="F1 distance threshold (world units)")
    s.add_argument("--mesh-samples", type=int, default=10000)
    s.add_argument("--out", help="write the metric report JSON here")
    return p


def _load_state(path) -> TrainState:
    return load_checkpoint(path)


def cmd_synth(args):
    _, spec = effective_config(args.config, args.sets, args.seed)
    if args.preset is not None:
        spec.preset = args.preset
    if args.views is not None:
        spec.n_views = args.views
    if args.resolution is not None:
        spec.resolution = args.resolution
    if args.point_cloud:
        spec.point_cloud = True
    generate_synthetic(spec, args.out)
    write_config(os.path.join(args.out, "config.cfg"), synth_cfg=spec)
    print(f"synthetic scene written to {args.out}")
    return 0


def cmd_train(args):
    cfg, _ = effective_config(args.config, args.sets, args.seed)
    scene = load_scene(args.scene)
    os.makedirs(args.out, exist_ok=True)
    write_config(os.path.join(args.out, "config.cfg"), train_cfg=cfg)
    result = train(scene, cfg, out_dir=args.out, threads=args.threads,
                   log_every=args.log_every)
    last = result.reports[-1]
    print(f"trained {last.iteration + 1} iterations; "
          f"final total={last.total:.5f}; checkpoint in {args.out}")
    return 0


def cmd_render(args):
    state = _load_state(args.checkpoint)
    scene = load_scene(args.scene)
    if not 0 <= args.view < len(scene.cameras):
        raise ValueError(f"view {args.view} out of range")
    cam = scene.cameras[args.view]
    bg = 1.0 / (1.0 + np.exp(-state.bg_logit))
    with threadpool_limits(limits=1):
        if args.renderer == "neus":
            n_samples = int(state.train_config.get("n_samples", 48) or 48)
            img = render_image(state.net, cam, float(np.exp(state.log_inv_s)),
                               bg, n_samples=n_samples)
        else:
            img = rasterize(state.gaussians, cam, bg).image
    base = args.out[:-4] if args.out.endswith((".png", ".pfm")) else args.out
    write_png(base + ".png", img)
    write_pfm(base + ".pfm", img)
    print(f"wrote {base}.png and {base}.pfm")
    return 0


def cmd_extract_mesh(args):
    state = _load_state(args.checkpoint)
    with threadpool_limits(limits=1):
        mesh = marching_cubes(state.net, args.resolution)
    base = args.out[:-4] if args.out.endswith((".ply", ".obj")) else args.out
    write_mesh_ply(base + ".ply", mesh)
    write_mesh_obj(base + ".obj", mesh)
    print(f"extracted {mesh.n_vertices} vertices / {mesh.n_triangles} "
          f"triangles to {base}.ply and {base}.obj")
    return 0


def cmd_export_points(args):
    state = _load_state(args.checkpoint)
    cfg = state.train_config or {}
    tau_alpha = float(cfg.get("tau_alpha_export", 0.5))
    tau_flat = float(cfg.get("tau_flat", 1e-3))
    g = state.gaussians
    alpha = 1.0 / (1.0 + np.exp(-g.opacity_logit))
    keep = (alpha >= tau_alpha) & (np.exp(g.log_s).min(axis=1) <= tau_flat)
    pts = export_surface_points(g, tau_alpha=tau_alpha, tau_flat=tau_flat)
    normals = world_normals(g)[keep] if keep.any() else None
    points_to_ply(args.out, pts, normals=normals)
    print(f"exported {len(pts)} surface points to {args.out}")
    return 0


def _read_image(path):
    return read_pfm(path) if path.endswith(".pfm") else read_png(path)


def cmd_eval(args):
    report = MetricReport()
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    if args.mesh and args.gt_mesh:
        pred = read_mesh_ply(args.mesh)
        gt = read_mesh_ply(args.gt_mesh)
        if pred.n_triangles == 0:
            raise ValueError("predicted mesh is empty")
        p_pts = pred.sample_points(args.mesh_samples, rng)
        g_pts = gt.sample_points(args.mesh_samples, rng)
        report.chamfer = chamfer(p_pts, g_pts)
        pr, rc, f1 = f1_score(p_pts, g_pts, args.tau)
        report.precision, report.recall, report.f1 = pr, rc, f1
        report.f1_threshold = args.tau
    if args.image and args.gt_image:
        a = _read_image(args.image)
        b = _read_image(args.gt_image)
        report.psnr = psnr(a, b)
        report.ssim = ssim(a, b)
    print(report.to_json(args.out))
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "extract-mesh": cmd_extract_mesh,
    "export-points": cmd_export_points,
    "eval": cmd_eval,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
