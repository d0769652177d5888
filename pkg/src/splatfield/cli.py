"""Command-line surface tying the pipeline together.

Commands: make-scene, train, render, extract-mesh, eval-mesh, eval-views,
ablate.  Failures print one machine-readable JSON line on stderr and exit
nonzero; argparse usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

ABLATIONS = {
    "pull-to-centers": {"pull_to_centers": "true"},
    "no-thin": {"weight_alpha": "0.0"},
    "no-tangent": {"weight_beta": "0.0"},
    "no-orthogonal": {"weight_delta": "0.0"},
    "no-pull-gaussians": {"no_pull_gaussians": "true"},
    "eikonal": {"weight_eikonal": "0.1"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatfield",
        description="Joint Gaussian-splatting / neural-SDF surface reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="generate a synthetic dataset")
    p.add_argument("--shape", default="union",
                   choices=["sphere", "box", "torus", "union"])
    p.add_argument("--views", type=int, default=30)
    p.add_argument("--size", type=int, default=64, help="image width/height")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--ref-resolution", type=int, default=256)
    p.add_argument("--out", required=True)

    for name in ("train", "ablate"):
        p = sub.add_parser(name, help="optimize Gaussians and the SDF"
                           if name == "train" else
                           "train with one ablation switch enabled")
        if name == "ablate":
            p.add_argument("switch", choices=sorted(ABLATIONS))
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--iters", type=int, default=None)
        p.add_argument("--gaussians", type=int, default=6000,
                       help="initial Gaussian count")
        p.add_argument("--log-every", type=int, default=200)

    p = sub.add_parser("render", help="render a view from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="ckpt_* directory")
    p.add_argument("--data", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--original", action="store_true",
                   help="render original instead of pulled centers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG path")

    p = sub.add_parser("extract-mesh", help="marching cubes on the SDF")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--chunks", type=int, default=1,
                   help="chunk grid per axis for chunked extraction")
    p.add_argument("--bound", type=float, default=0.98)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .obj or .ply path")

    p = sub.add_parser("eval-mesh", help="Chamfer distance and F-score")
    p.add_argument("--mesh", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--tau", type=float, default=0.02)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-out", default=None)

    p = sub.add_parser(
        "eval-views",
        help="PSNR/SSIM on a view split (LPIPS is intentionally not "
             "implemented: it needs a pretrained perceptual network)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="holdout", choices=["holdout", "train", "all"])
    p.add_argument("--original", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json-out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except BrokenPipeError:
        raise
    except Exception as e:  # single machine-readable error line
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "make-scene":
        return _cmd_make_scene(args)
    if args.command in ("train", "ablate"):
        return _cmd_train(args)
    if args.command == "render":
        return _cmd_render(args)
    if args.command == "extract-mesh":
        return _cmd_extract(args)
    if args.command == "eval-mesh":
        return _cmd_eval_mesh(args)
    if args.command == "eval-views":
        return _cmd_eval_views(args)
    raise ValueError(f"unknown command {args.command!r}")


def _cmd_make_scene(args) -> int:
    from .synth import make_scene, make_shape, save_dataset
    background = tuple(float(x) for x in args.background.split(","))
    shape = make_shape(args.shape)
    ds = make_scene(shape, args.views, args.size, seed=args.seed,
                    background=background, ref_mesh_resolution=args.ref_resolution)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.views)} views ({len(ds.holdout_views())} holdout) "
          f"to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .synth import init_gaussians, load_dataset
    from .train import TrainConfig, fit

    overrides = {}
    if args.command == "ablate":
        overrides.update(ABLATIONS[args.switch])
    for entry in args.set:
        if "=" not in entry:
            raise ValueError(f"--set expects KEY=VALUE, got {entry!r}")
        key, value = entry.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.iters is not None:
        overrides["total_iters"] = str(args.iters)

    if args.config:
        config = TrainConfig.from_file(args.config, overrides)
    else:
        config = TrainConfig.from_flat_dict(overrides)
    dataset = load_dataset(args.data)
    gset = init_gaussians(dataset, args.gaussians, seed=config.seed)
    if args.command == "ablate":
        print(f"ablation switch: {args.switch} -> {ABLATIONS[args.switch]}")
    began = time.perf_counter()
    state = fit(config, dataset, gset=gset, out_dir=args.out,
                log_every=args.log_every)
    print(f"trained {config.total_iters} iterations in "
          f"{time.perf_counter() - began:.1f}s; final total "
          f"{state.reports[-1].total:.5f}; checkpoints in {args.out}")
    return 0


def _load_checkpoint(path):
    from .gaussians import load_set
    from .sdf import load_network
    ckpt = Path(path)
    return load_set(ckpt / "gaussians.bin"), load_network(ckpt / "network.bin")


def _cmd_render(args) -> int:
    from .images import save_png
    from .raster import RenderSettings, render
    from .synth import load_dataset

    gset, net = _load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if not (0 <= args.view < len(dataset.views)):
        raise ValueError(f"view index {args.view} out of range "
                         f"(dataset has {len(dataset.views)})")
    cam = dataset.views[args.view]
    centers = None if args.original else net.pull(gset.centers)
    out = render(gset, cam, RenderSettings(), centers=centers)
    save_png(args.out, out.color)
    print(f"wrote {args.out}")
    return 0


def _cmd_extract(args) -> int:
    from .mesh import export_mesh, extract_chunked, marching_cubes, mesh_stats
    from .sdf import load_network

    net = load_network(Path(args.checkpoint) / "network.bin")
    b = args.bound
    bounds = (np.array([-b, -b, -b]), np.array([b, b, b]))
    if args.chunks > 1:
        per_chunk = max(args.resolution // args.chunks, 2)
        mesh = extract_chunked(net.values, bounds, args.chunks, per_chunk)
    else:
        mesh = marching_cubes(net.values, bounds, args.resolution)
    export_mesh(mesh, args.out, transform=net.transform)
    stats = mesh_stats(mesh)
    print(f"wrote {args.out}: {stats.triangle_count} triangles, "
          f"euler {stats.euler_characteristic}, "
          f"{'watertight' if stats.watertight else 'open'}")
    return 0


def _cmd_eval_mesh(args) -> int:
    from .mesh import load_mesh
    from .metrics import eval_meshes

    report = eval_meshes(load_mesh(args.mesh), load_mesh(args.reference),
                         tau=args.tau, n_samples=args.samples, seed=args.seed)
    print(report.table())
    print(report.to_json())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json())
    return 0


def _cmd_eval_views(args) -> int:
    from .metrics import eval_views
    from .raster import RenderSettings, render
    from .synth import load_dataset

    gset, net = _load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    views = dataset.views if args.split == "all" else [
        v for v in dataset.views if v.split == args.split]
    if not views:
        raise ValueError(f"no views in split {args.split!r}")
    centers = None if args.original else net.pull(gset.centers)
    rendered = [render(gset, v, RenderSettings(), centers=centers).color
                for v in views]
    report = eval_views(rendered, [v.image for v in views])
    print(report.table())
    print(report.to_json())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
