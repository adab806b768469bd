"""Command-line front end: ``sparsevox <subcommand> ...``.

Exit codes: 0 success, 1 runtime error (I/O, format, numeric), 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .attention import pillar_compress
from .backbone import backbone_forward
from .config import (CBS_RATES, PRESETS, CropRange, PipelineConfig, VoxelizationSpec, load_config,
                     preset, save_config)
from .errors import SparseVoxError
from .pipeline import synthetic_grid
from .pointcloud import crop_points, load_points, save_points_bin, voxelize
from .scenes import SceneParams, synthetic_scene
from .selftest import SelftestContext, run_selftest
from .voting import center_voting, load_boxes_csv, save_boxes_csv
from .voxel_hash import load_grid, save_grid
from .weights import init_weights, load_tensors, load_weights, save_weights

log = logging.getLogger("sparsevox")


class UsageError(Exception):
    """Bad flag combination detected after argparse; maps to exit code 2."""


def _add_config_flags(p: argparse.ArgumentParser, geometry: bool = False):
    p.add_argument("--config", help="pipeline config JSON (defaults built in)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (1 = deterministic order)")
    p.add_argument("--blocks", type=int, help="number of attention blocks (default 4)")
    p.add_argument("--cbs-rate", choices=CBS_RATES, help="chessboard sampling rate")
    p.add_argument("--seed", type=int, default=0, help="seed for generated weights and scenes")
    if geometry:
        p.add_argument("--preset", choices=sorted(PRESETS), help="voxelization preset")
        p.add_argument("--voxel-size", type=float, nargs=3, metavar=("X", "Y", "Z"))
        p.add_argument("--range", type=float, nargs=6,
                       metavar=("XMIN", "YMIN", "ZMIN", "XMAX", "YMAX", "ZMAX"))
        p.add_argument("--feature-dim", type=int, help="voxel feature channels (default: config channels)")


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    changes = {}
    if getattr(args, "blocks", None) is not None:
        changes["num_blocks"] = args.blocks
    if getattr(args, "cbs_rate", None) is not None:
        changes["cbs_rate"] = args.cbs_rate
    if getattr(args, "feature_dim", None) is not None:
        changes["channels"] = args.feature_dim
    spec = _resolve_geometry(args, cfg.voxelization)
    if spec is not None:
        changes["voxelization"] = spec
    return cfg.replace(**changes) if changes else cfg


def _resolve_geometry(args, current: VoxelizationSpec) -> VoxelizationSpec | None:
    name = getattr(args, "preset", None)
    vs = getattr(args, "voxel_size", None)
    rng = getattr(args, "range", None)
    if name and (vs or rng):
        raise UsageError("--preset cannot be combined with --voxel-size/--range")
    if name:
        return preset(name)[0]
    if vs is None and rng is None:
        return None
    crop = CropRange(tuple(rng[:3]), tuple(rng[3:])) if rng else current.crop_range
    return VoxelizationSpec.from_range(tuple(vs) if vs else current.voxel_size, crop)


def _weights(args, cfg):
    if getattr(args, "weights", None):
        return load_weights(args.weights, cfg)
    log.info("no --weights given; using seeded initialization (seed %d)", args.seed)
    return init_weights(cfg, args.seed)


def _check_threads(args):
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")


def cmd_voxelize(args) -> int:
    cfg = resolve_config(args)
    spec = cfg.voxelization
    cloud = load_points(args.input, args.format)
    cropped = crop_points(cloud, spec.crop_range)
    grid = voxelize(cropped, spec, cfg.channels)
    save_grid(grid, args.output)
    print(f"{len(cloud)} points ({len(cloud) - len(cropped)} outside range) -> "
          f"{grid.num_voxels} voxels, extent {grid.extent}, {grid.channels} channels")
    return 0


def cmd_forward(args) -> int:
    _check_threads(args)
    grid = load_grid(args.input)
    cfg = resolve_config(args)
    w = _weights(args, cfg)
    refined, stats = backbone_forward(grid, cfg, w.blocks, args.threads)
    save_grid(refined, args.output)
    for s in stats:
        print(f"block {s.block_index}: symbol {s.symbol}, {s.num_queries} queries, "
              f"{s.num_interpolated} interpolated, {s.num_passthrough} passed through, "
              f"keys per scale {s.key_counts}")
    if args.bev:
        bev = pillar_compress(refined, w.pillar)
        np.save(args.bev, bev.to_dense())
        print(f"BEV map {bev.to_dense().shape} -> {args.bev}")
    return 0


def cmd_vote(args) -> int:
    _check_threads(args)
    refined = load_grid(args.input)
    cfg = resolve_config(args)
    if args.merge:
        cfg = cfg.replace(vote=dataclasses.replace(cfg.vote, merge=args.merge))
    w = _weights(args, cfg)
    boxes = load_boxes_csv(args.boxes) if args.boxes else None
    if args.mode == "oracle" and boxes is None:
        raise UsageError("--mode oracle requires --boxes")
    merged, rep = center_voting(refined, cfg, w.vote, w.context, boxes, args.mode, args.threads)
    save_grid(merged, args.output)
    print(f"{rep.num_votes} votes -> {rep.num_vote_voxels} vote voxels ({rep.clamped} clamped); "
          f"inserted {rep.merge.inserted}, replaced {rep.merge.replaced}; "
          f"{refined.num_voxels} -> {merged.num_voxels} voxels")
    return 0


def cmd_scene(args) -> int:
    cfg = resolve_config(args)
    params = SceneParams(num_boxes=args.boxes_count, points_per_box=args.points_per_box,
                         ground_points=args.ground_points)
    cloud, boxes = synthetic_scene(args.seed, cfg.voxelization.crop_range, params)
    save_points_bin(cloud, args.output)
    if args.boxes:
        save_boxes_csv(boxes, args.boxes)
    print(f"{len(cloud)} points, {len(boxes)} boxes")
    return 0


def cmd_bench(args) -> int:
    _check_threads(args)
    t0 = time.perf_counter()
    cfg = resolve_config(args)
    grid = load_grid(args.input) if args.input else synthetic_grid(args.voxels, cfg, args.seed)
    if grid.channels != cfg.channels:
        cfg = cfg.replace(channels=grid.channels)
    w = init_weights(cfg.replace(num_blocks=1), args.seed).blocks[0]
    rates = args.rates.split(",") if args.rates else list(CBS_RATES)
    bad = [r for r in rates if r not in CBS_RATES]
    if bad:
        raise UsageError(f"unknown rates {bad}; choose from {CBS_RATES}")
    rows = bench.bench_block(grid, cfg, w, rates, repeats=args.repeats,
                             memory=not args.no_memory, workers=args.threads)
    if args.dense:
        # the loop-based reference only handles small extents
        geom = VoxelizationSpec.from_range((0.4, 0.4, 0.6), CropRange((0, 0, -2), (12.8, 12.8, 4)))
        scfg = cfg.replace(channels=16, heads_per_group=(2, 2), num_keys=None, max_gather=None,
                           voxelization=geom)
        small = synthetic_grid(args.dense_voxels, scfg, args.seed,
                               SceneParams(num_boxes=2, ground_points=2000, margin=2.5))
        sw = init_weights(scfg.replace(num_blocks=1), args.seed).blocks[0]
        rows += bench.bench_block(small, scfg, sw, rates, dense=True, memory=not args.no_memory)
    text = bench.rows_to_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    print(bench.format_table(rows))
    if args.gather:
        g = bench.bench_gather(seed=args.seed)
        print(f"\ngather: hash {g.sparse_ms} ms vs linear scan {g.scan_ms} ms over "
              f"{g.num_probes} probes, N={g.num_voxels}, agree={g.agree}")
    print(f"\nbench finished in {time.perf_counter() - t0:.1f} s")
    return 0


def cmd_selftest(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    results = run_selftest(SelftestContext(cfg, args.weights, args.seed), args.filter)
    if not results:
        raise UsageError(f"no checks match filter {args.filter!r}")
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}" + (f": {r.message}" if r.message else ""))
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def cmd_weights(args) -> int:
    if args.action == "init":
        cfg = resolve_config(args)
        save_weights(init_weights(cfg, args.seed), args.output)
        print(f"wrote {args.output}")
    elif args.action == "dump":
        tensors = load_tensors(args.weights)
        for name, arr in tensors.items():
            print(f"{name:24s} {str(arr.shape):16s} mean {arr.mean():+.5f} std {arr.std():.5f}")
    return 0


def cmd_config(args) -> int:
    cfg = resolve_config(args)
    if args.output:
        save_config(cfg, args.output)
    else:
        print(json.dumps(cfg.to_dict(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsevox", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="point cloud file -> grid container")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("kitti_bin", "csv"), default="kitti_bin")
    p.add_argument("--output", required=True)
    _add_config_flags(p, geometry=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("forward", help="run the attention backbone on a grid")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weights", help="weight container (default: seeded init)")
    p.add_argument("--bev", help="also write the pillar-compressed BEV map as .npy")
    _add_config_flags(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("vote", help="center voting on a refined grid")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weights")
    p.add_argument("--boxes", help="ground-truth CSV: cx,cy,cz,l,w,h,yaw")
    p.add_argument("--mode", choices=("oracle", "predicted"), default="predicted")
    p.add_argument("--merge", choices=("replace", "mean"))
    _add_config_flags(p)
    p.set_defaults(func=cmd_vote)

    p = sub.add_parser(
        "bench", help="block-forward sweep over chessboard rates",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="CSV columns:\n" + bench.__doc__.split("CSV columns", 1)[1].split("\n", 1)[1],
    )
    p.add_argument("--input", help="grid container to benchmark (default: synthetic scene)")
    p.add_argument("--voxels", type=int, default=50_000, help="synthetic scene size")
    p.add_argument("--rates", help="comma-separated subset of " + ",".join(CBS_RATES))
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--dense", action="store_true", help="add dense-reference rows on a small scene")
    p.add_argument("--dense-voxels", type=int, default=400)
    p.add_argument("--gather", action="store_true", help="also compare hash lookup with a linear scan")
    p.add_argument("--no-memory", action="store_true", help="skip the traced-memory pass")
    p.add_argument("--csv", help="write rows to this CSV file")
    _add_config_flags(p, geometry=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="oracle-equivalence and invariant checks")
    p.add_argument("--filter", help="run only checks whose name contains this text")
    p.add_argument("--weights", help="also validate this weight file")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("scene", help="write a synthetic point cloud and its boxes")
    p.add_argument("--output", required=True, help="kitti_bin point file")
    p.add_argument("--boxes", help="ground-truth CSV output")
    p.add_argument("--boxes-count", type=int, default=8)
    p.add_argument("--points-per-box", type=int, default=1500)
    p.add_argument("--ground-points", type=int, default=20000)
    _add_config_flags(p, geometry=True)
    p.set_defaults(func=cmd_scene)

    p = sub.add_parser("weights", help="create or inspect weight containers")
    p.add_argument("action", choices=("init", "dump"))
    p.add_argument("--output")
    p.add_argument("--weights")
    _add_config_flags(p, geometry=True)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("config", help="print or save the resolved config")
    p.add_argument("--output")
    _add_config_flags(p, geometry=True)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "weights":
        if args.action == "init" and not args.output:
            parser.error("weights init needs --output")
        if args.action == "dump" and not args.weights:
            parser.error("weights dump needs --weights")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (SparseVoxError, OSError, ValueError, IndexError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
