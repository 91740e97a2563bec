"""Batch command line: phantom generation, scripted active-learning runs,
evaluation, benchmark timing, and the interactive HTTP server.

A segmentation run is driven by a JSON manifest that pins every input
(volume, feature config, per-iteration seed files, grid settings, delta,
levels, postprocessing chain, output directory, seeds), so two runs of
the same manifest produce bit-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import resource
import sys
import time

import numpy as np

from . import __version__, phantom, postproc, textkv
from .features import FeatureConfig
from .learner import (Session, classify_region, classify_volume,
                      multires_segment, parse_seed_file, train_iteration)
from .svm import HyperGrid, deserialize_model
from .volume import Box, load_volume, save_volume


class ManifestError(Exception):
    pass


def _resolve(base_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    for key in ("volume", "ground_truth", "out"):
        if key in manifest:
            manifest[key] = _resolve(base, manifest[key])
    manifest["seed_files"] = [_resolve(base, p) for p in manifest.get("seed_files", [])]
    required = [k for k in ("volume", "out", "seed_files") if k not in manifest or not manifest[k]]
    if required:
        raise ManifestError(f"manifest missing required keys: {required}")
    for p in [manifest["volume"] + ".raw"] + manifest["seed_files"]:
        if not os.path.exists(p):
            raise ManifestError(f"manifest references missing file: {p}")
    if "ground_truth" in manifest and not os.path.exists(manifest["ground_truth"] + ".raw"):
        raise ManifestError(f"missing ground truth: {manifest['ground_truth']}")
    if int(manifest.get("levels", 1)) < 1:
        raise ManifestError("levels must be >= 1")
    return manifest


def feature_config_from_manifest(entry: dict) -> FeatureConfig:
    entry = dict(entry)
    if "features" in entry:
        entry["features"] = tuple(entry["features"])
    if "curvature_range" in entry:
        entry["curvature_range"] = tuple(entry["curvature_range"])
    return FeatureConfig(**entry)


def cmd_phantom(args) -> int:
    spec = phantom.load_spec(args.spec)
    vol, labels = phantom.make_phantom(spec)
    save_volume(vol.read_region(Box.full(vol.dims)), args.out)
    save_volume(labels.read_region(Box.full(labels.dims)), args.out + "_labels")
    print(f"phantom written: {args.out}.raw ({vol.dims}), labels: {args.out}_labels.raw")
    return 0


def _postprocess(conf: np.ndarray, chain: dict) -> np.ndarray:
    seg = postproc.threshold(conf, int(chain.get("threshold", 50)))
    if "speckle_k" in chain:
        seg = postproc.speckle_removal(seg, int(chain["speckle_k"]),
                                       int(chain.get("speckle_eta", 0)))
    rule = chain.get("select")
    if rule:
        labeled = postproc.connected_components(seg, int(chain.get("connectivity", 26)))
        if rule == "largest":
            seg = postproc.select_components(labeled, largest=int(chain.get("largest", 1)))
        elif rule == "min_size":
            seg = postproc.select_components(labeled, min_size=int(chain["min_size"]))
        elif rule == "containing":
            seg = postproc.select_components(labeled, containing=chain["containing"])
        else:
            raise ManifestError(f"unknown selection rule {rule!r}")
    return seg


def cmd_segment(args) -> int:
    manifest = load_manifest(args.manifest)
    # command-line flags override the manifest
    if args.out:
        manifest["out"] = os.path.abspath(args.out)
    if args.seedfile:
        for path in args.seedfile:
            if not os.path.exists(path):
                raise ManifestError(f"missing seed file: {path}")
        manifest["seed_files"] = [os.path.abspath(p) for p in args.seedfile]
    if args.delta is not None:
        manifest["delta"] = args.delta
    if args.levels:
        manifest["levels"] = args.levels
    out_dir = manifest["out"]
    os.makedirs(out_dir, exist_ok=True)
    workers = args.workers or int(manifest.get("workers", 1))
    levels = int(manifest.get("levels", 1))
    delta = float(manifest.get("delta", 1.0))
    config = feature_config_from_manifest(manifest.get("feature_config", {}))
    grid = None
    if "grid" in manifest:
        g = manifest["grid"]
        if "nus" in g:
            grid = HyperGrid(tuple(g["nus"]), tuple(g["gammas"]),
                             int(g.get("folds", 7)))
        else:
            grid = {k: g[k] for k in ("n_nu", "gamma_exponents", "folds") if k in g}

    timing: dict[str, float] = {"train": 0.0, "classify": 0.0, "io": 0.0}
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    block_size = args.block_size or int(manifest.get("block_size", 64))
    source = load_volume(manifest["volume"],
                         force_file_backed=bool(manifest.get("file_backed", False)),
                         block_size=block_size)
    gt = None
    if "ground_truth" in manifest:
        gt_vol = load_volume(manifest["ground_truth"])
        gt = gt_vol.read_region(Box.full(gt_vol.dims)) > 0
    timing["io"] += time.perf_counter() - t0

    cache_mb = args.kernel_cache_mb or int(manifest.get("kernel_cache_mb", 256))
    session = Session(source=source, config=config, delta=delta, levels=levels,
                      grid=grid, cv_seed=int(manifest.get("cv_seed", 0)),
                      workers=workers, cache_bytes=cache_mb * 1024 * 1024)
    chain = manifest.get("postproc", {})
    iou_by_iter = []
    for it, seed_path in enumerate(manifest["seed_files"], start=1):
        seeds = parse_seed_file(seed_path)
        t0 = time.perf_counter()
        train_iteration(session, seeds)
        timing["train"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        if levels > 1:
            conf = multires_segment(session)
        else:
            conf = classify_volume(session)
        timing["classify"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        save_volume(conf, os.path.join(out_dir, f"confidence_iter{it}"), source.spacing)
        save_volume(session.uncertainty_values,
                    os.path.join(out_dir, f"uncertainty_iter{it}"), source.spacing)
        timing["io"] += time.perf_counter() - t0
        if gt is not None:
            seg = _postprocess(conf, chain)
            report = postproc.metrics(seg, gt)
            iou_by_iter.append(report.iou)
            print(f"iteration {it}: IoU={report.iou:.4f} precision={report.precision:.4f} "
                  f"recall={report.recall:.4f} f1={report.f1:.4f}")

    seg = _postprocess(session.confidence, chain)
    t0 = time.perf_counter()
    save_volume(seg.astype(np.uint8), os.path.join(out_dir, "segmentation"),
                source.spacing)
    timing["io"] += time.perf_counter() - t0

    if gt is not None:
        report = postproc.metrics(seg, gt)
        with open(os.path.join(out_dir, "metrics.kv"), "w", encoding="utf-8") as fh:
            fh.write(report.serialize())
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write("scan,iou,precision,recall,f1\n")
            fh.write(report.csv_row(manifest.get("name", "scan")) + "\n")
        print(f"final: IoU={report.iou:.4f}")

    timing["total"] = time.perf_counter() - t_start
    textkv.dump({k: repr(v) for k, v in timing.items()},
                os.path.join(out_dir, "timing.kv"))
    if iou_by_iter:
        textkv.dump({f"iteration_{i + 1}": repr(v) for i, v in enumerate(iou_by_iter)},
                    os.path.join(out_dir, "iou_by_iteration.kv"))
    with open(os.path.join(out_dir, "manifest.resolved.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def cmd_eval(args) -> int:
    seg_vol = load_volume(args.seg)
    gt_vol = load_volume(args.gt)
    seg = seg_vol.read_region(Box.full(seg_vol.dims))
    gt = gt_vol.read_region(Box.full(gt_vol.dims)) > 0
    seg = seg >= args.threshold if seg.dtype != bool else seg
    report = postproc.metrics(seg, gt)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.serialize())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("scan,iou,precision,recall,f1\n")
            fh.write(report.csv_row(args.name) + "\n")
    print(report.serialize(), end="")
    return 0


def cmd_bench(args) -> int:
    model, _ = deserialize_model(args.model)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = []
    prev_time = None
    prev_vox = None
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        for size in sizes:
            spec = {
                "dims": [size, size, size], "dtype": "u8", "background": 40,
                "noise": {"sigma": 10.0, "seed": 1},
                "primitives": [{"shape": "box",
                                "lo": [size // 4] * 3,
                                "hi": [size // 4 + max(2, size // 8)] * 3,
                                "value": 200}],
            }
            vol, _ = phantom.make_phantom(spec)
            base = os.path.join(tmp, f"bench{size}")
            save_volume(vol.read_region(Box.full(vol.dims)), base)
            source = load_volume(base, force_file_backed=args.file_backed,
                                 cache_budget=args.cache_mb * 1024 * 1024)
            # warm up kernels and caches before timing
            warm = Box((0, 0, 0), tuple(min(d, 16) for d in source.dims))
            classify_region(source, model, [warm], workers=args.workers)
            t0 = time.perf_counter()
            classify_region(source, model, workers=args.workers)
            elapsed = time.perf_counter() - t0
            voxels = size ** 3
            ratio = elapsed / prev_time if prev_time else float("nan")
            per_doubling = (ratio ** (1.0 / np.log2(voxels / prev_vox))
                            if prev_vox and voxels > prev_vox else float("nan"))
            rows.append((size, voxels, elapsed, ratio, per_doubling))
            prev_time, prev_vox = elapsed, voxels
    peak_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    print(f"{'size':>6} {'voxels':>12} {'seconds':>10} {'ratio':>8} {'per_doubling':>13}")
    for size, vox, secs, ratio, perd in rows:
        print(f"{size:>6} {vox:>12} {secs:>10.3f} {ratio:>8.3f} {perd:>13.3f}")
    print(f"peak_rss_mb {peak_mb:.1f}")
    if args.out:
        entries = {}
        for size, vox, secs, ratio, perd in rows:
            entries[f"seconds_{size}"] = repr(secs)
            entries[f"ratio_{size}"] = repr(ratio)
            entries[f"per_doubling_{size}"] = repr(perd)
        entries["peak_rss_mb"] = repr(peak_mb)
        textkv.dump(entries, args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app
    app = create_app(workers=args.workers)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxseg",
        description="Active-learning segmentation of 3D grayscale volumes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="rasterize a synthetic phantom spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("segment", help="run a scripted segmentation manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--workers", type=int, default=0,
                   help="override the manifest's worker count")
    p.add_argument("--delta", type=float, default=None,
                   help="override the uncertainty width parameter")
    p.add_argument("--levels", type=int, default=0,
                   help="override the number of resolution levels")
    p.add_argument("--block-size", type=int, default=0,
                   help="file-backed block edge length in voxels")
    p.add_argument("--kernel-cache-mb", type=int, default=0,
                   help="solver kernel-row cache budget")
    p.add_argument("--seedfile", action="append", default=[],
                   help="seed file for one iteration (repeatable, overrides "
                        "the manifest's list)")
    p.add_argument("--out", default="",
                   help="override the manifest's output directory")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="compare a segmentation against ground truth")
    p.add_argument("--seg", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv")
    p.add_argument("--name", default="scan")
    p.add_argument("--threshold", type=int, default=1,
                   help="confidence percent at which seg voxels count as foreground")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="classification wall-time scaling table")
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", default="64,128")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--file-backed", action="store_true")
    p.add_argument("--cache-mb", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="start the interactive HTTP server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # CLI boundary: fail with a message, not a trace
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
