"""Batch command-line front end.

Subcommands chain the pipeline stages: scene synthesis, reconstruction,
patch dataset assembly, verification benchmarks, and the full
train-evaluate-regenerate loop.  Identical inputs plus --seed give
byte-identical artifacts; wall-clock noise stays in sidecar logs.

Exit codes: 0 success, 1 usage, 2 I/O, 3 pipeline failure, 4 plugin
failure.  Failures also emit one machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shlex
import sys
from dataclasses import dataclass
from pathlib import Path

from .descriptors import get_descriptor, open_plugin
from .dmce import (
    audit_eval_isolation,
    load_config,
    load_state,
    resume_dmce,
    run_dmce,
    run_id,
)
from .errors import (
    DimMismatchError,
    ForgeError,
    PluginCrashedError,
    PluginProtocolError,
)
from .evalbench import emit_report, evaluate_descriptor
from .imaging import DetectorConfig, detect_keypoints, load_image
from .patchgen import (
    PairConfig,
    anchor_points,
    build_patch_table,
    depth_map_visibility,
    make_pairs,
    read_container,
    split_dataset,
    write_container,
)
from .reconstruct import (
    SfmConfig,
    compute_metrics,
    load_dense,
    load_depth_maps,
    load_sparse,
    run_mvs,
    run_sfm,
    save_dense,
    save_depth_maps,
    save_metrics,
    save_sparse,
)
from .synthscene import generate_scene, load_scene_spec, write_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_PIPELINE = 3
EXIT_PLUGIN = 4

_PLUGIN_ERRORS = (PluginCrashedError, PluginProtocolError, DimMismatchError)


@dataclass
class GlobalConfig:
    """Process-wide knobs shared by every subcommand."""

    threads: int = 1
    seed: int = 0
    verbosity: int = 0

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _threads_from_env() -> int:
    raw = os.environ.get("FORGE_THREADS")
    if raw is None:
        return 1
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"FORGE_THREADS must be an integer, got {raw!r}") from None


def _emit_error(kind: str, message: str, code: int) -> None:
    payload = {"error": kind, "message": message, "exit_code": code}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, _PLUGIN_ERRORS):
        return EXIT_PLUGIN
    if isinstance(exc, ForgeError):
        return EXIT_PIPELINE
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ValueError, KeyError, json.JSONDecodeError)):
        return EXIT_USAGE
    return EXIT_PIPELINE


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems on our exit-code contract."""

    def error(self, message):
        _emit_error("usage", message, EXIT_USAGE)
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _resolve_descriptor(spec: str):
    """psift | sift | plugin:<command line> -> an open handle."""
    if spec.startswith("plugin:"):
        argv = shlex.split(spec[len("plugin:"):])
        if not argv:
            raise ValueError("plugin: needs a command line")
        return open_plugin(argv)
    return get_descriptor(spec)


def _load_views(images_dir: Path):
    paths = sorted(Path(images_dir).glob("view*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no view*.pgm files under {images_dir}")
    return [load_image(p) for p in paths]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_scene_gen(args, gcfg: GlobalConfig) -> int:
    spec = load_scene_spec(args.spec)
    oracle, images = generate_scene(spec)
    write_scene(spec, oracle, images, args.out)
    print(f"wrote {len(images)} views to {args.out} (seed {spec.seed})")
    return EXIT_OK


def cmd_reconstruct(args, gcfg: GlobalConfig) -> int:
    from .geometry import load_rig

    images = _load_views(Path(args.images))
    cameras = load_rig(args.cameras) if args.cameras else None
    handle = _resolve_descriptor(args.descriptor)
    try:
        cfg = SfmConfig(detector=DetectorConfig(max_keypoints=args.max_keypoints))
        model = run_sfm(images, cameras, handle, cfg)
        dense = None
        if not model.is_empty and len(model.registered) >= 2:
            dense = run_mvs(model, images)
        metrics = compute_metrics(model, dense)
    finally:
        handle.close()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sparse(model, out / "sparse")
    if dense is not None:
        save_dense(dense, out / "dense.ply")
        save_depth_maps(dense, out / "depth_maps.npz")
    save_metrics(metrics, out / "metrics.json")
    print(
        f"registered {len(model.registered)}/{len(images)} views, "
        f"{len(model.tracks)} sparse points, "
        f"{0 if dense is None else len(dense)} dense points"
    )
    return EXIT_OK


def cmd_patches(args, gcfg: GlobalConfig) -> int:
    model_dir = Path(args.model)
    model = load_sparse(model_dir / "sparse")
    dense = load_dense(model_dir / "dense.ply")
    maps, scale = load_depth_maps(model_dir / "depth_maps.npz")
    dense.depth_maps.update(maps)
    dense.depth_scale = scale
    images = _load_views(Path(args.images))
    cams = {c.view_id: c for c in model.cameras}
    if args.frontal not in cams:
        raise ValueError(f"view {args.frontal} not present in the camera rig")

    det = DetectorConfig(max_keypoints=args.max_keypoints)
    kps = detect_keypoints(images[args.frontal], det)
    anchored = anchor_points(dense, kps, cams[args.frontal], args.anchor_px)
    visible = depth_map_visibility(dense, model.cameras)
    table = build_patch_table(anchored, dense, images, model.cameras, visible)
    if not table.points:
        raise ForgeError("no anchored points produced any patches")
    pairs = make_pairs(table, PairConfig(seed=gcfg.seed))
    train, test = split_dataset(
        table,
        pairs,
        args.split,
        seed=gcfg.seed,
        mode="frozen",
        positions=dense,
        version=args.version,
        scene_id=args.scene_id,
        descriptor=args.descriptor_name,
    )
    out = Path(args.out)
    for name, manifest in (("train", train), ("test", test)):
        write_container(table, manifest, out / name)
    print(
        f"{len(table.points)} anchored points, "
        f"{train.patch_count} train / {test.patch_count} test patches"
    )
    return EXIT_OK


def _find_container(dataset: Path) -> Path:
    if (dataset / "manifest.json").is_file():
        return dataset
    if (dataset / "test" / "manifest.json").is_file():
        return dataset / "test"
    raise FileNotFoundError(f"no container manifest under {dataset}")


def cmd_eval_fpr95(args, gcfg: GlobalConfig) -> int:
    container_dir = _find_container(Path(args.dataset))
    table, manifest, pairs = read_container(container_dir)
    if pairs is None:
        raise ForgeError(f"container {container_dir} carries no labeled pairs")
    handle = _resolve_descriptor(args.descriptor)
    try:
        result = evaluate_descriptor(handle, pairs, table)
    finally:
        handle.close()
    emit_report(
        [result],
        out_dir=args.out,
        version=manifest.version,
        seeds=[gcfg.seed],
        config={"dataset": str(args.dataset), "descriptor": args.descriptor},
    )
    print(f"{result.descriptor}: FPR95 {result.fpr95:.4f} "
          f"({result.n_pos} pos / {result.n_neg} neg), report in {args.out}")
    return EXIT_OK


def cmd_dmce_run(args, gcfg: GlobalConfig) -> int:
    cfg = load_config(args.config)
    state, run_dir = run_dmce(cfg, args.out)
    violations = audit_eval_isolation(run_dir, cfg)
    if violations:
        raise ForgeError("; ".join(violations))
    print(f"run {run_id(cfg)}: {state.status} after {len(state.records)} iterations")
    print("lineage: " + " -> ".join(state.lineage))
    return EXIT_OK


def cmd_dmce_resume(args, gcfg: GlobalConfig) -> int:
    run_dir = Path(args.run)
    state = load_state(run_dir)
    if state.status != "running":
        print(f"run already {state.status}; nothing to do")
        return EXIT_OK
    state = resume_dmce(run_dir)
    print(f"run {run_dir.name}: {state.status} after {len(state.records)} iterations")
    print("lineage: " + " -> ".join(state.lineage))
    return EXIT_OK


_REPORT_COLUMNS = [
    "version",
    "candidate",
    "fpr95",
    "sparse",
    "track_len",
    "reproj_err",
    "dense",
    "inliers",
    "winner",
]


def _report_rows(state):
    rows = []
    for rec in state.records:
        if not rec.candidate_metrics:
            continue
        winner = rec.selection["winner"] if rec.selection else ""
        for name in sorted(rec.candidate_metrics):
            m = rec.candidate_metrics[name]
            f95 = rec.candidate_fpr95.get(name)
            rows.append(
                {
                    "version": rec.version,
                    "candidate": name,
                    "fpr95": "" if f95 is None else f"{f95:.4f}",
                    "sparse": f"{m.sparse_points:.1f}",
                    "track_len": f"{m.mean_track_length:.3f}",
                    "reproj_err": f"{m.mean_reproj_error:.3f}",
                    "dense": f"{m.dense_points:.1f}",
                    "inliers": f"{m.inlier_matches:.1f}",
                    "winner": "*" if name == winner else "",
                }
            )
    return rows


def cmd_report(args, gcfg: GlobalConfig) -> int:
    run_dir = Path(args.run)
    state = load_state(run_dir)
    if args.format == "json":
        print(state.to_json(), end="")
        return EXIT_OK
    rows = _report_rows(state)
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=_REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
        sys.stdout.write(buf.getvalue())
        return EXIT_OK
    print(f"# {run_dir.name}")
    print()
    print(f"status: {state.status}")
    print("lineage: " + " -> ".join(state.lineage))
    print()
    if rows:
        print("| " + " | ".join(_REPORT_COLUMNS) + " |")
        print("|" + "---|" * len(_REPORT_COLUMNS))
        for row in rows:
            print("| " + " | ".join(row[c] for c in _REPORT_COLUMNS) + " |")
    else:
        print("(bootstrap only; no candidate evaluations yet)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="forge", description=__doc__.splitlines()[0])
    p.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker pool cap (default: FORGE_THREADS, then 1)",
    )
    p.add_argument("--seed", type=int, default=0, help="seed for sampling steps")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    scene = sub.add_parser("scene", help="synthetic scene tools")
    scene_sub = scene.add_subparsers(dest="scene_command", required=True)
    gen = scene_sub.add_parser("gen", help="render a scene from a spec file")
    gen.add_argument("--spec", required=True, help="scene spec JSON")
    gen.add_argument("--out", required=True, help="output scene directory")
    gen.set_defaults(func=cmd_scene_gen)

    rec = sub.add_parser("reconstruct", help="sparse + dense reconstruction")
    rec.add_argument("--images", required=True, help="directory of view*.pgm")
    rec.add_argument("--cameras", help="rig JSON (omit for uncalibrated)")
    rec.add_argument("--descriptor", default="psift")
    rec.add_argument("--max-keypoints", type=int, default=3000)
    rec.add_argument("--out", required=True, help="output model directory")
    rec.set_defaults(func=cmd_reconstruct)

    pat = sub.add_parser("patches", help="anchor, extract, pair and split")
    pat.add_argument("--model", required=True, help="reconstruct output directory")
    pat.add_argument("--images", required=True, help="directory of view*.pgm")
    pat.add_argument("--frontal", type=int, required=True, help="frontal view id")
    pat.add_argument("--out", required=True, help="dataset output directory")
    pat.add_argument("--anchor-px", type=float, default=5.0)
    pat.add_argument("--split", type=float, default=0.8)
    pat.add_argument("--max-keypoints", type=int, default=3000)
    pat.add_argument("--version", default="V1")
    pat.add_argument("--scene-id", default="scene")
    pat.add_argument("--descriptor-name", default="psift",
                     help="generator name recorded in the manifest")
    pat.set_defaults(func=cmd_patches)

    ev = sub.add_parser("eval", help="benchmark descriptors")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)
    f95 = ev_sub.add_parser("fpr95", help="patch-verification FPR95")
    f95.add_argument("--dataset", required=True,
                     help="container directory (or its parent with test/)")
    f95.add_argument("--descriptor", required=True,
                     help="psift | sift | plugin:<command line>")
    f95.add_argument("--out", default="report", help="report output directory")
    f95.set_defaults(func=cmd_eval_fpr95)

    dm = sub.add_parser("dmce", help="data-model co-evolution loop")
    dm_sub = dm.add_subparsers(dest="dmce_command", required=True)
    run = dm_sub.add_parser("run", help="start a loop run")
    run.add_argument("--config", required=True, help="loop config JSON")
    run.add_argument("--out", required=True, help="runs root directory")
    run.set_defaults(func=cmd_dmce_run)
    res = dm_sub.add_parser("resume", help="continue an interrupted run")
    res.add_argument("--run", required=True, help="runs/<id> directory")
    res.set_defaults(func=cmd_dmce_resume)

    rep = sub.add_parser("report", help="render a run's state")
    rep.add_argument("--run", required=True, help="runs/<id> directory")
    rep.add_argument("--format", choices=("md", "csv", "json"), default="md")
    rep.set_defaults(func=cmd_report)

    return p


def _setup_logging(verbosity: int) -> None:
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbosity, 2)]
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        threads = args.threads if args.threads is not None else _threads_from_env()
        gcfg = GlobalConfig(threads=threads, seed=args.seed, verbosity=args.verbose)
    except ValueError as exc:
        _emit_error("usage", str(exc), EXIT_USAGE)
        return EXIT_USAGE

    _setup_logging(gcfg.verbosity)
    try:
        return args.func(args, gcfg)
    except Exception as exc:  # mapped to the exit-code contract
        code = _exit_code_for(exc)
        logger.debug("command failed", exc_info=True)
        _emit_error(type(exc).__name__, str(exc), code)
        return code


if __name__ == "__main__":
    sys.exit(main())
