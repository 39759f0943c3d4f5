"""Command-line entry point: ``xxlseg <command> ...``.

Every command writes a run manifest next to its outputs, also when it fails.
Errors end the process with a single-line diagnostic on stderr and exit
status 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from ._threads import THREADS_ENV, default_threads
from .evaluate import (
    DEFAULT_MIN_SEGMENT_VOXELS,
    build_correlation_matrix,
    cc_postprocess_proposal,
    diagonal_stats,
    export_csv,
    export_heatmap,
    export_stats,
)
from .fusion import MatchConfig, load_stack, run_fusion_pipeline, save_stack
from .instancer import WatershedConfig, run_watershed_pipeline
from .labels import segment_table
from .phantom import PhantomSpec, corrupt_stack, generate_phantom, perfect_slice_stack
from .preprocess import labels_to_three_class, tv_denoise
from .tiling import blockwise_apply, make_tiling
from .volume import AXES, Volume, load_volume, read_meta, save_volume

MANIFEST_SUFFIX = ".manifest.json"


class CommandError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(path) -> dict[str, str]:
    """Hashes of the files behind an input: a plain file, or a volume
    (sidecar plus payload)."""
    path = Path(path)
    if path.is_file() and not path.name.endswith(".vol.json"):
        return {str(path): _sha256(path)}
    _, payload = read_meta(path)
    sidecar = path if path.name.endswith(".vol.json") else path.with_name(path.name + ".vol.json")
    out = {str(sidecar): _sha256(sidecar)}
    if payload.is_file():
        out[str(payload)] = _sha256(payload)
    return out


def _directory_hash(path) -> dict[str, str]:
    """One digest over every file below ``path`` (relative name and content)."""
    path = Path(path)
    if not path.is_dir():
        raise CommandError(f"missing stack directory {path}")
    h = hashlib.sha256()
    for p in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(p.relative_to(path).as_posix().encode() + b"\0" + _sha256(p).encode() + b"\n")
    return {str(path): h.hexdigest()}


def _load_label(path) -> Volume:
    vol = load_volume(path)
    if not vol.is_label:
        raise CommandError(f"{path}: expected a label volume, got {vol.meta.voxel_kind}")
    return vol


def _load_scalar(path) -> Volume:
    vol = load_volume(path)
    if vol.is_label:
        raise CommandError(f"{path}: expected a scalar volume, got {vol.meta.voxel_kind}")
    return vol


def _volume_outputs(sidecar: Path) -> list[str]:
    return [str(sidecar), str(sidecar.with_name(sidecar.name[: -len(".vol.json")] + ".raw"))]


def _manifest_beside(out) -> Path:
    out = Path(out)
    name = out.name[: -len(".vol.json")] if out.name.endswith(".vol.json") else out.name
    return out.with_name(name + MANIFEST_SUFFIX)


# ---------------------------------------------------------------------------
# commands; each returns (parameters, input hashes, output paths) pieces via
# the ``run`` record it is handed


def cmd_phantom(args, run):
    spec_path = Path(args.spec)
    run["inputs"].update(_input_hashes(spec_path))
    try:
        doc = json.loads(spec_path.read_text())
    except json.JSONDecodeError as exc:
        raise CommandError(f"{spec_path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    spec = PhantomSpec.from_dict(doc)
    run["parameters"]["spec"] = spec.to_dict()
    scalar, labels = generate_phantom(spec)
    out = Path(args.out_dir)
    for name, data in (("scalar", scalar), ("labels", labels)):
        run["outputs"] += _volume_outputs(save_volume(data, out / name))
    if args.border_thickness is not None:
        classes = labels_to_three_class(labels, args.border_thickness)
        run["outputs"] += _volume_outputs(save_volume(classes, out / "classes"))
    if args.stack:
        stack = perfect_slice_stack(labels, threads=args.threads)
        if args.split_rate or args.drop_rate:
            stack = corrupt_stack(stack, spec.seed, args.split_rate, args.drop_rate)
        run["outputs"].append(str(save_stack(stack, out / "stack")))


def cmd_fuse(args, run):
    run["inputs"].update(_directory_hash(args.stack_dir))
    config = MatchConfig(
        line_overlap_threshold=args.line_overlap_threshold,
        reinsert_overlap_threshold=args.reinsert_overlap_threshold,
        start_axis=args.start_axis,
        start_index=args.start_index,
        closing_iterations=args.closing_iterations,
        closing_connectivity=args.closing_connectivity,
        threads=args.threads,
    )
    params = asdict(config)
    params.pop("threads")
    run["parameters"].update(params)
    stack = load_stack(args.stack_dir)
    fused = run_fusion_pipeline(stack, config)
    run["outputs"] += _volume_outputs(save_volume(Volume(fused, stack.origin), args.out))


def cmd_watershed(args, run):
    run["inputs"].update(_input_hashes(args.classes))
    config = WatershedConfig(connectivity=args.connectivity, min_marker_size=args.min_marker_size)
    run["parameters"].update(asdict(config))
    vol = _load_label(args.classes)
    if vol.data.size and int(vol.data.max()) > 2:
        raise CommandError(f"{args.classes}: class volume holds values other than 0, 1, 2")
    out = run_watershed_pipeline(vol.data, config)
    run["outputs"] += _volume_outputs(save_volume(Volume(out, vol.origin), args.out))


def cmd_classes(args, run):
    run["inputs"].update(_input_hashes(args.labels))
    run["parameters"]["border_thickness"] = args.border_thickness
    vol = _load_label(args.labels)
    out = labels_to_three_class(vol.data, args.border_thickness)
    run["outputs"] += _volume_outputs(save_volume(Volume(out, vol.origin), args.out))


def cmd_evaluate(args, run):
    run["inputs"].update(_input_hashes(args.reference))
    run["inputs"].update(_input_hashes(args.proposal))
    run["parameters"].update(
        min_voxels=args.min_voxels, cc_postprocess=args.cc_postprocess, connectivity=args.connectivity
    )
    ref = _load_label(args.reference).data
    prop = _load_label(args.proposal).data
    if ref.shape != prop.shape:
        raise CommandError(f"dims mismatch: reference {ref.shape}, proposal {prop.shape}")
    if args.cc_postprocess:
        prop = cc_postprocess_proposal(prop, args.connectivity)
    matrix = build_correlation_matrix(ref, prop, args.min_voxels)
    out = Path(args.out_dir)
    run["outputs"].append(str(export_csv(matrix, out / "matrix.csv")))
    run["outputs"].append(str(export_heatmap(matrix, out / "heatmap.pgm")))
    if matrix.shape[0] == 0:
        raise CommandError("no reference segment survives the size filter; statistics are undefined")
    run["outputs"].append(str(export_stats(diagonal_stats(matrix), out / "stats.json")))


def cmd_denoise(args, run):
    run["inputs"].update(_input_hashes(args.input))
    run["parameters"].update(
        weight=args.weight,
        max_iterations=args.max_iterations,
        tolerance=args.tolerance,
        block_edge=args.block_edge,
        overlap=args.overlap,
    )
    vol = _load_scalar(args.input)

    def denoise(block):
        return tv_denoise(block, args.weight, args.max_iterations, args.tolerance)

    if args.block_edge:
        tiling = make_tiling(vol.data.shape, args.block_edge, args.overlap)
        out = blockwise_apply(denoise, vol.data, tiling, np.float32, threads=args.threads)
    else:
        out = denoise(vol.data)
    run["outputs"] += _volume_outputs(save_volume(Volume(out, vol.origin), args.out))


def cmd_stats(args, run):
    run["inputs"].update(_input_hashes(args.labels))
    vol = _load_label(args.labels)
    report = segment_table(vol.data).report().as_dict()
    report["dims"] = list(vol.meta.dims)
    report["origin"] = list(vol.meta.origin)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    run["outputs"].append(str(out))


def _fraction(text):
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1], got {text}")
    return value


def _rate(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a rate in [0, 1], got {text}")
    return value


def _connectivity(text):
    if text not in ("6", "26"):
        raise argparse.ArgumentTypeError(f"connectivity must be 6 or 26, got {text}")
    return int(text)


def _non_negative(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xxlseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"xxlseg {__version__}")
    parser.add_argument(
        "--threads", type=_positive, default=None,
        help=f"worker threads (default: ${THREADS_ENV} or 1); never changes outputs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="render a phantom spec to scalar and label volumes")
    p.add_argument("spec", help="phantom spec JSON")
    p.add_argument("out_dir")
    p.add_argument("--stack", action="store_true", help="also write the perfect slice stack")
    p.add_argument("--split-rate", type=_rate, default=0.0, help="corrupt the stack by splitting instances")
    p.add_argument("--drop-rate", type=_rate, default=0.0, help="corrupt the stack by dropping instances")
    p.add_argument("--border-thickness", type=_positive, default=None,
                   help="also write the 3-class volume with this border thickness")
    p.set_defaults(func=cmd_phantom, manifest_dir=True)

    p = sub.add_parser("fuse", help="fuse a slice stack into a 3D instance volume")
    p.add_argument("stack_dir")
    p.add_argument("out")
    p.add_argument("--line-overlap-threshold", type=_fraction, default=0.5)
    p.add_argument("--reinsert-overlap-threshold", type=_fraction, default=0.5)
    p.add_argument("--start-axis", choices=AXES, default="Z")
    p.add_argument("--start-index", type=_non_negative, default=None, help="default: middle slice")
    p.add_argument("--closing-iterations", type=_non_negative, default=1)
    p.add_argument("--closing-connectivity", type=_connectivity, default=26)
    p.set_defaults(func=cmd_fuse, manifest_dir=False)

    p = sub.add_parser("classes", help="label volume to background/object/border classes")
    p.add_argument("labels")
    p.add_argument("out")
    p.add_argument("--border-thickness", type=_positive, default=1)
    p.set_defaults(func=cmd_classes, manifest_dir=False)

    p = sub.add_parser("watershed", help="marker-based watershed on a 3-class volume")
    p.add_argument("classes")
    p.add_argument("out")
    p.add_argument("--connectivity", type=_connectivity, default=6)
    p.add_argument("--min-marker-size", type=_non_negative, default=0)
    p.set_defaults(func=cmd_watershed, manifest_dir=False)

    p = sub.add_parser("evaluate", help="correlation matrix, heatmap and diagonal statistics")
    p.add_argument("reference")
    p.add_argument("proposal")
    p.add_argument("out_dir")
    p.add_argument("--min-voxels", type=_non_negative, default=DEFAULT_MIN_SEGMENT_VOXELS)
    p.add_argument("--cc-postprocess", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--connectivity", type=_connectivity, default=26)
    p.set_defaults(func=cmd_evaluate, manifest_dir=True)

    p = sub.add_parser("denoise", help="total-variation denoising of a scalar volume")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--weight", type=float, default=0.1)
    p.add_argument("--max-iterations", type=_positive, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--block-edge", type=_non_negative, default=0, help="process in blocks (0: whole volume)")
    p.add_argument("--overlap", type=_non_negative, default=8)
    p.set_defaults(func=cmd_denoise, manifest_dir=False)

    p = sub.add_parser("stats", help="segment statistics report of a label volume")
    p.add_argument("labels")
    p.add_argument("out", help="report JSON")
    p.set_defaults(func=cmd_stats, manifest_dir=False)
    return parser


def _manifest_path(args) -> Path:
    if args.manifest_dir:
        return Path(args.out_dir) / "manifest.json"
    return _manifest_beside(args.out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    run = {"inputs": {}, "parameters": {}, "outputs": []}
    started = time.perf_counter()
    error = None
    try:
        if args.threads is None:
            args.threads = default_threads()
        args.func(args, run)
    except Exception as exc:  # every failure becomes one diagnostic line
        error = " ".join(str(exc).split()) or type(exc).__name__
    manifest = {
        "command": args.command,
        "parameters": run["parameters"],
        "input_hashes": run["inputs"],
        "output_paths": run["outputs"],
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 6),
        "error": error,
    }
    path = _manifest_path(args)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    except OSError as exc:
        error = error or f"cannot write manifest {path}: {exc}"
    if error is not None:
        print(f"xxlseg {args.command}: error: {error}", file=sys.stderr)
        return 1
    return 0


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (tuple, set)):
        return list(value)
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


if __name__ == "__main__":
    sys.exit(main())
