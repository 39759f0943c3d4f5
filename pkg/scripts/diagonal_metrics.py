"""Main-diagonal statistics of both pipelines on phantoms, with and without
connected-component postprocessing of the proposals.

Fusion runs on corrupted perfect slice stacks, the watershed on 3-class maps
derived from the reference labels. Rows mirror the max / mean / std over all,
large and small segments.

    python3 scripts/diagonal_metrics.py --count 10 --split-rate 0.3 --drop-rate 0.1
"""

import argparse
import json

import numpy as np

from xxlseg.evaluate import build_correlation_matrix, cc_postprocess_proposal
from xxlseg.fusion import MatchConfig, run_fusion_pipeline
from xxlseg.instancer import run_watershed_pipeline
from xxlseg.phantom import corrupt_stack, generate_phantom, perfect_slice_stack, random_phantom_spec
from xxlseg.preprocess import labels_to_three_class


def pooled(refs, props, cc, min_voxels):
    """Pool the diagonals of all phantoms, each split into its own halves."""
    large, small = [], []
    for ref, prop in zip(refs, props):
        if cc:
            prop = cc_postprocess_proposal(prop)
        diag = build_correlation_matrix(ref, prop, min_voxels).diagonal()
        half = (diag.size + 1) // 2
        large.append(diag[:half])
        small.append(diag[half:])
    return np.concatenate(large), np.concatenate(small)


def table(name, large, small):
    def fmt(v):
        return f"{v:6.3f}"

    print(f"\n{name}")
    print(f"{'':8} {'all':>6} {'large':>6} {'small':>6}")
    groups = [np.concatenate([large, small]), large, small]
    for label, fn in (("max", np.max), ("mean", np.mean), ("std", np.std)):
        print(f"{label:8} " + " ".join(fmt(fn(g)) if g.size else "   n/a" for g in groups))
    return {
        key: ({"max": float(g.max()), "mean": float(g.mean()), "std": float(g.std())} if g.size else None)
        for key, g in zip(("all", "large", "small"), groups)
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--count", type=int, default=10)
    parser.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    parser.add_argument("--split-rate", type=float, default=0.3)
    parser.add_argument("--drop-rate", type=float, default=0.1)
    parser.add_argument("--line-overlap-threshold", type=float, default=0.5)
    parser.add_argument("--min-voxels", type=int, default=100)
    parser.add_argument("--min-thickness", type=int, default=3,
                        help="thinnest object dimension; below 3 the border class can swallow cores")
    parser.add_argument("--json", help="also write the tables to this file")
    args = parser.parse_args()

    config = MatchConfig(line_overlap_threshold=args.line_overlap_threshold)
    refs, fused, flooded = [], [], []
    for seed in range(args.count):
        _, ref = generate_phantom(random_phantom_spec(seed, tuple(args.dims), min_gap=2, min_thickness=args.min_thickness))
        stack = corrupt_stack(perfect_slice_stack(ref), seed, args.split_rate, args.drop_rate)
        refs.append(ref)
        fused.append(run_fusion_pipeline(stack, config))
        flooded.append(run_watershed_pipeline(labels_to_three_class(ref, 1)))

    results = {}
    for name, props in (("fusion", fused), ("watershed", flooded)):
        for cc in (False, True):
            key = f"{name}{' + cc' if cc else ''}"
            large, small = pooled(refs, props, cc, args.min_voxels)
            results[key] = table(key, large, small)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
