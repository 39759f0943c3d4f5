"""Key metrics of a set of synthetic phantoms, one row per sub-volume.

    python3 scripts/dataset_report.py --count 8 --dims 64 64 64
"""

import argparse
import json

from xxlseg.labels import segment_table
from xxlseg.phantom import generate_phantom, random_phantom_spec


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--count", type=int, default=8)
    parser.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    parser.add_argument("--first-seed", type=int, default=0)
    parser.add_argument("--min-gap", type=int, default=1)
    parser.add_argument("--json", help="also write the rows to this file")
    args = parser.parse_args()

    header = f"{'seed':>5} {'segments':>9} {'min':>7} {'max':>7} {'median':>7} {'fg %':>7}"
    print(header)
    print("-" * len(header))
    rows = []
    for seed in range(args.first_seed, args.first_seed + args.count):
        spec = random_phantom_spec(seed, tuple(args.dims), min_gap=args.min_gap)
        _, labels = generate_phantom(spec)
        report = segment_table(labels).report()
        rows.append({"seed": seed, **report.as_dict()})
        print(
            f"{seed:>5} {report.segments:>9} {report.min_size:>7} {report.max_size:>7} "
            f"{report.median_size:>7} {report.foreground_percent:>7.3f}"
        )
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
