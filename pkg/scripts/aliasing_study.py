#!/usr/bin/env python3
"""M2 versus M4 on twin-aliased synthetic scenes, one row per seed."""

import argparse
import tempfile

from _common import show, write_rows
from vlocnet import studies

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--work", help="work directory (default: a temporary one)")
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
ap.add_argument("--iterations", type=int, default=1500)
ap.add_argument("--split", default="train", choices=("train", "test"))
ap.add_argument("--csv", default="results/aliasing.csv")
args = ap.parse_args()

rows = studies.aliasing(args.work or tempfile.mkdtemp(prefix="alias-"), args.seeds, args.iterations, split=args.split)
table = [{**d, "m4_better": r.m4_better} for d, r in zip(studies.as_dicts(rows), rows)]
show(table)
write_rows(table, args.csv)
print(f"M4 lower in {sum(r.m4_better for r in rows)}/{len(rows)} seeds; wrote {args.csv}")
