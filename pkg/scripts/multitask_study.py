#!/usr/bin/env python3
"""Single-task localization versus MT-Dual on a held-out synthetic sequence."""

import argparse
import tempfile

from _common import show, write_rows
from vlocnet import studies

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--work", help="work directory (default: a temporary one)")
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
ap.add_argument("--iterations", type=int, default=1500, help="ST and VO training iterations")
ap.add_argument("--finetune-iterations", type=int, default=1000)
ap.add_argument("--finetune-lr", type=float, default=1e-4)
ap.add_argument("--csv", default="results/multitask.csv")
args = ap.parse_args()

rows = studies.multitask(
    args.work or tempfile.mkdtemp(prefix="multitask-"), args.seeds, args.iterations,
    args.finetune_iterations, args.finetune_lr,
)
table = [{**d, "mt_not_worse": r.mt_not_worse} for d, r in zip(studies.as_dicts(rows), rows)]
show(table)
write_rows(table, args.csv)
print(f"MT-Dual <= ST in {sum(r.mt_not_worse for r in rows)}/{len(rows)} seeds; wrote {args.csv}")
