"""Loss-combination ablation on the acceptance setup.

Trains one model per row of the grid (about a minute each on one core) and
prints held-out IDF1, MOTA, identity switches and the cross-clip margin.

    python3 scripts/run_ablation.py --out results/ablation.csv
    python3 scripts/run_ablation.py --only spatial --only full
"""

import argparse
import csv
from pathlib import Path

import torch

from simassoc import experiment as ex

NAMES = [n for n, _ in ex.ABLATION_GRID]

ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
ap.add_argument("--out", type=Path)
ap.add_argument("--only", action="append", choices=NAMES)
args = ap.parse_args()

torch.set_num_threads(1)
grid = [row for row in ex.ABLATION_GRID if not args.only or row[0] in args.only]
rows = ex.run_ablation(ex.acceptance_config(), grid, on_row=lambda r: print(r["losses"], f"{r['idf1']:.4f}", flush=True))
print()
print(ex.format_ablation(rows))
if args.out:
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
