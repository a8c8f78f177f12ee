"""Train on equity, bond and commodity clients; report validation AUC for every market.

Per-market AUCs land in markets.csv next to the usual metrics files.
"""

import csv

from _common import run

if __name__ == "__main__":
    out = run("cross-market", __doc__)
    with open(out / "markets.csv", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            print(f"seed {row['seed']}  {row['market']:<10} auc {float(row['auc']):.4f}  n={row['n']}")
