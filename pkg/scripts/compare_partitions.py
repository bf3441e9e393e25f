"""Window vs k-means vs SEC on planted bands and on unstructured Gaussian tokens.

Prints per-strategy means over seeds and writes the per-seed rows.
"""

import argparse
from pathlib import Path

import numpy as np

from secvit.compare import compare_csv, run_compare


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--out", default="results/compare.csv")
    args = ap.parse_args()

    lines = []
    for data in ("bands", "gaussian"):
        rows = run_compare(L=256, d=16, groups=4, seeds=range(args.seeds), data=data)
        print(f"[{data}]")
        for s in ("window", "kmeans", "sec"):
            sel = [r for r in rows if r["strategy"] == s]
            bal = np.array([r["balance"] for r in sel])
            it = np.array([r["iterations"] for r in sel])
            print(
                f"  {s:<7} purity {np.mean([r['purity'] for r in sel]):.3f}  balance mean {bal.mean():.2f} max {bal.max():.2f}"
                f"  iterations mean {it.mean():.1f} (>1 on {(it > 1).sum()}/{len(sel)})"
                f"  wall {np.median([r['wall_ns'] for r in sel]) / 1e3:.0f} us"
            )
        body = compare_csv(rows)
        lines.append(body if not lines else body.split("\n", 1)[1])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("".join(lines))


if __name__ == "__main__":
    main()
