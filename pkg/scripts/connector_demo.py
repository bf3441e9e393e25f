"""Interleaved vs sequential connector grouping at several output budgets (576 input tokens)."""

import argparse
from pathlib import Path

from secvit.compare import connector_csv, run_connector_demo


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--budgets", default="288,256,192,144")
    ap.add_argument("--L", type=int, default=576)
    ap.add_argument("--out", default="results/connector.csv")
    args = ap.parse_args()

    rows = []
    for G in (int(g) for g in args.budgets.split(",")):
        if args.L % G:
            print(f"skip G={G}: does not divide L={args.L}")
            continue
        rows += run_connector_demo(L=args.L, G=G)
    text = connector_csv(rows)
    print(text, end="")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)


if __name__ == "__main__":
    main()
