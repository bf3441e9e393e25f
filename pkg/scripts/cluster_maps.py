"""Cluster maps for the halves demo and a synthetic shape, optionally from a trained checkpoint."""

import argparse
import sys
from pathlib import Path

from secvit.cli import main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint")
    ap.add_argument("--outdir", default="results/maps")
    args = ap.parse_args()
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    ck = ["--checkpoint", args.checkpoint] if args.checkpoint else []
    runs = [
        ["viz", "--demo", "halves", "--source", "stem", "--stem", "pointwise", "--M", "2", "--out", str(out / "halves")],
        ["viz", "--demo", "shape", "--source", "raw", "--M", "4", "--out", str(out / "shape")],
        ["viz", "--demo", "shape", *ck, "--out", str(out / "shape")],
    ]
    for argv in runs:
        if cli(argv):
            sys.exit(1)


if __name__ == "__main__":
    main()
