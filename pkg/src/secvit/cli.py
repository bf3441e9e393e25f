"""Command-line entry point: ``secvit {gradcheck,bench,compare,viz,train,connector}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

log = logging.getLogger("secvit")


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    if args.dtype == "f32":
        raise ValueError("gradcheck runs in f64 only")
    failed: list[str] = []
    for seed in range(_seed(args), _seed(args) + args.repeats):
        errors = run_gradcheck(seed, args.tokens, args.dim, args.only.split(",") if args.only else None)
        for name, err in errors.items():
            ok = err < TOLERANCE
            print(f"seed={seed} {name:<26} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
            if not ok and name not in failed:
                failed.append(name)
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench

    report = run_bench(args.L, args.d, args.heads, _ints(args.M), args.iters, args.warmup, _seed(args), args.dtype or "f32", args.threads)
    print(report.to_table(), file=sys.stderr)
    _emit(report.to_csv(), args.out)
    return 0


def cmd_compare(args) -> int:
    from .compare import compare_csv, run_compare

    rows = run_compare(args.L, args.d, args.groups, range(_seed(args), _seed(args) + args.seeds), args.strategies.split(","), args.data)
    _emit(compare_csv(rows), args.out)
    return 0


def cmd_connector(args) -> int:
    from .compare import connector_csv, run_connector_demo

    modes = ("interleaved", "sequential") if args.mode == "both" else (args.mode,)
    _emit(connector_csv(run_connector_demo(args.L, args.d, args.G, args.heads, _seed(args), modes)), args.out)
    return 0


def _model_config(args):
    from .data import load_config
    from .model import PRESETS

    if args.config:
        return load_config(args.config)
    from .data import RunConfig

    return RunConfig(PRESETS["toy"])


def cmd_train(args) -> int:
    from dataclasses import replace

    from .data import load_idx, save_checkpoint, synth_shapes
    from .train import TrainingDiverged, train

    run = _model_config(args)
    opts = run.train
    overrides = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed), ("dtype", args.dtype), ("n_samples", args.samples)) if v is not None}
    opts = replace(opts, **overrides)
    if args.data == "synth":
        data = synth_shapes(opts.n_samples, seed=opts.seed)
    else:
        images, labels = args.data.split(",")
        data = load_idx(images, labels, run.model.num_classes)
    cfg = run.model
    if args.clusters:
        cfg = cfg.with_clusters(_ints(args.clusters))
    try:
        model, hist = train(cfg, data, opts)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint({k: p.data for k, p in model.named_parameters().items()}, out / "checkpoint.secv")
    (out / "metrics.csv").write_text(hist.to_csv())
    print(f"final train accuracy {hist.final_acc:.4f}; wrote {out}/checkpoint.secv and {out}/metrics.csv")
    return 0


def _load_image(args, in_channels: int) -> np.ndarray:
    from .data import synth_shapes

    if args.image:
        p = Path(args.image)
        if p.suffix == ".npy":
            img = np.load(p).astype(np.float32)
        else:
            from .viz import read_pnm

            img = read_pnm(p).astype(np.float32) / 255.0
            img = np.moveaxis(img, -1, 0) if img.ndim == 3 else img[None]
        if img.ndim == 2:
            img = img[None]
        return img
    size = 32
    if args.demo == "halves":
        img = np.zeros((in_channels, size, size), dtype=np.float32)
        img[:, :, : size // 2] = 1.0
        return img
    return synth_shapes(1, seed=_seed(args)).images[0]


def cmd_viz(args) -> int:
    from .data import load_checkpoint
    from .model import SECViT
    from .tensor import Tensor, no_grad
    from .viz import cluster_map, pointwise_stem, render, write_ppm

    run = _model_config(args)
    cfg = run.model
    img = _load_image(args, cfg.in_channels)
    prefix = args.out or "clusters"
    maps: list[tuple[str, np.ndarray, int]] = []
    if args.source == "raw":
        M = _ints(args.M)[0] if args.M else 2
        maps.append(("raw", img, M))
    else:
        model = SECViT.init(cfg, seed=_seed(args), dtype=np.float64)
        if args.checkpoint:
            model.load_state(load_checkpoint(args.checkpoint))
        if args.stem == "pointwise":
            pointwise_stem(model, _seed(args))
        Ms = _ints(args.M) if args.M else list(cfg.stage_clusters)
        with no_grad():
            x = Tensor(img[None].astype(np.float64))
            if args.source == "stem":
                maps.append(("stem", model.stem_forward(x).data[0], Ms[0]))
            else:
                for s, f in enumerate(model.features(x)):
                    maps.append((f"stage{s}", f.data[0], Ms[min(s, len(Ms) - 1)]))
    for name, feat, M in maps:
        H, W = feat.shape[-2:]
        M = min(M, H * W)
        path = f"{prefix}_{name}.ppm"
        write_ppm(path, render(cluster_map(feat, M), block=max(1, 256 // max(H, W))))
        print(f"{path}: {H}x{W} tokens, M={M}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="RNG seed (default 0, or train.seed from --config)")
    common.add_argument("--config", help="JSON run config (see README)")
    common.add_argument("--out", help="output path (file or directory, per subcommand)")
    common.add_argument("--threads", type=int, default=int(os.environ.get("SEC_THREADS", "1")))
    common.add_argument("--dtype", choices=("f32", "f64"))

    ap = argparse.ArgumentParser(prog="secvit", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--tokens", type=int, default=6)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--repeats", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--only", help="comma-separated subset of check names")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", parents=[common], help="clustered vs full attention FLOPs and wall time")
    p.add_argument("--L", type=int, default=4096)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--M", default="1,2,4,8,16,32")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("compare", parents=[common], help="window vs k-means vs SEC partitions")
    p.add_argument("--L", type=int, default=256)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--strategies", default="window,kmeans,sec")
    p.add_argument("--data", choices=("bands", "gaussian"), default="bands")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("viz", parents=[common], help="write cluster maps as PPM")
    p.add_argument("--image", help=".npy [C,H,W] or PGM/PPM image")
    p.add_argument("--demo", choices=("halves", "shape"), default="shape")
    p.add_argument("--checkpoint")
    p.add_argument("--source", choices=("stages", "stem", "raw"), default="stages")
    p.add_argument("--M", help="cluster counts per map (comma separated)")
    p.add_argument("--stem", choices=("learned", "pointwise"), default="learned", help="pointwise: centre-tap stem that keeps intensity order")
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("train", parents=[common], help="train the toy model")
    p.add_argument("--data", default="synth", help="'synth' or IMAGES.idx,LABELS.idx")
    p.add_argument("--epochs", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--clusters", help="override per-stage cluster counts, e.g. 1,1")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("connector", parents=[common], help="interleaved vs sequential token compression")
    p.add_argument("--L", type=int, default=576)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--G", type=int, default=288)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--mode", choices=("interleaved", "sequential", "both"), default="both")
    p.set_defaults(fn=cmd_connector)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(args.threads):
            return args.fn(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
