"""Partition-strategy comparison and the connector merge-order demo."""

from __future__ import annotations

import math

import numpy as np

from .attention import AttentionParams, ConnectorConfig, connector_compress
from .baselines import CSV_HEADER, kmeans_cluster, planted_bands, score_partition, sec_partition, timed, window_partition
from .sec import build_group_plan, sequential_group_plan, similarity_rank, compute_center
from .tensor import Tensor, no_grad

STRATEGIES = ("window", "kmeans", "sec")


def run_compare(
    L: int = 256,
    d: int = 16,
    groups: int = 4,
    seeds=range(10),
    strategies=STRATEGIES,
    data: str = "bands",
) -> list[dict]:
    """Score each strategy on planted data; one row per (seed, strategy).

    ``data="bands"`` plants ``groups`` cosine bands with shuffled spatial
    layout; ``data="gaussian"`` draws i.i.d. normal tokens with random labels.
    """
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ValueError(f"unknown strategy {unknown[0]!r}; choose from {', '.join(STRATEGIES)}")
    if data not in ("bands", "gaussian"):
        raise ValueError(f"unknown data kind {data!r}")
    side = math.isqrt(L)
    win = side // math.isqrt(groups) if math.isqrt(groups) ** 2 == groups else 0
    rows = []
    for seed in seeds:
        if data == "bands":
            X, labels = planted_bands(L, d, groups, seed)
        else:
            rng = np.random.default_rng(seed)
            X, labels = rng.normal(size=(L, d)), rng.integers(0, groups, L)
        for s in strategies:
            if s == "window":
                if side * side != L or not win or side % win:
                    raise ValueError(f"window partition needs a square grid tiled by {groups} windows")
                p, ns = timed(window_partition, side, side, win)
            elif s == "kmeans":
                p, ns = timed(kmeans_cluster, X, groups, seed=seed)
            else:
                p, ns = timed(sec_partition, X, groups)
            m = score_partition(p, labels, ns)
            rows.append(
                dict(strategy=s, seed=seed, L=L, d=d, groups=groups, balance=m.balance, purity=m.purity,
                     iterations=m.iterations, wall_ns=m.wall_ns)
            )
    return rows


def compare_csv(rows: list[dict]) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r['strategy']},{r['L']},{r['d']},{r['groups']},{r['balance']:.6f},{r['purity']:.6f},{r['iterations']},{r['wall_ns']}"
        )
    return "\n".join(lines) + "\n"


CONNECTOR_HEADER = "mode,L,d,G,outputs,max_weight_sum_dev,min_rank_span,max_rank_span,rank_stride"


def run_connector_demo(L: int = 576, d: int = 32, G: int = 288, heads: int = 1, seed: int = 0, modes=("interleaved", "sequential")) -> list[dict]:
    if G < 1 or L % G:
        raise ValueError(f"G={G} must divide L={L}")
    rng = np.random.default_rng(seed)
    X, _ = planted_bands(L, d, 4 if L % 4 == 0 else 1, seed)
    params = AttentionParams.init(rng, d, heads)
    K = X @ params.wk.weight.data.T + params.wk.bias.data
    _, idx = similarity_rank(K, compute_center(K))
    rows = []
    for mode in modes:
        with no_grad():
            Y, w = connector_compress(Tensor(X), params, ConnectorConfig(G, mode), return_weights=True)
        gp = (build_group_plan if mode == "interleaved" else sequential_group_plan)(idx, G)
        spans = gp.ranks.max(axis=1) - gp.ranks.min(axis=1)
        strides = np.unique(np.diff(gp.ranks, axis=1)) if gp.group_size > 1 else np.array([0])
        rows.append(
            dict(mode=mode, L=L, d=d, G=G, outputs=Y.shape[0], max_weight_sum_dev=float(np.abs(w.sum(-1) - 1).max()),
                 min_rank_span=int(spans.min()), max_rank_span=int(spans.max()),
                 rank_stride=int(strides[0]) if strides.size == 1 else -1)
        )
    return rows


def connector_csv(rows: list[dict]) -> str:
    lines = [CONNECTOR_HEADER]
    for r in rows:
        lines.append(",".join(str(r[k]) if not isinstance(r[k], float) else f"{r[k]:.3e}" for k in CONNECTOR_HEADER.split(",")))
    return "\n".join(lines) + "\n"
