"""Reference partitioners and the metrics used to compare them."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .sec import build_cluster_plan

CSV_HEADER = "strategy,L,d,groups,balance,purity,iterations,wall_ns"


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray  # [L] group id per token
    num_groups: int
    iteration_count: int

    def __post_init__(self):
        a = np.asarray(self.assignment)
        if a.ndim != 1 or (a.size and (a.min() < 0 or a.max() >= self.num_groups)):
            raise ValueError("assignment must map every token to a group in 0..num_groups-1")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_groups)


@dataclass(frozen=True)
class PartitionMetrics:
    balance: float
    purity: float
    iterations: int
    wall_ns: int


def window_partition(H: int, W: int, win: int) -> Partition:
    if win < 1 or H % win or W % win:
        raise ValueError(f"window {win} does not tile a {H}x{W} grid")
    r, c = np.divmod(np.arange(H * W), W)
    return Partition((r // win) * (W // win) + c // win, (H // win) * (W // win), 0)


def _unit(X: np.ndarray) -> np.ndarray:
    return X / np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), 1e-12)


def kmeans_cluster(X, k: int, max_iter: int = 50, seed: int = 0, metric: str = "cosine") -> Partition:
    """Lloyd's algorithm from k distinct random tokens.

    ``iteration_count`` counts assignment passes; the loop stops once an
    assignment repeats. An empty cluster is re-seeded with the token farthest
    from its current center.
    """
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    L = X.shape[0]
    if k < 1 or k > L:
        raise ValueError(f"k={k} must be in 1..{L}")
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"unknown metric {metric!r}")
    rng = np.random.default_rng(seed)
    pts = _unit(X) if metric == "cosine" else X
    centers = pts[rng.choice(L, size=k, replace=False)].copy()

    def distances(c):
        if metric == "cosine":
            return 1.0 - pts @ _unit(c).T
        return ((pts[:, None, :] - c[None]) ** 2).sum(-1)

    assign = None
    it = 0
    while it < max_iter:
        it += 1
        dist = distances(centers)
        new = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = pts[members].mean(axis=0)
            else:
                far = int(dist[np.arange(L), assign].argmax())
                centers[j] = pts[far]
                assign[far] = j
    return Partition(assign, k, it)


def sec_partition(K, M: int) -> Partition:
    plan = build_cluster_plan(np.asarray(getattr(K, "data", K), dtype=np.float64), M)
    return Partition(plan.assignment(), M, plan.iterations)


def purity(assignment: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of same-label token pairs that share a group (0 if none do)."""
    assignment = np.asarray(assignment)
    labels = np.asarray(labels)
    if assignment.shape != labels.shape:
        raise ValueError("labels must cover all tokens")
    pairs = np.zeros((assignment.max() + 1, labels.max() + 1), dtype=np.int64)
    np.add.at(pairs, (assignment, labels), 1)
    same_group = (pairs * (pairs - 1) // 2).sum()
    per_label = np.bincount(labels)
    same_label = (per_label * (per_label - 1) // 2).sum()
    return float(same_group / same_label) if same_label else 0.0


def balance(p: Partition) -> float:
    sizes = p.sizes()
    if sizes.min() == 0:
        return float("inf")
    return float(sizes.max() / sizes.min())


def score_partition(p: Partition, planted_labels, wall_ns: int = 0) -> PartitionMetrics:
    return PartitionMetrics(balance(p), purity(p.assignment, planted_labels), p.iteration_count, int(wall_ns))


def timed(fn, *args, **kwargs) -> tuple[Partition, int]:
    t0 = time.perf_counter_ns()
    p = fn(*args, **kwargs)
    return p, time.perf_counter_ns() - t0


def planted_bands(L: int, d: int, bands: int = 4, seed: int = 0, spread: float = 0.02):
    """Tokens whose cosine to a shared direction falls in ``bands`` disjoint bands.

    Returns (X [L, d], labels [L]); labels are assigned in random (spatially
    shuffled) order so window layout carries no label information.
    """
    if L % bands:
        raise ValueError("bands must divide L")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.repeat(np.arange(bands), L // bands))
    u = np.zeros(d)
    u[0] = 1.0
    # band b sits at cosine ~ 0.95 - 0.3 b, strictly separated for spread < 0.1
    cos = 0.95 - 0.3 * labels + rng.uniform(-spread, spread, L)
    ortho = rng.normal(size=(L, d))
    ortho[:, 0] = 0.0
    ortho = _unit(ortho)
    X = cos[:, None] * u + np.sqrt(1 - cos**2)[:, None] * ortho
    X *= rng.uniform(0.5, 2.0, (L, 1))
    return X, labels
