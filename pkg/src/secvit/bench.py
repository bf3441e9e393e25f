"""Exact-FLOP and wall-clock comparison of clustered vs full attention."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, cluster_attention, full_attention
from .flops import FlopCounter
from .tensor import DTYPES, Tensor, no_grad

CSV_HEADER = "strategy,M,L,d,heads,core_flops,total_flops,flop_ratio,wall_ns_mean,wall_ns_p50,wall_ns_p95,speedup,max_abs_diff,dtype,threads"


def attention_core_flops(L: int, d: int, M: int = 1) -> int:
    """Closed form for score + value products: M clusters of N = L/M tokens, 4 N^2 d each."""
    if L % M:
        raise ValueError("M must divide L")
    N = L // M
    return M * 4 * N * N * d


@dataclass
class BenchRow:
    strategy: str
    M: int
    core_flops: int
    total_flops: int
    flop_ratio: float
    wall_ns: np.ndarray
    speedup: float = float("nan")
    max_abs_diff: float = float("nan")

    @property
    def mean_ns(self) -> float:
        return float(self.wall_ns.mean())

    @property
    def p50_ns(self) -> float:
        return float(np.percentile(self.wall_ns, 50))

    @property
    def p95_ns(self) -> float:
        return float(np.percentile(self.wall_ns, 95))


@dataclass
class BenchReport:
    L: int
    d: int
    heads: int
    dtype: str
    iters: int
    threads: int
    rows: list[BenchRow] = field(default_factory=list)

    def row(self, strategy: str, M: int | None = None) -> BenchRow:
        for r in self.rows:
            if r.strategy == strategy and (M is None or r.M == M):
                return r
        raise KeyError((strategy, M))

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.strategy},{r.M},{self.L},{self.d},{self.heads},{r.core_flops},{r.total_flops},"
                f"{r.flop_ratio:.6f},{r.mean_ns:.0f},{r.p50_ns:.0f},{r.p95_ns:.0f},{r.speedup:.4f},{r.max_abs_diff:.3e},"
                f"{self.dtype},{self.threads}"
            )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        out = [
            f"L={self.L} d={self.d} heads={self.heads} dtype={self.dtype} iters={self.iters} threads={self.threads}",
            f"{'strategy':<10}{'M':>4}{'core GFLOP':>12}{'ratio':>9}{'p50 ms':>10}{'p95 ms':>10}{'speedup':>9}",
        ]
        for r in self.rows:
            out.append(
                f"{r.strategy:<10}{r.M:>4}{r.core_flops / 1e9:>12.4f}{r.flop_ratio:>9.3f}"
                f"{r.p50_ns / 1e6:>10.2f}{r.p95_ns / 1e6:>10.2f}{r.speedup:>9.2f}"
            )
        return "\n".join(out)


def _timed(fn, iters: int, warmup: int) -> tuple[np.ndarray, object]:
    out = None
    for _ in range(warmup):
        out = fn()
    times = np.empty(iters)
    for i in range(iters):
        t0 = time.perf_counter_ns()
        out = fn()
        times[i] = time.perf_counter_ns() - t0
    return times, out


def run_bench(
    L: int = 4096,
    d: int = 64,
    heads: int = 1,
    Ms=(1, 2, 4, 8, 16, 32),
    iters: int = 20,
    warmup: int = 2,
    seed: int = 0,
    dtype: str = "f32",
    threads: int = 1,
) -> BenchReport:
    """Forward-only timing of full vs clustered attention on identical inputs."""
    if L < 1 or d < 1 or heads < 1 or d % heads:
        raise ValueError("need L, d >= 1 and heads dividing d")
    for M in Ms:
        if M < 1 or L % M:
            raise ValueError(f"M={M} must divide L={L}")
    rng = np.random.default_rng(seed)
    dt = DTYPES[dtype]
    params = AttentionParams.init(rng, d, heads, dt)
    X = Tensor(rng.normal(size=(L, d)).astype(dt))
    report = BenchReport(L, d, heads, dtype, iters, threads)

    def measure(strategy, M, fn):
        counter = FlopCounter()
        with no_grad(), counter.active():
            ref = fn()
        with no_grad():
            times, _ = _timed(fn, iters, warmup)
        return counter, times, ref

    full_counter, full_times, full_out = measure("full", 1, lambda: full_attention(X, params))
    full_core = full_counter.attention_core
    report.rows.append(BenchRow("full", 1, full_core, full_counter.total, 1.0, full_times, 1.0, 0.0))
    for M in Ms:
        counter, times, out = measure("sec", M, lambda M=M: cluster_attention(X, params, M))
        row = BenchRow("sec", M, counter.attention_core, counter.total, full_core / counter.attention_core, times)
        row.speedup = float(np.median(full_times) / np.median(times))
        row.max_abs_diff = float(np.abs(out.data - full_out.data).max()) if M == 1 else float("nan")
        report.rows.append(row)
    return report
