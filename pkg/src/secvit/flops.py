"""Exact FLOP accounting (one multiply-add counts as 2 FLOPs)."""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter

CATEGORIES = ("attn_scores", "attn_values", "projections", "conv", "ffn")

_active: contextvars.ContextVar["FlopCounter | None"] = contextvars.ContextVar("flop_counter", default=None)


class FlopCounter:
    def __init__(self):
        self.counts: Counter[str] = Counter()

    def add(self, category: str, flops: int):
        if category not in CATEGORIES:
            raise KeyError(category)
        if flops < 0:
            raise ValueError("flop counts are non-negative")
        self.counts[category] += int(flops)

    def reset(self):
        self.counts.clear()

    @property
    def attention_core(self) -> int:
        return self.counts["attn_scores"] + self.counts["attn_values"]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @contextlib.contextmanager
    def active(self):
        token = _active.set(self)
        try:
            yield self
        finally:
            _active.reset(token)


def record(category: str, flops: int):
    counter = _active.get()
    if counter is not None:
        counter.add(category, flops)


def matmul_flops(*batch_and_pqr: int) -> int:
    """FLOPs of a (batched) [p, q] x [q, r] product: 2 * prod(batch) * p * q * r."""
    n = 2
    for v in batch_and_pqr:
        n *= v
    return n
