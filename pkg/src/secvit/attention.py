"""Cluster-local multi-head attention and the attentive-pooling compressor."""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass

import numpy as np

from . import flops
from .nn import LinearParams, init_linear, linear
from .sec import ClusterPlan, build_cluster_plan, build_group_plan, restore_order, sequential_group_plan, similarity_rank, compute_center
from .tensor import (
    Tensor,
    gather_rows,
    matmul,
    mean_pool_tokens,
    pad_rows,
    permute,
    reshape,
    scale,
    softmax_lastdim,
    transpose_last2,
)


@dataclass
class AttentionParams:
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    num_heads: int

    def __post_init__(self):
        d = self.model_dim
        for p in (self.wq, self.wk, self.wv, self.wo):
            if p.weight.shape != (d, d):
                raise ValueError("attention projections must be model_dim x model_dim")
        if self.num_heads < 1 or d % self.num_heads:
            raise ValueError(f"{self.num_heads} heads do not divide model_dim {d}")

    @property
    def model_dim(self) -> int:
        return self.wq.out_dim

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @classmethod
    def init(cls, rng: np.random.Generator, model_dim: int, num_heads: int, dtype=np.float64) -> "AttentionParams":
        return cls(*(init_linear(rng, model_dim, model_dim, dtype) for _ in range(4)), num_heads=num_heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for name in ("wq", "wk", "wv", "wo"):
            out.update(getattr(self, name).named(f"{prefix}.{name}"))
        return out


@dataclass(frozen=True)
class ConnectorConfig:
    num_groups: int
    mode: str = "interleaved"

    def __post_init__(self):
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")
        if self.mode not in ("interleaved", "sequential"):
            raise ValueError(f"unknown connector mode {self.mode!r}")


# Plans keyed by id(params) while a frozen_plans() block is active. Used to hold
# the (non-differentiable) sort fixed across finite-difference evaluations.
_frozen: contextvars.ContextVar[dict | None] = contextvars.ContextVar("frozen_plans", default=None)


@contextlib.contextmanager
def frozen_plans():
    store: dict = {}
    token = _frozen.set(store)
    try:
        yield store
    finally:
        _frozen.reset(token)


def _cached(key, build):
    store = _frozen.get()
    if store is None:
        return build()
    if key not in store:
        store[key] = build()
    return store[key]


def _split_heads(x: Tensor, h: int) -> Tensor:
    """[..., T, d] -> [..., h, T, d/h]"""
    lead = x.shape[:-2]
    T, d = x.shape[-2:]
    x = reshape(x, lead + (T, h, d // h))
    nb = len(lead)
    return permute(x, tuple(range(nb)) + (nb + 1, nb, nb + 2))


def _merge_heads(x: Tensor) -> Tensor:
    """[..., h, T, hd] -> [..., T, h*hd]"""
    nb = x.ndim - 3
    h, T, hd = x.shape[-3:]
    x = permute(x, tuple(range(nb)) + (nb + 1, nb, nb + 2))
    return reshape(x, x.shape[:-2] + (h * hd,))


def _qkv(X: Tensor, params: AttentionParams):
    L, d = X.shape[-2:]
    if d != params.model_dim:
        raise ValueError(f"token dim {d} does not match model_dim {params.model_dim}")
    batch = int(np.prod(X.shape[:-2], dtype=np.int64))
    flops.record("projections", 3 * flops.matmul_flops(batch, L, d, d))
    return linear(X, params.wq), linear(X, params.wk), linear(X, params.wv)


def _out_proj(Y: Tensor, params: AttentionParams) -> Tensor:
    L, d = Y.shape[-2:]
    batch = int(np.prod(Y.shape[:-2], dtype=np.int64))
    flops.record("projections", flops.matmul_flops(batch, L, d, d))
    return linear(Y, params.wo)


def _attend(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(hd)) v over the last two axes; returns (out, weights)."""
    Tq, hd = q.shape[-2:]
    Tk = k.shape[-2]
    batch = int(np.prod(q.shape[:-2], dtype=np.int64))
    flops.record("attn_scores", flops.matmul_flops(batch, Tq, hd, Tk))
    flops.record("attn_values", flops.matmul_flops(batch, Tq, Tk, hd))
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(hd))
    w = softmax_lastdim(scores, mask)
    return matmul(w, v), w


def full_attention(X: Tensor, params: AttentionParams) -> Tensor:
    """Standard multi-head softmax attention over all ``L`` tokens of ``[..., L, d]``."""
    Q, K, V = _qkv(X, params)
    h = params.num_heads
    out, _ = _attend(_split_heads(Q, h), _split_heads(K, h), _split_heads(V, h))
    return _out_proj(_merge_heads(out), params)


def plan_for(X: Tensor, params: AttentionParams, M: int) -> ClusterPlan:
    """The cluster plan ``cluster_attention`` would use for ``X``."""
    K = linear(X, params.wk)
    return build_cluster_plan(K.data, M)


def cluster_attention(X: Tensor, params: AttentionParams, M: int, return_plan: bool = False):
    """Multi-head attention restricted to M equal, similarity-ranked clusters.

    The plan comes from the full-channel keys and is shared by every head.
    Outputs are returned in the original token order.
    """
    L = X.shape[-2]
    if M < 1 or L < M:
        raise ValueError(f"need 1 <= M <= L, got M={M}, L={L}")
    Q, K, V = _qkv(X, params)
    plan = _cached(("cluster", id(params), M), lambda: build_cluster_plan(K.data, M))
    N, p, h = plan.cluster_size, plan.padded, params.num_heads
    lead = X.shape[:-2]

    def clustered(t: Tensor) -> Tensor:
        t = gather_rows(pad_rows(t, p), plan.idx)
        t = reshape(t, lead + (M, N, t.shape[-1]))
        return _split_heads(t, h)  # [..., M, h, N, hd]

    mask = None
    if p:
        mask = plan.valid_mask()[:, None, None, :]  # keys: [M, 1, 1, N]
    out, _ = _attend(clustered(Q), clustered(K), clustered(V), mask)
    Y = _merge_heads(out)  # [..., M, N, d]
    Y = reshape(Y, lead + (M * N, Y.shape[-1]))
    Y = _out_proj(restore_order(Y, plan), params)
    return (Y, plan) if return_plan else Y


def connector_compress(X: Tensor, params: AttentionParams, cfg: ConnectorConfig, return_weights: bool = False):
    """Compress ``[..., L, d]`` tokens to ``[..., G, d]``, one token per group.

    Each group's queries are mean-pooled into one query that attends over the
    group's keys and values.
    """
    L = X.shape[-2]
    G = cfg.num_groups
    if L % G:
        raise ValueError(f"{G} groups do not divide {L} tokens")
    Q, K, V = _qkv(X, params)

    def build():
        _, idx = similarity_rank(K.data, compute_center(K.data))
        make = build_group_plan if cfg.mode == "interleaved" else sequential_group_plan
        return make(idx, G)

    gp = _cached(("connector", id(params), cfg), build)
    order = gp.members.reshape(gp.members.shape[:-2] + (L,))
    lead = X.shape[:-2]
    h, n = params.num_heads, gp.group_size

    def grouped(t: Tensor) -> Tensor:
        return reshape(gather_rows(t, order), lead + (G, n, t.shape[-1]))

    q = reshape(mean_pool_tokens(grouped(Q)), lead + (G, 1, Q.shape[-1]))
    out, w = _attend(_split_heads(q, h), _split_heads(grouped(K), h), _split_heads(grouped(V), h))
    Y = reshape(_merge_heads(out), lead + (G, Q.shape[-1]))
    Y = _out_proj(Y, params)
    if return_weights:
        return Y, w.data[..., 0, :]  # [..., G, h, n]
    return Y
