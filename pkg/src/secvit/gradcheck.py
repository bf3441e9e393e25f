"""Finite-difference checks of every differentiable op, one block, and the connector."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionParams, ConnectorConfig, cluster_attention, connector_compress, frozen_plans
from .model import BlockConfig, BlockParams, secvit_block
from .nn import LinearParams, linear
from .tensor import Tensor, finite_diff_grad, max_rel_error

TOLERANCE = 1e-6


def _t(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def check(fn: Callable[..., Tensor], inputs: list[Tensor], rng: np.random.Generator) -> float:
    """Max relative error between tape and central-difference gradients of
    ``sum(fn(*inputs) * R)`` for a fixed random ``R``, over all inputs."""
    with T.no_grad():
        shape = fn(*inputs).shape
    R = rng.normal(size=shape)

    def loss(*xs):
        return T.sum_all(T.mul(fn(*xs), R))

    for x in inputs:
        x.grad = None
    loss(*inputs).backward()
    worst = 0.0
    for x in inputs:
        numeric = finite_diff_grad(lambda _: loss(*inputs), x)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


def _perm(rng, L):
    return rng.permutation(L)


def _op_checks(L: int, d: int) -> dict[str, Callable[[np.random.Generator], float]]:
    return {
        "add": lambda r: check(T.add, [_t(r, L, d), _t(r, d)], r),
        "sub": lambda r: check(T.sub, [_t(r, L, d), _t(r, L, d)], r),
        "mul": lambda r: check(T.mul, [_t(r, L, d), _t(r, L, d)], r),
        "scale": lambda r: check(lambda x: T.scale(x, -1.7), [_t(r, L, d)], r),
        "gelu": lambda r: check(T.gelu, [_t(r, L, d)], r),
        "matmul": lambda r: check(T.matmul, [_t(r, 2, L, d), _t(r, d, 3)], r),
        "transpose_last2": lambda r: check(T.transpose_last2, [_t(r, 2, L, d)], r),
        "permute": lambda r: check(lambda x: T.permute(x, (1, 2, 0)), [_t(r, 2, L, d)], r),
        "reshape": lambda r: check(lambda x: T.reshape(x, (d, L)), [_t(r, L, d)], r),
        "softmax": lambda r: check(T.softmax_lastdim, [_t(r, L, d)], r),
        "softmax_masked": lambda r: check(
            lambda x: T.softmax_lastdim(x, np.arange(d) < max(1, d - 2)), [_t(r, L, d)], r
        ),
        "mean_pool_tokens": lambda r: check(T.mean_pool_tokens, [_t(r, L, d)], r),
        "sum": lambda r: check(T.sum_all, [_t(r, L, d)], r),
        "mean": lambda r: check(T.mean_all, [_t(r, L, d)], r),
        "gather_rows": lambda r: check(lambda x, p=_perm(r, L): T.gather_rows(x, p), [_t(r, L, d)], r),
        "take_rows": lambda r: check(lambda x, p=r.integers(0, L, L + 2): T.take_rows(x, p), [_t(r, L, d)], r),
        "pad_rows": lambda r: check(lambda x: T.pad_rows(x, 3), [_t(r, L, d)], r),
        "layer_norm": lambda r: check(T.layer_norm, [_t(r, L, d), _t(r, d), _t(r, d)], r),
        "cross_entropy": lambda r: check(
            lambda z, y=r.integers(0, d, L): T.cross_entropy_logits(z, y), [_t(r, L, d)], r
        ),
        "dwconv2d_3x3": lambda r: check(T.dwconv2d_3x3, [_t(r, 2, 3, 5, 4), _t(r, 3, 3, 3)], r),
        "conv2d_stride1": lambda r: check(lambda x, w: T.conv2d_stride(x, w, 1), [_t(r, 2, 3, 5, 4), _t(r, 2, 3, 3, 3)], r),
        "conv2d_stride2": lambda r: check(lambda x, w: T.conv2d_stride(x, w, 2), [_t(r, 2, 3, 5, 4), _t(r, 2, 3, 3, 3)], r),
        "linear": lambda r: check(
            lambda x, w, b: linear(x, LinearParams(w, b)), [_t(r, L, d), _t(r, 3, d), _t(r, 3)], r
        ),
    }


def _attention_inputs(r, d, heads):
    p = AttentionParams.init(r, d, heads)
    return p, [p.wq.weight, p.wq.bias, p.wk.weight, p.wk.bias, p.wv.weight, p.wv.bias, p.wo.weight, p.wo.bias]


def check_cluster_attention(r: np.random.Generator, L: int = 10, d: int = 8, heads: int = 2, M: int = 3) -> float:
    p, weights = _attention_inputs(r, d, heads)
    X = _t(r, L, d)
    with frozen_plans():
        return check(lambda x, *_: cluster_attention(x, p, M), [X] + weights, r)


def check_block(r: np.random.Generator, C: int = 8, H: int = 4, W: int = 4, heads: int = 2, M: int = 3) -> float:
    cfg = BlockConfig(C, heads, M)
    bp = BlockParams.init(r, cfg)
    for t in bp.named("b").values():
        if t.ndim == 1:
            # non-trivial norm/bias values so every path carries gradient
            t.data[...] = r.uniform(-1.0, 1.0, t.shape)
    X = _t(r, C, H, W)
    params = list(bp.named("b").values())
    with frozen_plans():
        return check(lambda x, *_: secvit_block(x, cfg, bp), [X] + params, r)


def check_connector(r: np.random.Generator, L: int = 12, d: int = 8, heads: int = 2, G: int = 4, mode: str = "interleaved") -> float:
    p, weights = _attention_inputs(r, d, heads)
    X = _t(r, L, d)
    with frozen_plans():
        return check(lambda x, *_: connector_compress(x, p, ConnectorConfig(G, mode)), [X] + weights, r)


def all_checks(tokens: int = 6, dim: int = 5) -> dict[str, Callable[[np.random.Generator], float]]:
    checks = _op_checks(tokens, dim)
    checks["cluster_attention"] = check_cluster_attention
    checks["cluster_attention_padded"] = lambda r: check_cluster_attention(r, L=10, M=4)
    checks["secvit_block"] = check_block
    checks["connector_interleaved"] = check_connector
    checks["connector_sequential"] = lambda r: check_connector(r, mode="sequential")
    return checks


def run_gradcheck(seed: int = 0, tokens: int = 6, dim: int = 5, only=None) -> dict[str, float]:
    """Max relative error per check; each check gets its own child RNG.

    ``only`` restricts the run to the named checks without changing the RNG
    stream any check sees.
    """
    checks = all_checks(tokens, dim)
    if only is not None:
        unknown = sorted(set(only) - set(checks))
        if unknown:
            raise ValueError(f"unknown gradcheck name(s): {', '.join(unknown)}")
    seeds = np.random.SeedSequence(seed).spawn(len(checks))
    return {
        name: fn(np.random.default_rng(s))
        for (name, fn), s in zip(checks.items(), seeds)
        if only is None or name in only
    }
