"""Parameters, initialization and optimizers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Tensor, add, matmul, reshape, transpose_last2


@dataclass
class LinearParams:
    weight: Tensor  # [out_dim, in_dim]
    bias: Tensor | None = None

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ValueError("linear weight must be [out_dim, in_dim]")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ValueError("linear bias must be [out_dim]")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, x.shape[0])), p), (p.out_dim,))
    y = matmul(x, transpose_last2(p.weight))
    return y if p.bias is None else add(y, p.bias)


def uniform_param(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    s = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int, dtype=np.float64, bias=True) -> LinearParams:
    w = uniform_param(rng, (out_dim, in_dim), in_dim, dtype)
    return LinearParams(w, zeros_param((out_dim,), dtype) if bias else None)


def sgd_step(params: Iterable[Tensor], lr: float):
    for p in params:
        if p.grad is not None:
            p.data -= p.dtype.type(lr) * p.grad


class AdamW:
    """Adam with decoupled weight decay.

    Decay is skipped for rank-1 tensors (biases, norm scales).
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            wd = self.weight_decay if p.ndim > 1 else 0.0
            adamw_step(p, self.m[k], self.v[k], self.t, self.lr, self.betas, self.eps, wd)


def adamw_step(p: Tensor, m: np.ndarray, v: np.ndarray, t: int, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One in-place AdamW update of ``p`` using moment buffers ``m``/``v``."""
    b1, b2 = betas
    g = p.grad
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    if weight_decay:
        p.data *= p.dtype.type(1 - lr * weight_decay)
    p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
