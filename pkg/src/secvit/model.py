"""SECViT blocks and the staged backbone.

Blocks are pre-norm: CPE, then clustered attention, then an FFN, each with a
residual. Feature maps are ``[..., C, H, W]``; the token view is
``[..., H*W, C]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import flops
from .attention import AttentionParams, cluster_attention, full_attention
from .nn import LinearParams, init_linear, linear, ones_param, uniform_param, zeros_param
from .tensor import (
    Tensor,
    add,
    conv2d_stride,
    dwconv2d_3x3,
    gelu,
    layer_norm,
    mean_pool_tokens,
    permute,
    reshape,
    transpose_last2,
)


@dataclass(frozen=True)
class BlockConfig:
    model_dim: int
    num_heads: int
    num_clusters: int = 1
    ffn_ratio: float = 3
    norm_eps: float = 1e-6
    attention: str = "sec"  # "sec" | "full"

    def __post_init__(self):
        if self.ffn_ratio <= 0:
            raise ValueError("ffn_ratio must be positive")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.model_dim % self.num_heads:
            raise ValueError("num_heads must divide model_dim")
        if self.attention not in ("sec", "full"):
            raise ValueError(f"unknown attention kind {self.attention!r}")

    @property
    def hidden_dim(self) -> int:
        return int(round(self.model_dim * self.ffn_ratio))


@dataclass(frozen=True)
class ModelConfig:
    stage_depths: tuple[int, ...]
    stage_channels: tuple[int, ...]
    stage_heads: tuple[int, ...]
    stage_clusters: tuple[int, ...]
    num_classes: int
    in_channels: int = 3
    ffn_ratio: float = 3
    norm_eps: float = 1e-6
    stem_strides: tuple[int, ...] = (2, 1, 2, 1)
    stem_norm: str = "layer"
    attention: str = "sec"

    def __post_init__(self):
        n = len(self.stage_depths)
        lists = (self.stage_channels, self.stage_heads, self.stage_clusters)
        if not 1 <= n <= 4 or any(len(x) != n for x in lists):
            raise ValueError("stage lists must share a length between 1 and 4")
        if len(self.stem_strides) != 4 or any(s not in (1, 2) for s in self.stem_strides):
            raise ValueError("stem_strides must be four values from {1, 2}")
        if self.stem_norm != "layer":
            raise ValueError("only stem_norm='layer' is implemented")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        for c, h in zip(self.stage_channels, self.stage_heads):
            if c % h:
                raise ValueError(f"{h} heads do not divide {c} channels")

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    @property
    def stem_factor(self) -> int:
        return int(np.prod(self.stem_strides))

    @property
    def downsample_factor(self) -> int:
        return self.stem_factor * 2 ** (self.num_stages - 1)

    def block_config(self, stage: int) -> BlockConfig:
        return BlockConfig(
            self.stage_channels[stage],
            self.stage_heads[stage],
            self.stage_clusters[stage],
            self.ffn_ratio,
            self.norm_eps,
            self.attention,
        )

    def with_clusters(self, clusters) -> "ModelConfig":
        from dataclasses import replace

        return replace(self, stage_clusters=tuple(clusters))


def _arch(depths, channels, heads, num_classes=1000, clusters=(32, 8, 2, 1)):
    return ModelConfig(tuple(depths), tuple(channels), tuple(heads), tuple(clusters), num_classes)


PRESETS: dict[str, ModelConfig] = {
    "secvit-t": _arch([2, 2, 9, 2], [64, 128, 256, 512], [2, 4, 8, 16]),
    "secvit-s": _arch([4, 4, 18, 4], [64, 128, 256, 512], [2, 4, 8, 16]),
    "secvit-b": _arch([4, 8, 26, 9], [80, 160, 320, 512], [2, 4, 8, 16]),
    "secvit-l": _arch([4, 8, 26, 9], [112, 224, 448, 640], [4, 8, 14, 20]),
    "toy": ModelConfig((2, 2), (32, 64), (2, 4), (4, 1), num_classes=10, in_channels=1),
}


# ---------------------------------------------------------------- parameters


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim: int, dtype) -> "NormParams":
        return cls(ones_param((dim,), dtype), zeros_param((dim,), dtype))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


@dataclass
class ConvParams:
    weight: Tensor  # [C_out, C_in, 3, 3]
    bias: Tensor
    stride: int = 1

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, stride: int, dtype) -> "ConvParams":
        return cls(uniform_param(rng, (c_out, c_in, 3, 3), c_in * 9, dtype), zeros_param((c_out,), dtype), stride)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class BlockParams:
    cpe_kernel: Tensor  # [C, 3, 3]
    cpe_bias: Tensor
    norm1: NormParams
    attn: AttentionParams
    norm2: NormParams
    fc1: LinearParams
    fc2: LinearParams

    @classmethod
    def init(cls, rng, cfg: BlockConfig, dtype=np.float64) -> "BlockParams":
        d = cfg.model_dim
        return cls(
            uniform_param(rng, (d, 3, 3), 9, dtype),
            zeros_param((d,), dtype),
            NormParams.init(d, dtype),
            AttentionParams.init(rng, d, cfg.num_heads, dtype),
            NormParams.init(d, dtype),
            init_linear(rng, d, cfg.hidden_dim, dtype),
            init_linear(rng, cfg.hidden_dim, d, dtype),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.cpe.kernel": self.cpe_kernel, f"{prefix}.cpe.bias": self.cpe_bias}
        out.update(self.norm1.named(f"{prefix}.norm1"))
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update(self.norm2.named(f"{prefix}.norm2"))
        out.update(self.fc1.named(f"{prefix}.ffn.fc1"))
        out.update(self.fc2.named(f"{prefix}.ffn.fc2"))
        return out


# ---------------------------------------------------------------- layers


def _numel_lead(x: Tensor, keep: int) -> int:
    return int(np.prod(x.shape[:-keep], dtype=np.int64))


def cpe(X: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Residual depthwise 3x3 positional encoding: ``X + dwconv(X)``."""
    C, H, W = X.shape[-3:]
    flops.record("conv", 2 * 9 * C * H * W * _numel_lead(X, 3))
    y = dwconv2d_3x3(X, kernels)
    if bias is not None:
        y = add(y, reshape(bias, (C, 1, 1)))
    return add(X, y)


def ffn(X: Tensor, fc1: LinearParams, fc2: LinearParams) -> Tensor:
    L, d = X.shape[-2:]
    flops.record("ffn", 2 * flops.matmul_flops(_numel_lead(X, 2), L, d, fc1.out_dim))
    return linear(gelu(linear(X, fc1)), fc2)


def norm(X: Tensor, p: NormParams, eps: float = 1e-6) -> Tensor:
    return layer_norm(X, p.gamma, p.beta, eps)


def channel_norm(X: Tensor, p: NormParams, eps: float = 1e-6) -> Tensor:
    """Layer norm over the channel axis of ``[..., C, H, W]``."""
    nb = X.ndim - 3
    lead = tuple(range(nb))
    y = layer_norm(permute(X, lead + (nb + 1, nb + 2, nb)), p.gamma, p.beta, eps)
    return permute(y, lead + (nb + 2, nb, nb + 1))


def conv(X: Tensor, p: ConvParams) -> Tensor:
    C_out, C_in = p.weight.shape[:2]
    y = conv2d_stride(X, p.weight, p.stride)
    flops.record("conv", flops.matmul_flops(_numel_lead(y, 3), y.shape[-2] * y.shape[-1], C_in * 9, C_out))
    return add(y, reshape(p.bias, (C_out, 1, 1)))


def to_tokens(X: Tensor) -> Tensor:
    C, H, W = X.shape[-3:]
    return transpose_last2(reshape(X, X.shape[:-3] + (C, H * W)))


def to_map(T: Tensor, H: int, W: int) -> Tensor:
    C = T.shape[-1]
    return reshape(transpose_last2(T), T.shape[:-2] + (C, H, W))


def secvit_block(X: Tensor, cfg: BlockConfig, params: BlockParams) -> Tensor:
    C, H, W = X.shape[-3:]
    if H * W < cfg.num_clusters:
        raise ValueError(f"{H * W} tokens cannot form {cfg.num_clusters} clusters")
    X = cpe(X, params.cpe_kernel, params.cpe_bias)
    T = to_tokens(X)
    h = norm(T, params.norm1, cfg.norm_eps)
    if cfg.attention == "full":
        a = full_attention(h, params.attn)
    else:
        a = cluster_attention(h, params.attn, cfg.num_clusters)
    T = add(T, a)
    T = add(T, ffn(norm(T, params.norm2, cfg.norm_eps), params.fc1, params.fc2))
    return to_map(T, H, W)


# ---------------------------------------------------------------- network


@dataclass
class SECViT:
    cfg: ModelConfig
    stem: list[tuple[ConvParams, NormParams]]
    stages: list[list[BlockParams]]
    downsamples: list[tuple[ConvParams, NormParams]]
    head_norm: NormParams
    head: LinearParams
    dtype: type = np.float64
    hooks: list[Callable[[int, Tensor], None]] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> "SECViT":
        rng = np.random.default_rng(seed)
        c0 = cfg.stage_channels[0]
        widths = [cfg.in_channels, c0 // 2, c0 // 2, c0, c0]
        stem = [
            (ConvParams.init(rng, widths[i], widths[i + 1], cfg.stem_strides[i], dtype), NormParams.init(widths[i + 1], dtype))
            for i in range(4)
        ]
        stages, downs = [], []
        for s in range(cfg.num_stages):
            if s > 0:
                c_in, c_out = cfg.stage_channels[s - 1], cfg.stage_channels[s]
                downs.append((ConvParams.init(rng, c_in, c_out, 2, dtype), NormParams.init(c_out, dtype)))
            bcfg = cfg.block_config(s)
            stages.append([BlockParams.init(rng, bcfg, dtype) for _ in range(cfg.stage_depths[s])])
        c_last = cfg.stage_channels[-1]
        head = init_linear(rng, c_last, cfg.num_classes, dtype)
        return cls(cfg, stem, stages, downs, NormParams.init(c_last, dtype), head, dtype)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (c, n) in enumerate(self.stem):
            out.update(c.named(f"stem.conv{i}"))
            out.update(n.named(f"stem.norm{i}"))
        for s, blocks in enumerate(self.stages):
            if s > 0:
                c, n = self.downsamples[s - 1]
                out.update(c.named(f"down{s}.conv"))
                out.update(n.named(f"down{s}.norm"))
            for b, bp in enumerate(blocks):
                out.update(bp.named(f"stage{s}.block{b}"))
        out.update(self.head_norm.named("head.norm"))
        out.update(self.head.named("head.fc"))
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def load_state(self, state: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def stem_forward(self, images: Tensor) -> Tensor:
        x = images
        for c, n in self.stem:
            x = gelu(channel_norm(conv(x, c), n, self.cfg.norm_eps))
        return x

    def features(self, images: Tensor) -> list[Tensor]:
        """Per-stage output maps (after each stage's last block)."""
        H, W = images.shape[-2:]
        f = self.cfg.downsample_factor
        if H % f or W % f:
            raise ValueError(f"input {H}x{W} is not divisible by {f}")
        x = self.stem_forward(images)
        outs = []
        for s, blocks in enumerate(self.stages):
            if s > 0:
                c, n = self.downsamples[s - 1]
                x = channel_norm(conv(x, c), n, self.cfg.norm_eps)
            bcfg = self.cfg.block_config(s)
            for bp in blocks:
                x = secvit_block(x, bcfg, bp)
            for hook in self.hooks:
                hook(s, x)
            outs.append(x)
        return outs

    def forward(self, images: Tensor) -> Tensor:
        x = self.features(images)[-1]
        T = norm(to_tokens(x), self.head_norm, self.cfg.norm_eps)
        return linear(mean_pool_tokens(T), self.head)

    __call__ = forward


def secvit_forward(image: Tensor, cfg: ModelConfig, params: SECViT) -> Tensor:
    return params.forward(image)
