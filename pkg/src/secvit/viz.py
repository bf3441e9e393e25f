"""Cluster-assignment maps written as binary PPM (P6)."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .sec import build_cluster_plan


def _palette(n: int = 32) -> np.ndarray:
    cols = []
    for i in range(n):
        # golden-angle hue walk, alternating lightness so neighbours differ
        h = (i * 0.618033988749895) % 1.0
        light = 0.45 if i % 2 else 0.62
        cols.append(colorsys.hls_to_rgb(h, light, 0.85))
    return np.round(np.array(cols) * 255).astype(np.uint8)


PALETTE = _palette()


def cluster_map(features: np.ndarray, M: int) -> np.ndarray:
    """Cluster id per spatial position of a ``[C, H, W]`` feature map."""
    C, H, W = features.shape
    tokens = features.reshape(C, H * W).T
    return build_cluster_plan(np.asarray(tokens, dtype=np.float64), M).assignment().reshape(H, W)


def pointwise_stem(model, seed: int = 0):
    """Replace the stem convs with centre-tap kernels of positive weight.

    Each stem output token then depends on one input pixel through a monotone
    map, so feature similarity follows input intensity. Used by the halves demo.
    """
    rng = np.random.default_rng(seed)
    for conv, _ in model.stem:
        w = np.zeros_like(conv.weight.data)
        w[:, :, 1, 1] = rng.uniform(0.0, 1.0, w.shape[:2])
        conv.weight.data[...] = w
        conv.bias.data[...] = rng.uniform(-0.5, 0.5, conv.bias.shape)
    return model


def render(assignment: np.ndarray, block: int = 8) -> np.ndarray:
    """``[H, W]`` ids -> ``[H*block, W*block, 3]`` RGB, one tinted block per token."""
    rgb = PALETTE[np.asarray(assignment) % len(PALETTE)]
    return np.repeat(np.repeat(rgb, block, axis=0), block, axis=1)


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected [H, W, 3] RGB")
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5, [H, W]) or PPM (P6, [H, W, 3])."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] not in (b"P5", b"P6") or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5/P6 image")
    w, h = int(fields[1]), int(fields[2])
    ch = 3 if fields[0] == b"P6" else 1
    data = raw[pos + 1 :]
    if len(data) != w * h * ch:
        raise ValueError(f"{path}: payload size mismatch")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)
