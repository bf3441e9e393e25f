"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds its output eagerly and, when any input tracks gradients,
records a backward closure on the output. ``Tensor.backward`` linearizes the
graph into a :class:`Tape` (topological order) and walks it once in reverse.
The graph is freed afterwards.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        Tape.from_output(self).run(np.asarray(grad, dtype=self.dtype))

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)


class Tape:
    """Topologically ordered op records reachable from one output."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, seed: np.ndarray):
        out = self.records[-1]
        out.grad = seed if out.grad is None else out.grad + seed
        for node in reversed(self.records):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                g = np.asarray(g, dtype=p.dtype)
                p.grad = g if p.grad is None else p.grad + g
            # free the graph behind us; intermediate grads are not kept
            node._parents = ()
            node._backward = None
            if node is not out:
                node.grad = None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_derivative(x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    return cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    return _make(xd * cdf, (x,), lambda g: (g * _gelu_derivative(xd, cdf),), "gelu")


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    return _make(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),),
        "sum",
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
        "mean",
    )


def mean_pool_tokens(x: Tensor) -> Tensor:
    """Average over the token axis of ``[..., L, d]``."""
    if x.ndim < 2:
        raise ValueError("mean_pool_tokens expects [..., L, d]")
    n = x.shape[-2]
    if n == 0:
        raise ValueError("mean_pool_tokens over zero tokens")
    return _make(
        x.data.mean(axis=-2),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, -2) / n, x.shape).copy(),),
        "mean_pool_tokens",
    )


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def transpose_last2(x: Tensor) -> Tensor:
    return _make(
        np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose_last2"
    )


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------- attention pieces


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) zeroes excluded entries."""
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    if mask is not None:
        # fully masked rows come out as all-zero weights
        m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def _flat_rows(x: np.ndarray, idx: np.ndarray):
    idx = np.asarray(idx)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, x.shape[:-2] + idx.shape)
    if idx.shape[:-1] != x.shape[:-2]:
        raise ValueError(f"index batch shape {idx.shape[:-1]} does not match {x.shape[:-2]}")
    lead = int(np.prod(x.shape[:-2], dtype=np.int64))
    return idx.reshape(lead, idx.shape[-1]), lead


def take_rows(x: Tensor, idx) -> Tensor:
    """Row selection along the token axis: ``out[..., j, :] = x[..., idx[..., j], :]``."""
    if x.ndim < 2:
        raise ValueError("take_rows expects [..., L, d]")
    L, d = x.shape[-2:]
    idx2, lead = _flat_rows(x.data, idx)
    if idx2.size and (idx2.min() < 0 or idx2.max() >= L):
        raise IndexError("row index out of range")
    x2 = x.data.reshape(lead, L, d)
    rows = np.arange(lead)[:, None]
    out = x2[rows, idx2].reshape(x.shape[:-2] + (idx2.shape[-1], d))

    def backward(g):
        gx = np.zeros((lead, L, d), dtype=x.dtype)
        np.add.at(gx, (rows, idx2), g.reshape(lead, -1, d))
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward, "take_rows")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Permute rows: row j of the output is row ``idx[j]`` of the input.

    ``idx`` must be a bijection on ``0..L-1`` (per leading batch entry).
    """
    L = x.shape[-2]
    idx2, lead = _flat_rows(x.data, idx)
    if idx2.shape[-1] != L or not (np.sort(idx2, axis=-1) == np.arange(L)).all():
        raise ValueError("gather_rows index is not a permutation of the rows")
    x2 = x.data.reshape(lead, L, -1)
    rows = np.arange(lead)[:, None]
    out = x2[rows, idx2].reshape(x.shape)

    def backward(g):
        gx = np.empty_like(x2)
        gx[rows, idx2] = g.reshape(x2.shape)
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward, "gather_rows")


def pad_rows(x: Tensor, p: int) -> Tensor:
    """Append ``p`` zero rows on the token axis."""
    if p == 0:
        return x
    L = x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-2] = (0, p)
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[..., :L, :],), "pad_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gh = g * gamma.data
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[B, C]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,) or (labels.size and (labels.min() < 0 or labels.max() >= C)):
        raise ValueError("labels must be B class ids in range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- convolutions


def _pad_hw(x: np.ndarray) -> np.ndarray:
    widths = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(x, widths)


def _out_hw(H: int, W: int, stride: int) -> tuple[int, int]:
    return -(-H // stride), -(-W // stride)


def dwconv2d_3x3(x: Tensor, kernels: Tensor) -> Tensor:
    """Depthwise 3x3 cross-correlation with zero padding 1 on ``[..., C, H, W]``."""
    if x.ndim < 3 or kernels.shape != (x.shape[-3], 3, 3):
        raise ValueError(f"dwconv2d_3x3 shape mismatch: {x.shape} vs kernels {kernels.shape}")
    H, W = x.shape[-2:]
    xp = _pad_hw(x.data)
    k = kernels.data
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += xp[..., i : i + H, j : j + W] * k[:, i, j, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k)
        lead = tuple(range(g.ndim - 3))
        for i in range(3):
            for j in range(3):
                gxp[..., i : i + H, j : j + W] += g * k[:, i, j, None, None]
                gk[:, i, j] = (g * xp[..., i : i + H, j : j + W]).sum(axis=lead + (-2, -1))
        return gxp[..., 1 : H + 1, 1 : W + 1], gk

    return _make(out, (x, kernels), backward, "dwconv2d_3x3")


def conv2d_stride(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Dense 3x3 cross-correlation, zero padding 1, stride 1 or 2.

    ``x`` is ``[..., C_in, H, W]``, ``w`` is ``[C_out, C_in, 3, 3]``; output
    spatial size is ``ceil(H / stride)``.
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if x.ndim < 3 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[-3]:
        raise ValueError(f"conv2d_stride shape mismatch: {x.shape} vs weight {w.shape}")
    H, W = x.shape[-2:]
    Ho, Wo = _out_hw(H, W, stride)
    wd = w.data
    C_out, C_in = wd.shape[:2]
    # channels-last so each of the 9 taps is one matmul against a [C_in, C_out] slice
    xl = np.moveaxis(_pad_hw(x.data), -3, -1)
    rs = slice(None)

    def tap(i, j):
        return (..., slice(i, i + stride * (Ho - 1) + 1, stride), slice(j, j + stride * (Wo - 1) + 1, stride), rs)

    taps = [(i, j) for i in range(3) for j in range(3)]
    cols = np.stack([xl[tap(i, j)] for i, j in taps], axis=-1)  # [..., Ho, Wo, C_in, 9]
    wmat = wd.reshape(C_out, C_in * 9)
    out = np.moveaxis(cols.reshape(cols.shape[:-2] + (C_in * 9,)) @ wmat.T, -1, -3)

    def backward(g):
        gl = np.moveaxis(g, -3, -1)  # [..., Ho, Wo, C_out]
        gw = (gl.reshape(-1, C_out).T @ cols.reshape(-1, C_in * 9)).reshape(wd.shape)
        gcols = (gl @ wmat).reshape(cols.shape)
        gxl = np.zeros_like(xl)
        for t, (i, j) in enumerate(taps):
            gxl[tap(i, j)] += gcols[..., t]
        gx = np.moveaxis(gxl, -1, -3)[..., 1 : H + 1, 1 : W + 1]
        return gx, gw

    return _make(out, (x, w), backward, "conv2d_stride")


# ---------------------------------------------------------------- verification


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x.data`` is perturbed in place (and restored), so ``f`` may close over
    ``x`` indirectly, e.g. as a parameter of a larger model.
    """
    if x.dtype != np.float64:
        raise TypeError("finite differences need float64 inputs")

    def evaluate() -> float:
        with no_grad():
            v = f(x)
        v = float(v.data if isinstance(v, Tensor) else v)
        if not np.isfinite(v):
            raise FloatingPointError("f is not finite at a perturbed point")
        return v

    flat = x.data.reshape(-1)
    grad = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max over elements of |a - b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / denom).max())
