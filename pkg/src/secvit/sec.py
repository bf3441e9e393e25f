"""Single-pass equitable token clustering.

Tokens are ranked by cosine similarity of their key to the mean key, and the
ranked order is cut into equal slices (backbone clusters) or dealt out with a
stride (connector groups). All functions accept an optional leading batch
axis on ``K``; plans then carry one permutation per batch entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, mean_pool_tokens, take_rows

COS_EPS = 1e-12


@dataclass(frozen=True)
class ClusterPlan:
    sim: np.ndarray  # [..., L]
    idx: np.ndarray  # [..., L + padded], descending sim, dummies last
    inv_idx: np.ndarray  # [..., L + padded]
    num_clusters: int
    cluster_size: int
    padded: int = 0
    iterations: int = 1

    @property
    def length(self) -> int:
        return self.sim.shape[-1]

    def clusters(self) -> list[range]:
        return equal_partition(self.length + self.padded, self.num_clusters)

    def assignment(self) -> np.ndarray:
        """Cluster id of each real token, in original order."""
        return self.inv_idx[..., : self.length] // self.cluster_size

    def valid_mask(self) -> np.ndarray:
        """``[M, N]`` mask of sorted slots holding real (non-dummy) tokens."""
        ranks = np.arange(self.num_clusters * self.cluster_size)
        return (ranks < self.length).reshape(self.num_clusters, self.cluster_size)


@dataclass(frozen=True)
class GroupPlan:
    num_groups: int
    group_size: int
    members: np.ndarray  # [..., G, L/G] original token indices
    ranks: np.ndarray  # [G, L/G] sorted-rank positions of each member


def _keys(K) -> np.ndarray:
    return K.data if isinstance(K, Tensor) else np.asarray(K, dtype=np.float64)


def compute_center(K) -> np.ndarray:
    """Mean key over the token axis (the single cluster center)."""
    K = K if isinstance(K, Tensor) else Tensor(np.asarray(K, dtype=np.float64))
    if K.shape[-2] == 0:
        raise ValueError("cannot compute a center of zero tokens")
    return mean_pool_tokens(K).data


def similarity_rank(K, k_c, eps: float = COS_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity of each key to ``k_c`` and the descending stable order."""
    Kd = _keys(K)
    kc = np.asarray(k_c, dtype=Kd.dtype)
    dots = np.einsum("...ld,...d->...l", Kd, kc)
    row_norm = np.maximum(np.linalg.norm(Kd, axis=-1), eps)
    c_norm = np.maximum(np.linalg.norm(kc, axis=-1), eps)[..., None]
    sim = dots / (row_norm * c_norm)
    # stable sort of -sim: descending, ties keep ascending original index
    idx = np.argsort(-sim, axis=-1, kind="stable")
    return sim, idx


def pad_to_divisible(L: int, M: int) -> int:
    if M < 1:
        raise ValueError("cluster count must be >= 1")
    return (M - L % M) % M


def equal_partition(L: int, M: int) -> list[range]:
    """Contiguous, equal rank ranges ``[m*N, (m+1)*N)`` for ``M`` clusters."""
    if M < 1:
        raise ValueError("cluster count must be >= 1")
    if M > L:
        raise ValueError(f"more clusters ({M}) than tokens ({L})")
    if L % M:
        raise ValueError(f"{M} clusters do not divide {L} tokens; pad first")
    N = L // M
    return [range(m * N, (m + 1) * N) for m in range(M)]


def build_cluster_plan(K, M: int) -> ClusterPlan:
    """Center, rank, pad and partition in one pass over the tokens."""
    Kd = _keys(K)
    L = Kd.shape[-2]
    if M < 1 or L < M:
        raise ValueError(f"need 1 <= M <= L, got M={M}, L={L}")
    sim, idx = similarity_rank(Kd, compute_center(Kd))
    p = pad_to_divisible(L, M)
    if p:
        # dummies carry sim = -inf, so they sort after every real token
        tail = np.broadcast_to(np.arange(L, L + p), idx.shape[:-1] + (p,))
        idx = np.concatenate([idx, tail], axis=-1)
    slots = np.arange(L + p)
    inv = np.empty_like(idx)
    np.put_along_axis(inv, idx, np.broadcast_to(slots, idx.shape), axis=-1)
    return ClusterPlan(sim, idx, inv, M, (L + p) // M, p, iterations=1)


def restore_order(y_sorted: Tensor, plan: ClusterPlan) -> Tensor:
    """Scatter sorted-order rows back to original token order, dropping dummies."""
    if y_sorted.shape[-2] != plan.idx.shape[-1]:
        raise ValueError(f"{y_sorted.shape[-2]} rows do not match plan of {plan.idx.shape[-1]} slots")
    return take_rows(y_sorted, plan.inv_idx[..., : plan.length])


def _check_groups(L: int, G: int):
    if G < 1:
        raise ValueError("group count must be >= 1")
    if L % G:
        raise ValueError(f"{G} groups do not divide {L} tokens")


def build_group_plan(sim_idx: np.ndarray, G: int) -> GroupPlan:
    """Interleaved groups: group n takes sorted ranks n, n+G, n+2G, ..."""
    sim_idx = np.asarray(sim_idx)
    L = sim_idx.shape[-1]
    _check_groups(L, G)
    ranks = np.arange(L).reshape(L // G, G).T
    return GroupPlan(G, L // G, sim_idx[..., ranks], ranks)


def sequential_group_plan(sim_idx: np.ndarray, G: int) -> GroupPlan:
    """Contiguous groups: group n takes sorted ranks [n*L/G, (n+1)*L/G)."""
    sim_idx = np.asarray(sim_idx)
    L = sim_idx.shape[-1]
    _check_groups(L, G)
    ranks = np.arange(L).reshape(G, L // G)
    return GroupPlan(G, L // G, sim_idx[..., ranks], ranks)
