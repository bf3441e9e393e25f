"""Semantic equitable clustering attention on a small numpy autodiff engine."""

from .attention import AttentionParams, ConnectorConfig, cluster_attention, connector_compress, full_attention
from .sec import ClusterPlan, GroupPlan, build_cluster_plan, build_group_plan, restore_order, sequential_group_plan
from .tensor import Tensor, finite_diff_grad, no_grad

__all__ = [
    "AttentionParams",
    "ClusterPlan",
    "ConnectorConfig",
    "GroupPlan",
    "Tensor",
    "build_cluster_plan",
    "build_group_plan",
    "cluster_attention",
    "connector_compress",
    "finite_diff_grad",
    "full_attention",
    "no_grad",
    "restore_order",
    "sequential_group_plan",
]
