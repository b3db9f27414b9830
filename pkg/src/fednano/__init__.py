"""Desk-scale federated learning of low-rank adapters around a frozen server core."""

from .aggregation import RoundUpdate, fedavg_merge, fisher_merge, proximal_gradient
from .data import ClientDataset, Sample, TaskSpec, build_client_datasets, dirichlet_partition, generate_synthetic_task
from .federation import FederationConfig, RoundHistory, communication_report, run_federation
from .fisher import FisherDiagonal, estimate_fisher_exact
from .model import AdapterParams, ModelDims, init_adapters, init_frozen

__all__ = [
    "AdapterParams",
    "ClientDataset",
    "FederationConfig",
    "FisherDiagonal",
    "ModelDims",
    "RoundHistory",
    "RoundUpdate",
    "Sample",
    "TaskSpec",
    "build_client_datasets",
    "communication_report",
    "dirichlet_partition",
    "estimate_fisher_exact",
    "fedavg_merge",
    "fisher_merge",
    "generate_synthetic_task",
    "init_adapters",
    "init_frozen",
    "proximal_gradient",
    "run_federation",
]
