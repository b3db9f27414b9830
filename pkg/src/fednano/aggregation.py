"""Server-side merging of client adapter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fisher import FisherDiagonal


@dataclass
class RoundUpdate:
    client_id: int
    theta: np.ndarray
    n_samples: int
    fisher: FisherDiagonal | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.fisher is not None and len(self.fisher) != self.theta.shape[0]:
            raise ValueError(
                f"client {self.client_id}: fisher length {len(self.fisher)} != theta length {self.theta.shape[0]}"
            )


def _check(updates: list[RoundUpdate]) -> list[RoundUpdate]:
    if not updates:
        raise ValueError("no updates to merge")
    n = updates[0].theta.shape[0]
    for u in updates:
        if u.theta.shape != (n,):
            raise ValueError(f"client {u.client_id}: theta length {u.theta.shape[0]} != {n}")
    # a fixed summation order makes the merge independent of arrival order
    return sorted(updates, key=lambda u: u.client_id)


def size_weights(updates: list[RoundUpdate]) -> np.ndarray:
    sizes = np.array([u.n_samples for u in updates], dtype=np.float64)
    return sizes / sizes.sum()


def fedavg_merge(updates: list[RoundUpdate]) -> np.ndarray:
    updates = _check(updates)
    w = size_weights(updates)
    return sum(wk * u.theta for wk, u in zip(w, updates))


def fisher_merge(updates: list[RoundUpdate], eps: float = 1e-8) -> np.ndarray:
    """Coordinate-wise precision-weighted mean.

    ``theta[i] = sum_k w_k (F_k[i] + e) theta_k[i] / sum_k w_k (F_k[i] + e)``
    with ``w_k = |D_k| / sum_j |D_j|``.  The regulariser ``e`` is ``eps`` times
    the mean Fisher entry over all clients (plain ``eps`` when that mean is
    zero), so multiplying every ``F_k`` by one constant leaves the result
    unchanged and identical ``F_k`` reduce to FedAvg up to rounding.  In
    practice every ``F_k`` is divided by that mean before ``eps`` is added,
    which keeps tiny Fisher magnitudes out of the subnormal range.
    """
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    updates = _check(updates)
    missing = [u.client_id for u in updates if u.fisher is None]
    if missing:
        raise ValueError(f"fisher_merge needs a Fisher diagonal from every client; missing {missing}")
    w = size_weights(updates)
    mass = float(np.mean([u.fisher.values.mean() for u in updates])) if updates[0].theta.size else 0.0
    norm = mass if mass > 0 else 1.0
    num = np.zeros_like(updates[0].theta)
    den = np.zeros_like(updates[0].theta)
    for wk, u in zip(w, updates):
        prec = wk * (u.fisher.values / norm + eps)
        num += prec * u.theta
        den += prec
    return num / den


def proximal_gradient(theta: np.ndarray, theta_global: np.ndarray, mu: float) -> np.ndarray:
    """Gradient of ``mu/2 * ||theta - theta_global||^2``."""
    theta = np.asarray(theta, dtype=np.float64)
    theta_global = np.asarray(theta_global, dtype=np.float64)
    if theta.shape != theta_global.shape:
        raise ValueError(f"length mismatch: {theta.shape} vs {theta_global.shape}")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    return mu * (theta - theta_global)
