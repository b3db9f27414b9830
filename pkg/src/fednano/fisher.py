"""Diagonal (empirical) Fisher estimates over flattened adapter parameters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Sample
from .model import AdapterParams, SplitModel, make_batch


@dataclass
class FisherDiagonal:
    values: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if np.any(self.values < 0):
            raise ValueError("Fisher diagonal entries must be nonnegative")

    def __len__(self) -> int:
        return self.values.shape[0]


def estimate_fisher_exact(
    adapters: AdapterParams,
    samples: list[Sample],
    model: SplitModel,
    vocab: int,
) -> FisherDiagonal:
    """Mean of squared per-sample loss gradients at fixed ``adapters``.

    Runs one forward/backward pass per sample (batch size 1) on ``model``, whose
    pass counters record the extra cost.  Squares are sorted per coordinate
    before summation so the result does not depend on sample order.
    """
    if not samples:
        raise ValueError("cannot estimate Fisher on an empty dataset")
    full = make_batch(samples, vocab)

    def grad_of(i: int) -> np.ndarray:
        return model.loss_and_grad(full.take(slice(i, i + 1)), adapters)[1]

    return mean_squared_gradients(grad_of, len(samples), adapters.n_params)


def mean_squared_gradients(grad_of: Callable[[int], np.ndarray], n: int, n_params: int) -> FisherDiagonal:
    """``(1/n) sum_i grad_of(i)**2`` with an order-independent summation."""
    if n < 1:
        raise ValueError("cannot estimate Fisher on an empty dataset")
    squares = np.empty((n, n_params))
    for i in range(n):
        g = grad_of(i)
        squares[i] = g * g
    squares.sort(axis=0)
    return FisherDiagonal(squares.sum(axis=0) / n, n)


@dataclass
class EFAccumulator:
    """Running sum of squared minibatch gradients collected during training."""

    sum_sq: np.ndarray
    steps: int = 0
    samples: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> EFAccumulator:
        return cls(np.zeros(n_params))


def accumulate_fisher_ef(running: EFAccumulator, minibatch_grad: np.ndarray, batch_size: int) -> EFAccumulator:
    grad = np.asarray(minibatch_grad, dtype=np.float64)
    if grad.shape != running.sum_sq.shape:
        raise ValueError(f"gradient length {grad.shape[0]} != accumulator length {running.sum_sq.shape[0]}")
    return EFAccumulator(running.sum_sq + grad * grad, running.steps + 1, running.samples + int(batch_size))


def finalize_fisher_ef(running: EFAccumulator) -> FisherDiagonal:
    if running.steps == 0:
        raise ValueError("no gradients accumulated")
    return FisherDiagonal(running.sum_sq / running.steps, max(running.samples, 1))
