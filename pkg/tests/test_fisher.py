import math

import numpy as np
import pytest

from fednano.data import TaskSpec, generate_synthetic_task
from fednano.fisher import (
    EFAccumulator,
    FisherDiagonal,
    accumulate_fisher_ef,
    estimate_fisher_exact,
    finalize_fisher_ef,
    mean_squared_gradients,
)
from fednano.model import SplitModel, make_batch
from fednano.tensor import Graph

SAMPLES = generate_synthetic_task(TaskSpec(n_samples=40), 2)

# 1-parameter logistic toy: p(y=1 | x) = sigmoid(w x), w = 0.5
TOY_X = [1.0, -2.0, 3.0, 0.5]
TOY_Y = [1, 0, 1, 0]
TOY_W = 0.5
# hand formula (sigmoid(w x) - y) * x, squared and averaged
TOY_FISHER = 0.20259428981796632


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_toy_oracle_value():
    grads = [(sigmoid(TOY_W * x) - y) * x for x, y in zip(TOY_X, TOY_Y)]
    assert sum(g * g for g in grads) / 4 == pytest.approx(TOY_FISHER, abs=1e-15)


def toy_graph():
    # two-class softmax with logits [0, w x] is logistic regression on w x
    g = Graph()
    x = g.input("x")
    zero = g.input("zero")
    w = g.param("w", [[TOY_W]])
    logits = g.concat(zero, g.matmul(x, w))
    loss = g.mean(g.softmax_xent(logits, g.input("y", dtype=np.int64)))
    return g, loss


def toy_fisher():
    g, loss = toy_graph()

    def grad_of(i):
        g.forward({"x": [[TOY_X[i]]], "zero": [[0.0]], "y": [TOY_Y[i]]})
        return g.backward(loss)["w"].reshape(-1)

    return mean_squared_gradients(grad_of, 4, 1)


def test_logistic_toy_matches_hand_value():
    f = toy_fisher()
    assert f.sample_count == 4
    assert abs(f.values[0] - TOY_FISHER) < 1e-10


def test_single_sample_is_squared_gradient(frozen, dims, trained_adapters):
    pipeline, core = frozen
    model = SplitModel(pipeline, core, trained_adapters)
    f = estimate_fisher_exact(trained_adapters, SAMPLES[:1], model, dims.vocab)
    _, g = SplitModel(pipeline, core, trained_adapters).loss_and_grad(make_batch(SAMPLES[:1], dims.vocab), trained_adapters)
    np.testing.assert_array_equal(f.values, g * g)


def test_exact_fisher_properties(frozen, dims, trained_adapters):
    pipeline, core = frozen
    model = SplitModel(pipeline, core, trained_adapters)
    f = estimate_fisher_exact(trained_adapters, SAMPLES, model, dims.vocab)
    assert len(f) == trained_adapters.n_params
    assert (f.values >= 0).all()
    assert model.forward_passes == model.backward_passes == len(SAMPLES)

    shuffled = [SAMPLES[i] for i in np.random.default_rng(0).permutation(len(SAMPLES))]
    f2 = estimate_fisher_exact(trained_adapters, shuffled, SplitModel(pipeline, core, trained_adapters), dims.vocab)
    assert np.abs(f.values - f2.values).max() <= 1e-12


@pytest.mark.parametrize("c", [0.5, 3.0, 17.25])
def test_loss_scale_covariance(frozen, dims, trained_adapters, c):
    pipeline, core = frozen
    base = estimate_fisher_exact(trained_adapters, SAMPLES[:10], SplitModel(pipeline, core, trained_adapters), dims.vocab)
    scaled = estimate_fisher_exact(
        trained_adapters, SAMPLES[:10], SplitModel(pipeline, core, trained_adapters, loss_scale=c), dims.vocab
    )
    assert np.abs(scaled.values - c * c * base.values).max() <= 1e-12 * max(1.0, c * c * base.values.max())


def test_empty_dataset_rejected(frozen, dims, trained_adapters):
    with pytest.raises(ValueError):
        estimate_fisher_exact(trained_adapters, [], SplitModel(*frozen, trained_adapters), dims.vocab)


def test_ef_single_and_repeated():
    g = np.array([1.0, -2.0, 0.5])
    acc = accumulate_fisher_ef(EFAccumulator.zeros(3), g, 8)
    np.testing.assert_array_equal(finalize_fisher_ef(acc).values, g * g)
    acc = accumulate_fisher_ef(acc, g, 8)
    np.testing.assert_array_equal(finalize_fisher_ef(acc).values, g * g)
    assert finalize_fisher_ef(acc).sample_count == 16


def test_ef_length_mismatch():
    with pytest.raises(ValueError):
        accumulate_fisher_ef(EFAccumulator.zeros(3), np.zeros(4), 1)


def test_ef_empty_finalize():
    with pytest.raises(ValueError):
        finalize_fisher_ef(EFAccumulator.zeros(3))


def test_fisher_diagonal_rejects_negative():
    with pytest.raises(ValueError):
        FisherDiagonal(np.array([1.0, -1e-3]), 1)
