import math

import numpy as np
import pytest

from fednano.data import TaskSpec, generate_synthetic_task
from fednano.model import (
    AdapterParams,
    BoundaryActivation,
    BoundaryGradient,
    ClientModel,
    ModelDims,
    ServerModel,
    SplitModel,
    StitchedModel,
    client_backward,
    client_forward,
    core_param_count,
    init_adapters,
    init_frozen,
    make_batch,
    pipeline_param_count,
    server_forward_loss,
)
from fednano.tensor import GraphError, finite_difference_gradient, relative_error

SAMPLES = generate_synthetic_task(TaskSpec(n_samples=64), 0)


def frozen_pipeline_output(pipeline, batch):
    """Straight numpy evaluation of the frozen path, no graph."""
    img = np.tanh(batch.images @ pipeline.img_w + pipeline.img_b) @ pipeline.conn_w + pipeline.conn_b
    txt = (batch.bow @ pipeline.embed) @ pipeline.conn_w + pipeline.conn_b
    return np.concatenate([img, txt], axis=1)


def test_init_frozen_deterministic(dims):
    a, b = init_frozen(3, dims), init_frozen(3, dims)
    c = init_frozen(4, dims)
    assert a[0].checksum() == b[0].checksum() and a[1].checksum() == b[1].checksum()
    assert a[0].checksum() != c[0].checksum() and a[1].checksum() != c[1].checksum()


def test_init_frozen_bounds(dims):
    pipeline, core = init_frozen(0, dims)
    assert np.abs(pipeline.img_w).max() <= 1 / math.sqrt(dims.d_img)
    assert np.abs(core.w1).max() <= 1 / math.sqrt(2 * dims.d_model)


def test_frozen_param_count_matches_enumeration():
    dims = ModelDims(d_img=16, d_emb=16, d_model=32, d_hidden=64, n_answers=10)
    pipeline, core = init_frozen(0, dims)
    brute = 0
    for arr in pipeline.arrays() + core.arrays():
        for _ in np.ndindex(arr.shape):
            brute += 1
    assert pipeline_param_count(dims) + core_param_count(dims) == brute


def test_adapter_counts(dims):
    ad = init_adapters(4, 32, 0)
    assert ad.a_i.n_params == 2 * 4 * 32 == 256
    assert ad.n_params == 512
    assert not ad.a_i.up.any() and ad.a_i.scale == 1.0


@pytest.mark.parametrize("rank", [0, 33])
def test_adapter_rank_range(rank):
    with pytest.raises(ValueError):
        init_adapters(rank, 32, 0)


def test_flatten_roundtrip(trained_adapters):
    flat = trained_adapters.flatten()
    again = trained_adapters.with_flat(flat)
    assert np.array_equal(again.flatten(), flat)
    np.testing.assert_array_equal(again.a_t.up, trained_adapters.a_t.up)
    # documented order: a_i.down, a_i.up, a_t.down, a_t.up
    n = trained_adapters.a_i.down.size
    np.testing.assert_array_equal(flat[:n], trained_adapters.a_i.down.reshape(-1))
    np.testing.assert_array_equal(flat[-n:], trained_adapters.a_t.up.reshape(-1))


def test_fresh_adapter_is_identity():
    ad = init_adapters(4, 32, 0)
    x = np.random.default_rng(0).standard_normal((5, 32))
    assert np.array_equal(ad.a_i(x), x)


def test_identity_at_init_exact(frozen, dims):
    pipeline, core = frozen
    batch = make_batch(SAMPLES[:7], dims.vocab)
    act, _ = client_forward(batch, pipeline, init_adapters(8, dims.d_model, 0))
    assert act.values.shape == (7, 2 * dims.d_model)
    assert np.array_equal(act.values, frozen_pipeline_output(pipeline, batch))
    no_adapters = ClientModel(pipeline, AdapterParams(None, None)).forward(batch)
    assert np.array_equal(act.values, no_adapters.values)


def test_batch_shape(frozen, dims):
    act, _ = client_forward(make_batch(SAMPLES[:3], dims.vocab), frozen[0], init_adapters(4, dims.d_model, 0))
    assert act.batch_size == 3


def test_disabled_text_adapter_keeps_text_half(frozen, dims):
    pipeline, core = frozen
    ad = init_adapters(4, dims.d_model, 0, enable_text=False)
    batch = make_batch(SAMPLES[:16], dims.vocab)
    model = SplitModel(pipeline, core, ad)
    _, grad = model.loss_and_grad(batch, ad)
    stepped = ad.with_flat(ad.flatten() - 0.5 * grad)
    act = ClientModel(pipeline, ad).forward(batch, stepped)
    frozen_out = frozen_pipeline_output(pipeline, batch)
    d = dims.d_model
    assert np.array_equal(act.values[:, d:], frozen_out[:, d:])
    assert not np.allclose(act.values[:, :d], frozen_out[:, :d])
    assert grad.shape == (ad.a_i.n_params,)


def test_dim_mismatch(frozen):
    with pytest.raises(ValueError):
        ClientModel(frozen[0], init_adapters(4, 16, 0))


def test_uniform_loss_ln10(dims):
    pipeline, core = init_frozen(0, dims)
    zero_core = type(core)(*(np.zeros_like(a) for a in core.arrays()))
    act = BoundaryActivation(np.zeros((1, 2 * dims.d_model)), 0)
    loss, logits, _ = ServerModel(zero_core).forward_loss(act, np.array([3]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert np.all(logits == 0)


def test_duplicate_batch_same_loss(frozen, dims):
    pipeline, core = frozen
    act, _ = client_forward(make_batch(SAMPLES[:1], dims.vocab), pipeline, init_adapters(4, dims.d_model, 0))
    single, _, _ = server_forward_loss(act, np.array([SAMPLES[0].answer]), core)
    double = BoundaryActivation(np.vstack([act.values, act.values]), act.batch_id)
    pair, _, _ = server_forward_loss(double, np.array([SAMPLES[0].answer] * 2), core)
    assert pair == pytest.approx(single, abs=1e-15)


def test_label_out_of_range(frozen, dims):
    act = BoundaryActivation(np.zeros((1, 2 * dims.d_model)), 0)
    with pytest.raises(ValueError, match="label"):
        server_forward_loss(act, np.array([dims.n_answers]), frozen[1])


def test_boundary_gradient_finite_differences(frozen, dims):
    _, core = frozen
    server = ServerModel(core)
    act = np.random.default_rng(0).uniform(-1, 1, (1, 2 * dims.d_model))
    inputs = {"activation": act, "answers": np.array([2])}
    _, _, bgrad = server.forward_loss(BoundaryActivation(act, 0), inputs["answers"])
    fd = finite_difference_gradient(server.graph, inputs, server.loss_node, names=["activation"])
    assert bgrad.values.shape == act.shape
    assert relative_error(bgrad.values, fd["activation"]).max() < 1e-4


def test_server_leaves_core_untouched(frozen, dims):
    pipeline, core = frozen
    before = core.checksum()
    model = SplitModel(pipeline, core, init_adapters(4, dims.d_model, 0))
    ad = init_adapters(4, dims.d_model, 0)
    for _ in range(3):
        model.loss_and_grad(make_batch(SAMPLES[:8], dims.vocab), ad)
    assert core.checksum() == before and pipeline.checksum() == init_frozen(0, dims)[0].checksum()


def test_split_equals_stitched(frozen, dims, trained_adapters):
    pipeline, core = frozen
    split = SplitModel(pipeline, core, trained_adapters)
    stitched = StitchedModel(pipeline, core, trained_adapters)
    batch = make_batch(SAMPLES[:10], dims.vocab)
    l1, g1 = split.loss_and_grad(batch, trained_adapters)
    l2, g2 = stitched.loss_and_grad(batch, trained_adapters)
    assert abs(l1 - l2) <= 1e-12
    assert np.abs(g1 - g2).max() <= 1e-12


def test_zero_boundary_gradient_gives_zero(frozen, dims, trained_adapters):
    client = ClientModel(frozen[0], trained_adapters)
    act = client.forward(make_batch(SAMPLES[:4], dims.vocab))
    grad = client_backward(BoundaryGradient(np.zeros_like(act.values), act.batch_id), client)
    assert grad.shape == (trained_adapters.n_params,) and not grad.any()


def test_stale_cache_rejected(frozen, dims, trained_adapters):
    client = ClientModel(frozen[0], trained_adapters)
    first = client.forward(make_batch(SAMPLES[:4], dims.vocab))
    client.forward(make_batch(SAMPLES[4:8], dims.vocab))
    with pytest.raises(GraphError):
        client.backward(BoundaryGradient(np.zeros_like(first.values), first.batch_id))
    fresh = ClientModel(frozen[0], trained_adapters)
    with pytest.raises(GraphError):
        fresh.backward(BoundaryGradient(np.zeros_like(first.values), first.batch_id))


def test_activation_roundtrip(frozen, dims):
    act, _ = client_forward(make_batch(SAMPLES[:2], dims.vocab), frozen[0], init_adapters(2, dims.d_model, 0))
    again = BoundaryActivation.from_dict(act.to_dict())
    assert np.array_equal(again.values, act.values) and again.batch_id == act.batch_id


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient_check(frozen, dims, seed):
    pipeline, core = frozen
    ad = init_adapters(4, dims.d_model, seed)
    ad = ad.with_flat(ad.flatten() + np.random.default_rng(seed).standard_normal(ad.n_params))
    stitched = StitchedModel(pipeline, core, ad)
    batch = make_batch(SAMPLES[4 * seed : 4 * seed + 4], dims.vocab)
    _, analytic = stitched.loss_and_grad(batch, ad)
    numeric = finite_difference_gradient(stitched.graph, stitched.feed(batch), stitched.loss_node, h=1e-5)
    assert relative_error(analytic, ad.flatten_grads(numeric)).max() < 1e-4
