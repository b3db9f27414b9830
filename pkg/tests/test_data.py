import hashlib
from collections import Counter

import numpy as np
import pytest

from fednano.data import (
    TaskSpec,
    category_distribution,
    dirichlet_partition,
    export_datasets,
    generate_synthetic_task,
    import_datasets,
    partition_heterogeneity,
    split_train_val_test,
    tv_distance,
    build_client_datasets,
)

DEFAULT = TaskSpec()
# Per-client TV distance to the pooled category mix at alpha=100, K=5, seed 0,
# computed directly from the partition's category counts.
ALPHA100_TV_SEED0 = [0.05410086602139582, 0.046966731898238745, 0.03804878048780488, 0.02971311475409836, 0.02340532395781015]


def digest(samples):
    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.tobytes() + s.tokens.tobytes() + bytes([s.answer, s.category]))
    return h.hexdigest()


@pytest.fixture(scope="module")
def default_samples():
    return generate_synthetic_task(DEFAULT, 0)


def test_deterministic():
    spec = TaskSpec(n_samples=300)
    assert digest(generate_synthetic_task(spec, 5)) == digest(generate_synthetic_task(spec, 5))
    assert digest(generate_synthetic_task(spec, 5)) != digest(generate_synthetic_task(spec, 6))


def test_sample_invariants(default_samples):
    for s in default_samples[:500]:
        assert s.tokens.shape == (DEFAULT.seq_len,) and s.tokens.max() < DEFAULT.vocab
        assert 0 <= s.answer < DEFAULT.n_answers and 0 <= s.category < DEFAULT.n_categories


def test_category_counts_within_five_percent(default_samples):
    counts = Counter(s.category for s in default_samples)
    target = DEFAULT.n_samples / DEFAULT.n_categories
    assert all(abs(counts[c] - target) <= 0.05 * target for c in range(DEFAULT.n_categories))


def test_noiseless_task_is_a_lookup():
    spec = TaskSpec(n_samples=2000, noise_sigma=0.0, label_noise=0.0)
    samples = generate_synthetic_task(spec, 1)
    # least-squares linear probe on one-hot (category, skill) features
    feats = np.zeros((len(samples), spec.n_categories * spec.n_skills))
    feats[np.arange(len(samples)), [s.category * spec.n_skills + s.skill for s in samples]] = 1.0
    targets = np.eye(spec.n_answers)[[s.answer for s in samples]]
    w, *_ = np.linalg.lstsq(feats, targets, rcond=None)
    assert np.mean((feats @ w).argmax(axis=1) == [s.answer for s in samples]) == 1.0
    # and the image alone identifies the category
    assert all(np.array_equal(s.image, samples[0].image) for s in samples if s.category == samples[0].category)


@pytest.mark.parametrize("field,value", [("n_samples", 0), ("noise_sigma", -1.0), ("vocab", 5), ("label_noise", 2.0)])
def test_invalid_spec(field, value):
    with pytest.raises(ValueError):
        generate_synthetic_task(TaskSpec(**{field: value}), 0)


def test_single_client_gets_everything():
    samples = generate_synthetic_task(TaskSpec(n_samples=200), 0)
    (only,) = dirichlet_partition(samples, 1, 0.3, 0)
    assert sorted(s.id for s in only) == list(range(200))


@pytest.mark.parametrize("k,alpha,seed", [(2, 0.1, 0), (5, 1.0, 3), (7, 0.05, 9), (10, 100.0, 1)])
def test_partition_complete(k, alpha, seed):
    samples = generate_synthetic_task(TaskSpec(n_samples=500), seed)
    parts = dirichlet_partition(samples, k, alpha, seed)
    assert sum(len(p) for p in parts) == 500
    assert sorted(s.id for p in parts for s in p) == list(range(500))
    assert all(p for p in parts)


def test_partition_rejects_bad_alpha():
    with pytest.raises(ValueError):
        dirichlet_partition([], 3, 0.0, 0)


def test_partition_deterministic():
    samples = generate_synthetic_task(TaskSpec(n_samples=300), 0)
    a = dirichlet_partition(samples, 4, 0.5, 2)
    b = dirichlet_partition(samples, 4, 0.5, 2)
    assert [[s.id for s in p] for p in a] == [[s.id for s in p] for p in b]


def test_alpha100_tv_at_default_seed(default_samples):
    parts = dirichlet_partition(default_samples, 5, 100.0, 0)
    pooled = category_distribution(default_samples, DEFAULT.n_categories)
    tv = [tv_distance(category_distribution(p, DEFAULT.n_categories), pooled) for p in parts]
    np.testing.assert_allclose(tv, ALPHA100_TV_SEED0, rtol=0, atol=1e-12)
    assert np.mean(tv) < 0.05


@pytest.mark.xfail(strict=True, reason="client 0 sits at TV 0.0541 at the default seed; bound is seed luck")
def test_alpha100_every_client_within_005(default_samples):
    parts = dirichlet_partition(default_samples, 5, 100.0, 0)
    pooled = category_distribution(default_samples, DEFAULT.n_categories)
    assert all(tv_distance(category_distribution(p, DEFAULT.n_categories), pooled) <= 0.05 for p in parts)


@pytest.mark.parametrize("seed", range(3))
def test_heterogeneity_monotone_in_alpha(seed):
    samples = generate_synthetic_task(DEFAULT, seed)
    skewed = partition_heterogeneity(dirichlet_partition(samples, 5, 0.1, seed), DEFAULT.n_categories)
    mild = partition_heterogeneity(dirichlet_partition(samples, 5, 5.0, seed), DEFAULT.n_categories)
    assert skewed > mild


def test_split_sizes_and_disjoint():
    samples = generate_synthetic_task(TaskSpec(n_samples=100), 0)
    ds = split_train_val_test(samples, (0.8, 0.1, 0.1), seed=4)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (80, 10, 10)
    ids = [s.id for s in ds.train] + [s.id for s in ds.val] + [s.id for s in ds.test]
    assert len(set(ids)) == 100
    again = split_train_val_test(samples, (0.8, 0.1, 0.1), seed=4)
    assert [s.id for s in again.test] == [s.id for s in ds.test]


def test_split_small_client_keeps_every_split():
    samples = generate_synthetic_task(TaskSpec(n_samples=4), 0)
    ds = split_train_val_test(samples)
    assert ds.train and ds.val and ds.test


@pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.8, 0.2)])
def test_split_bad_ratios(ratios):
    with pytest.raises(ValueError):
        split_train_val_test([], ratios)


def test_record_file_roundtrip(tmp_path):
    datasets = build_client_datasets(TaskSpec(n_samples=120), 3, 1.0, 0)
    path = tmp_path / "d.jsonl"
    export_datasets(datasets, path)
    back = import_datasets(path)
    assert [d.client_id for d in back] == [0, 1, 2]
    for a, b in zip(datasets, back):
        for split in ("train", "val", "test"):
            sa, sb = getattr(a, split), getattr(b, split)
            assert [s.id for s in sa] == [s.id for s in sb]
            assert all(np.array_equal(x.image, y.image) and np.array_equal(x.tokens, y.tokens) for x, y in zip(sa, sb))


def test_record_file_malformed(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"client": 0, "split": "train"}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        import_datasets(path)
