"""Synthetic image-question-answer task, Dirichlet partitioning and splits."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng

# Each skill owns this many keyword tokens at the start of the vocabulary.
KEYWORDS_PER_SKILL = 2
# Number of positions in a question filled with skill keywords; the rest is filler.
KEYWORD_SLOTS = 3


@dataclass(frozen=True)
class TaskSpec:
    n_categories: int = 10
    n_skills: int = 5
    n_samples: int = 10000
    d_img: int = 16
    vocab: int = 32
    seq_len: int = 8
    n_answers: int = 10
    noise_sigma: float = 0.5
    label_noise: float = 0.05

    def validate(self) -> None:
        errors = []
        for key in ("n_categories", "n_skills", "n_samples", "d_img", "n_answers"):
            if getattr(self, key) < 1:
                errors.append(f"{key} must be >= 1")
        if self.seq_len < KEYWORD_SLOTS:
            errors.append(f"seq_len must be >= {KEYWORD_SLOTS}")
        if self.vocab <= self.n_skills * KEYWORDS_PER_SKILL:
            errors.append(f"vocab must exceed n_skills * {KEYWORDS_PER_SKILL} to leave filler tokens")
        if self.noise_sigma < 0:
            errors.append("noise_sigma must be >= 0")
        if not 0 <= self.label_noise <= 1:
            errors.append("label_noise must lie in [0, 1]")
        if errors:
            raise ValueError("invalid task spec: " + "; ".join(errors))


@dataclass
class Sample:
    id: int
    image: np.ndarray
    tokens: np.ndarray
    answer: int
    category: int
    skill: int = -1


@dataclass
class ClientDataset:
    client_id: int
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


def generate_synthetic_task(spec: TaskSpec, seed: int) -> list[Sample]:
    """Draw ``spec.n_samples`` samples.

    Categories are balanced (counts differ by at most one).  The image is a noisy copy of a per-category mean vector, the question mixes
    keyword tokens of one skill with filler tokens, and the answer is read from
    a seeded (category, skill) table with ``label_noise`` random relabelling.
    """
    spec.validate()
    table_rng = make_rng(seed, "task-structure")
    means = table_rng.standard_normal((spec.n_categories, spec.d_img))
    answer_table = table_rng.integers(0, spec.n_answers, size=(spec.n_categories, spec.n_skills))

    rng = make_rng(seed, "task-samples")
    n = spec.n_samples
    # balanced categories, shuffled
    categories = rng.permutation(np.arange(n) % spec.n_categories)
    skills = rng.integers(0, spec.n_skills, size=n)
    noise = rng.standard_normal((n, spec.d_img))
    n_keyword = spec.n_skills * KEYWORDS_PER_SKILL
    keyword_pick = rng.integers(0, KEYWORDS_PER_SKILL, size=(n, KEYWORD_SLOTS))
    filler = rng.integers(n_keyword, spec.vocab, size=(n, spec.seq_len - KEYWORD_SLOTS))
    flip = rng.random(n) < spec.label_noise
    random_answers = rng.integers(0, spec.n_answers, size=n)
    order = np.argsort(rng.random((n, spec.seq_len)), axis=1)

    samples = []
    for i in range(n):
        c, s = int(categories[i]), int(skills[i])
        keywords = s * KEYWORDS_PER_SKILL + keyword_pick[i]
        tokens = np.concatenate([keywords, filler[i]])[order[i]].astype(np.int64)
        answer = int(random_answers[i]) if flip[i] else int(answer_table[c, s])
        samples.append(
            Sample(
                id=i,
                image=means[c] + spec.noise_sigma * noise[i],
                tokens=tokens,
                answer=answer,
                category=c,
                skill=s,
            )
        )
    return samples


def dirichlet_partition(
    samples: list[Sample], n_clients: int, alpha: float, seed: int
) -> list[list[Sample]]:
    """Label-skew split: for each category draw client shares from Dir(alpha)."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    rng = make_rng(seed, "partition")
    by_category: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_category.setdefault(s.category, []).append(idx)

    assigned: list[list[int]] = [[] for _ in range(n_clients)]
    for c in sorted(by_category):
        idxs = np.array(by_category[c])
        shares = rng.dirichlet(np.full(n_clients, alpha))
        if not np.all(np.isfinite(shares)) or shares.sum() <= 0:
            # float underflow at tiny alpha; put the whole category on one client
            shares = np.zeros(n_clients)
            shares[rng.integers(n_clients)] = 1.0
        counts = rng.multinomial(len(idxs), shares / shares.sum())
        perm = rng.permutation(idxs)
        start = 0
        for k, cnt in enumerate(counts):
            assigned[k].extend(perm[start : start + cnt].tolist())
            start += cnt

    for k in range(n_clients):
        if not assigned[k]:
            donor = max(range(n_clients), key=lambda j: (len(assigned[j]), -j))
            if len(assigned[donor]) < 2:
                raise ValueError("not enough samples to give every client one")
            assigned[k].append(assigned[donor].pop())

    return [[samples[i] for i in sorted(part)] for part in assigned]


def category_distribution(samples: list[Sample], n_categories: int) -> np.ndarray:
    counts = np.bincount([s.category for s in samples], minlength=n_categories).astype(float)
    return counts / max(counts.sum(), 1.0)


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def partition_heterogeneity(parts: list[list[Sample]], n_categories: int) -> float:
    """Mean over clients of the TV distance between client and pooled category mix."""
    pooled = category_distribution([s for p in parts for s in p], n_categories)
    return float(np.mean([tv_distance(category_distribution(p, n_categories), pooled) for p in parts]))


def split_train_val_test(
    samples: list[Sample],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    client_id: int = 0,
) -> ClientDataset:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(samples)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    if n >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = n - n_val - n_test
    perm = make_rng(seed, "split", client_id).permutation(n)
    picked = [samples[i] for i in perm]
    return ClientDataset(
        client_id=client_id,
        train=picked[:n_train],
        val=picked[n_train : n_train + n_val],
        test=picked[n_train + n_val :],
    )


def build_client_datasets(
    spec: TaskSpec,
    n_clients: int,
    alpha: float,
    seed: int,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> list[ClientDataset]:
    samples = generate_synthetic_task(spec, seed)
    parts = dirichlet_partition(samples, n_clients, alpha, seed)
    return [split_train_val_test(p, ratios, seed, client_id=k) for k, p in enumerate(parts)]


# -- record file ------------------------------------------------------------


def _record(client_id: int, split: str, s: Sample) -> dict:
    return {
        "client": client_id,
        "split": split,
        "id": s.id,
        "category": s.category,
        "skill": s.skill,
        "answer": s.answer,
        "tokens": [int(t) for t in s.tokens],
        "features": [repr(float(v)) for v in s.image],
    }


def export_datasets(datasets: list[ClientDataset], path: str | Path) -> None:
    """Write one JSON object per line; feature values are decimal strings (``repr``)."""
    with open(path, "w", encoding="utf-8") as fh:
        for ds in datasets:
            for split in ("train", "val", "test"):
                for s in getattr(ds, split):
                    fh.write(json.dumps(_record(ds.client_id, split, s), sort_keys=True) + "\n")


def import_datasets(path: str | Path) -> list[ClientDataset]:
    clients: dict[int, ClientDataset] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sample = Sample(
                    id=int(rec["id"]),
                    image=np.array([float(v) for v in rec["features"]], dtype=np.float64),
                    tokens=np.array(rec["tokens"], dtype=np.int64),
                    answer=int(rec["answer"]),
                    category=int(rec["category"]),
                    skill=int(rec.get("skill", -1)),
                )
                split = rec["split"]
                if split not in ("train", "val", "test"):
                    raise ValueError(f"unknown split {split!r}")
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
            ds = clients.setdefault(int(rec["client"]), ClientDataset(client_id=int(rec["client"])))
            getattr(ds, split).append(sample)
    return [clients[k] for k in sorted(clients)]


def task_spec_dict(spec: TaskSpec) -> dict:
    return asdict(spec)
