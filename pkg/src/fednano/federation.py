"""Round loop: broadcast, local SGD on the split model, upload, merge."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregation import RoundUpdate, fedavg_merge, fisher_merge, proximal_gradient
from .data import ClientDataset, Sample
from .fisher import EFAccumulator, FisherDiagonal, accumulate_fisher_ef, estimate_fisher_exact, finalize_fisher_ef
from .model import (
    AdapterParams,
    Batch,
    FrozenCore,
    FrozenPipeline,
    ModelDims,
    SplitModel,
    core_param_count,
    init_adapters,
    init_frozen,
    make_batch,
    pipeline_param_count,
)
from .rng import make_rng

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedprox", "fednano", "fednano_ef")


class ClientFailure(RuntimeError):
    def __init__(self, client_id: int, round_index: int, cause: BaseException):
        self.client_id = client_id
        self.round_index = round_index
        super().__init__(f"round {round_index}: client {client_id} failed: {cause!r}")


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 5
    rounds: int = 10
    local_steps: int | None = None  # None: one local epoch, ceil(|train| / batch_size)
    batch_size: int = 32
    rank: int = 8
    lr: float = 1.0
    momentum: float = 0.9
    strategy: str = "fednano"
    mu: float = 0.01
    alpha: float = 0.1
    enable_image: bool = True
    enable_text: bool = True
    seed: int = 0
    eval_every: int = 1
    fisher_eps: float = 1e-8
    dims: ModelDims = field(default_factory=ModelDims)

    def validate(self) -> None:
        errors = []
        for key in ("n_clients", "batch_size", "eval_every"):
            if getattr(self, key) < 1:
                errors.append(f"{key} must be >= 1")
        if self.rounds < 0:
            errors.append("rounds must be >= 0")
        if self.local_steps is not None and self.local_steps < 1:
            errors.append("local_steps must be >= 1")
        if not self.lr >= 0:
            errors.append("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must lie in [0, 1)")
        if self.strategy not in STRATEGIES:
            errors.append(f"strategy must be one of {STRATEGIES}")
        if self.mu < 0:
            errors.append("mu must be >= 0")
        if not self.alpha > 0:
            errors.append("alpha must be > 0")
        if not self.fisher_eps > 0:
            errors.append("fisher_eps must be > 0")
        if not (self.enable_image or self.enable_text):
            errors.append("at least one adapter must be enabled")
        if not 1 <= self.rank <= self.dims.d_model:
            errors.append(f"rank must lie in [1, d_model={self.dims.d_model}]")
        if errors:
            raise ValueError("invalid federation config: " + "; ".join(errors))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> bytes:
        """SHA-256 of the settings that fix the parameter trajectory (rounds and eval cadence excluded)."""
        d = self.to_dict()
        d.pop("rounds")
        d.pop("eval_every")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


@dataclass
class ClientRecord:
    client_id: int
    train_loss: float
    steps: int
    forward_passes: int
    backward_passes: int
    fisher_passes: int
    upload_params: int
    upload_bytes: int


@dataclass
class RoundRecord:
    round: int
    global_checksum: str
    clients: list[ClientRecord]
    test_accuracy: list[float] | None
    pipeline_checksum: str
    core_checksum: str

    @property
    def avg_accuracy(self) -> float | None:
        return None if self.test_accuracy is None else float(np.mean(self.test_accuracy))

    @property
    def upload_params(self) -> int:
        return sum(c.upload_params for c in self.clients)

    @property
    def passes(self) -> int:
        return sum(c.forward_passes + c.backward_passes for c in self.clients)


@dataclass
class RoundHistory:
    config: FederationConfig
    records: list[RoundRecord] = field(default_factory=list)
    initial_theta: np.ndarray | None = None
    final_theta: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final_accuracy(self) -> float | None:
        for rec in reversed(self.records):
            if rec.test_accuracy is not None:
                return rec.avg_accuracy
        return None


# -- wire format ------------------------------------------------------------

UPDATE_MAGIC = b"FNUP"
UPDATE_HEADER = struct.Struct("<4sHHIQQQI")  # magic, version, flags, client, n_samples, n_values, fisher count, reserved
WIRE_VERSION = 1


def encode_update(update: RoundUpdate) -> bytes:
    """Header (40 bytes) followed by theta and, when present, the Fisher diagonal as little-endian float64."""
    flags = 1 if update.fisher is not None else 0
    header = UPDATE_HEADER.pack(
        UPDATE_MAGIC,
        WIRE_VERSION,
        flags,
        update.client_id,
        update.n_samples,
        update.theta.shape[0],
        update.fisher.sample_count if update.fisher is not None else 0,
        0,
    )
    body = update.theta.astype("<f8").tobytes()
    if update.fisher is not None:
        body += update.fisher.values.astype("<f8").tobytes()
    return header + body


def decode_update(payload: bytes) -> RoundUpdate:
    if len(payload) < UPDATE_HEADER.size:
        raise ValueError("truncated update payload")
    magic, version, flags, client_id, n_samples, n_values, fisher_count, _ = UPDATE_HEADER.unpack_from(payload)
    if magic != UPDATE_MAGIC or version != WIRE_VERSION:
        raise ValueError("not a round-update payload")
    n_arrays = 2 if flags & 1 else 1
    expected = UPDATE_HEADER.size + 8 * n_values * n_arrays
    if len(payload) != expected:
        raise ValueError(f"payload length {len(payload)} != expected {expected}")
    values = np.frombuffer(payload, dtype="<f8", offset=UPDATE_HEADER.size).astype(np.float64)
    fisher = FisherDiagonal(values[n_values:], fisher_count) if flags & 1 else None
    return RoundUpdate(client_id, values[:n_values].copy(), n_samples, fisher)


def payload_value_count(payload: bytes) -> int:
    body = len(payload) - UPDATE_HEADER.size
    if body % 8:
        raise ValueError("payload body is not a whole number of float64 values")
    return body // 8


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"FNCK"
CKPT_HEADER = struct.Struct("<4sHHIII32sQ")  # magic, version, enable flags, round, d_model, rank, config hash, n_values
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, theta: np.ndarray, round_index: int, config: FederationConfig) -> None:
    flags = (1 if config.enable_image else 0) | (2 if config.enable_text else 0)
    header = CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, flags, round_index, config.dims.d_model, config.rank, config.config_hash(), theta.shape[0]
    )
    Path(path).write_bytes(header + np.asarray(theta, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, config: FederationConfig | None = None) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, flags, round_index, d_model, rank, chash, n_values = CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a checkpoint file")
    if len(raw) != CKPT_HEADER.size + 8 * n_values:
        raise ValueError(f"{path}: expected {n_values} values")
    if config is not None and chash != config.config_hash():
        raise ValueError(f"{path}: checkpoint was written under a different config")
    theta = np.frombuffer(raw, dtype="<f8", offset=CKPT_HEADER.size).astype(np.float64)
    return theta, round_index


# -- client side ------------------------------------------------------------


@dataclass
class ClientState:
    """A client's data, pre-stacked, and its private split model."""

    dataset: ClientDataset
    train: Batch
    test: Batch | None
    model: SplitModel

    @property
    def client_id(self) -> int:
        return self.dataset.client_id


@dataclass
class Federation:
    config: FederationConfig
    pipeline: FrozenPipeline
    core: FrozenCore
    layout: AdapterParams
    clients: list[ClientState]
    theta: np.ndarray
    round_index: int = 0


def local_steps_for(config: FederationConfig, n_train: int) -> int:
    if config.local_steps is not None:
        return config.local_steps
    return math.ceil(n_train / config.batch_size)


def local_train(
    theta_start: np.ndarray,
    state: ClientState,
    layout: AdapterParams,
    config: FederationConfig,
    round_index: int,
    steps: int,
    theta_anchor: np.ndarray | None = None,
    ef: EFAccumulator | None = None,
) -> tuple[np.ndarray, float, EFAccumulator | None]:
    """Minibatch SGD (optionally with momentum) for ``steps`` steps.

    Batches come from successive shuffles of the train split driven by a stream
    keyed on (seed, client, round).  ``theta_anchor`` switches on the proximal
    term; ``ef`` collects squared loss gradients.
    """
    rng = make_rng(config.seed, "client-batches", state.client_id, round_index)
    n = len(state.train)
    bs = min(config.batch_size, n)
    theta = theta_start.copy()
    velocity = np.zeros_like(theta)
    perm = rng.permutation(n)
    cursor = 0
    losses = []
    for _ in range(steps):
        if cursor + bs > n:
            perm = rng.permutation(n)
            cursor = 0
        idx = perm[cursor : cursor + bs]
        cursor += bs
        loss, grad = state.model.loss_and_grad(state.train.take(idx), layout.with_flat(theta))
        losses.append(loss)
        if ef is not None:
            ef = accumulate_fisher_ef(ef, grad, len(idx))
        if theta_anchor is not None:
            grad = grad + proximal_gradient(theta, theta_anchor, config.mu)
        if config.momentum:
            velocity = config.momentum * velocity + grad
            grad = velocity
        theta = theta - config.lr * grad
    return theta, float(np.mean(losses)) if losses else float("nan"), ef


def client_update(
    theta_global: np.ndarray,
    state: ClientState,
    layout: AdapterParams,
    config: FederationConfig,
    round_index: int,
) -> tuple[RoundUpdate, ClientRecord]:
    if theta_global.shape != (layout.n_params,):
        raise ValueError(f"global vector length {theta_global.shape[0]} != adapter layout {layout.n_params}")
    if len(state.train) == 0:
        raise ValueError(f"client {state.client_id} has an empty train split")
    model = state.model
    f0, b0 = model.forward_passes, model.backward_passes
    steps = local_steps_for(config, len(state.train))
    anchor = theta_global if config.strategy == "fedprox" else None
    ef = EFAccumulator.zeros(layout.n_params) if config.strategy == "fednano_ef" else None
    theta, loss, ef = local_train(theta_global, state, layout, config, round_index, steps, anchor, ef)
    train_f, train_b = model.forward_passes, model.backward_passes

    fisher = None
    if config.strategy == "fednano":
        fisher = estimate_fisher_exact(layout.with_flat(theta), state.dataset.train, model, config.dims.vocab)
    elif config.strategy == "fednano_ef":
        fisher = finalize_fisher_ef(ef)

    update = RoundUpdate(state.client_id, theta, len(state.dataset.train), fisher)
    payload = encode_update(update)
    record = ClientRecord(
        client_id=state.client_id,
        train_loss=loss,
        steps=steps,
        forward_passes=model.forward_passes - f0,
        backward_passes=model.backward_passes - b0,
        fisher_passes=model.forward_passes - train_f,
        upload_params=payload_value_count(payload),
        upload_bytes=len(payload),
    )
    # the server works from what was actually sent
    return decode_update(payload), record


# -- server side ------------------------------------------------------------


def build_federation(config: FederationConfig, datasets: list[ClientDataset]) -> Federation:
    config.validate()
    if len(datasets) != config.n_clients:
        raise ValueError(f"{len(datasets)} datasets for {config.n_clients} clients")
    pipeline, core = init_frozen(config.seed, config.dims)
    layout = init_adapters(config.rank, config.dims.d_model, config.seed, config.enable_image, config.enable_text)
    clients = []
    for ds in datasets:
        if not ds.train:
            raise ValueError(f"client {ds.client_id} has an empty train split")
        clients.append(
            ClientState(
                dataset=ds,
                train=make_batch(ds.train, config.dims.vocab),
                test=make_batch(ds.test, config.dims.vocab) if ds.test else None,
                model=SplitModel(pipeline, core, layout),
            )
        )
    return Federation(config, pipeline, core, layout, clients, layout.flatten())


def aggregate(updates: list[RoundUpdate], config: FederationConfig) -> np.ndarray:
    if config.strategy in ("fednano", "fednano_ef"):
        return fisher_merge(updates, config.fisher_eps)
    return fedavg_merge(updates)


def evaluate(fed: Federation, theta: np.ndarray) -> list[float]:
    adapters = fed.layout.with_flat(theta)
    out = []
    for c in fed.clients:
        out.append(c.model.accuracy(c.test, adapters) if c.test is not None else float("nan"))
    return out


def run_round(
    fed: Federation,
    order: list[int] | None = None,
    workers: int = 1,
) -> RoundRecord:
    """One synchronous round over all clients; any client error aborts it."""
    cfg = fed.config
    round_index = fed.round_index + 1
    order = list(range(len(fed.clients))) if order is None else list(order)
    if sorted(order) != list(range(len(fed.clients))):
        raise ValueError("order must be a permutation of client positions")
    broadcast = fed.theta.copy()

    def work(pos: int):
        state = fed.clients[pos]
        try:
            return client_update(broadcast, state, fed.layout, cfg, round_index)
        except Exception as exc:
            raise ClientFailure(state.client_id, round_index, exc) from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, order))
    else:
        results = [work(pos) for pos in order]

    updates = [u for u, _ in results]
    records = sorted((r for _, r in results), key=lambda r: r.client_id)
    new_theta = aggregate(updates, cfg)

    fed.theta = new_theta
    fed.round_index = round_index
    acc = None
    if round_index % cfg.eval_every == 0 or round_index == cfg.rounds:
        acc = evaluate(fed, new_theta)
    rec = RoundRecord(
        round=round_index,
        global_checksum=fed.layout.with_flat(new_theta).checksum(),
        clients=records,
        test_accuracy=acc,
        pipeline_checksum=fed.pipeline.checksum(),
        core_checksum=fed.core.checksum(),
    )
    log.debug("round %d strategy=%s avg_acc=%s", round_index, cfg.strategy, rec.avg_accuracy)
    return rec


def run_federation(
    config: FederationConfig,
    datasets: list[ClientDataset],
    order_seed: int | None = None,
    workers: int = 1,
    checkpoint: str | Path | None = None,
    resume: str | Path | None = None,
) -> RoundHistory:
    """Run ``config.rounds`` rounds from freshly initialised adapters (or a checkpoint).

    ``order_seed`` shuffles client execution order each round; results do not
    depend on it.
    """
    fed = build_federation(config, datasets)
    history = RoundHistory(config=config, initial_theta=fed.theta.copy())
    if resume is not None:
        fed.theta, fed.round_index = load_checkpoint(resume, config)
    order_rng = np.random.default_rng(order_seed) if order_seed is not None else None
    while fed.round_index < config.rounds:
        order = order_rng.permutation(len(fed.clients)).tolist() if order_rng is not None else None
        history.records.append(run_round(fed, order, workers))
        if checkpoint is not None:
            save_checkpoint(checkpoint, fed.theta, fed.round_index, config)
    history.final_theta = fed.theta.copy()
    return history


def train_centralized(config: FederationConfig, train: list[Sample], steps: int) -> np.ndarray:
    """Plain SGD on one pooled dataset with the same stream as client 0, round 1."""
    config.validate()
    pipeline, core = init_frozen(config.seed, config.dims)
    layout = init_adapters(config.rank, config.dims.d_model, config.seed, config.enable_image, config.enable_text)
    state = ClientState(
        dataset=ClientDataset(0, train=list(train)),
        train=make_batch(list(train), config.dims.vocab),
        test=None,
        model=SplitModel(pipeline, core, layout),
    )
    theta, _, _ = local_train(layout.flatten(), state, layout, replace(config, strategy="fedavg"), 1, steps)
    return theta


# -- accounting ---------------------------------------------------------------


def communication_report(config: FederationConfig, dims: ModelDims | None = None) -> dict:
    """Parameter placement and per-round upload sizes, cross-checked by enumeration."""
    dims = dims or config.dims
    n_adapters = int(config.enable_image) + int(config.enable_text)
    adapter = n_adapters * 2 * config.rank * dims.d_model
    pipeline = pipeline_param_count(dims)
    core = core_param_count(dims)

    pipe_w, core_w = init_frozen(config.seed, dims)
    layout = init_adapters(config.rank, dims.d_model, config.seed, config.enable_image, config.enable_text)
    brute = {
        "adapter": sum(a.size for _, a in layout.named_arrays()),
        "pipeline": sum(a.size for a in pipe_w.arrays()),
        "core": sum(a.size for a in core_w.arrays()),
    }
    closed = {"adapter": adapter, "pipeline": pipeline, "core": core}
    if brute != closed:
        raise AssertionError(f"parameter enumeration {brute} disagrees with closed form {closed}")

    total = pipeline + adapter + core
    client_held = pipeline + adapter
    return {
        "upload_params_per_client_round": adapter,
        "fisher_params_per_client_round": adapter,
        "upload_with_fisher_per_client_round": 2 * adapter,
        "client_held_params": client_held,
        "server_held_params": core,
        "total_params": total,
        "upload_fraction": adapter / total,
        "upload_with_fisher_fraction": 2 * adapter / total,
        "client_held_fraction": client_held / total,
        "enumerated": brute,
    }
