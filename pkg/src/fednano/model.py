"""Split multimodal model: frozen client pipeline + NanoAdapters | frozen server core.

Client side, per sample::

    img = tanh(v @ W_img + b_img)            # image encoder
    txt = bow(q) @ E                          # token embedding, mean pooled
    h_img = img @ W_conn + b_conn             # shared connector
    h_txt = txt @ W_conn + b_conn
    a = [A_I(h_img), A_T(h_txt)]              # boundary activation, 2 * d_model

with ``A(h) = h + scale * (h @ down) @ up``.  The server runs
``relu(a @ W1 + b1) @ W2 + b2`` and a softmax cross-entropy loss, then returns
``d loss / d a`` to the client.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import Sample
from .rng import checksum, make_rng
from .tensor import Graph, GraphError

ADAPTER_SLOTS = ("a_i", "a_t")


@dataclass(frozen=True)
class ModelDims:
    d_img: int = 16
    d_emb: int = 16
    d_model: int = 32
    d_hidden: int = 64
    n_answers: int = 10
    vocab: int = 32

    def validate(self) -> None:
        bad = [k for k, v in self.__dict__.items() if v < 1]
        if bad:
            raise ValueError(f"dims must be positive: {', '.join(bad)}")


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class FrozenPipeline:
    img_w: np.ndarray
    img_b: np.ndarray
    embed: np.ndarray
    conn_w: np.ndarray
    conn_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.img_w, self.img_b, self.embed, self.conn_w, self.conn_b]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def checksum(self) -> str:
        return checksum(*self.arrays())


@dataclass(frozen=True)
class FrozenCore:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    @property
    def n_answers(self) -> int:
        return self.w2.shape[1]

    def checksum(self) -> str:
        return checksum(*self.arrays())


def pipeline_param_count(dims: ModelDims) -> int:
    return (
        dims.d_img * dims.d_emb
        + dims.d_emb
        + dims.vocab * dims.d_emb
        + dims.d_emb * dims.d_model
        + dims.d_model
    )


def core_param_count(dims: ModelDims) -> int:
    return 2 * dims.d_model * dims.d_hidden + dims.d_hidden + dims.d_hidden * dims.n_answers + dims.n_answers


def init_frozen(seed: int, dims: ModelDims) -> tuple[FrozenPipeline, FrozenCore]:
    """Seeded uniform(+-1/sqrt(fan_in)) weights.  The embedding table is treated
    as a dense map from a one-hot token, so its fan-in is the vocabulary size."""
    dims.validate()
    rng = make_rng(seed, "frozen-pipeline")
    pipeline = FrozenPipeline(
        img_w=_uniform(rng, dims.d_img, (dims.d_img, dims.d_emb)),
        img_b=_uniform(rng, dims.d_img, (dims.d_emb,)),
        embed=_uniform(rng, dims.vocab, (dims.vocab, dims.d_emb)),
        conn_w=_uniform(rng, dims.d_emb, (dims.d_emb, dims.d_model)),
        conn_b=_uniform(rng, dims.d_emb, (dims.d_model,)),
    )
    rng = make_rng(seed, "frozen-core")
    d_in = 2 * dims.d_model
    core = FrozenCore(
        w1=_uniform(rng, d_in, (d_in, dims.d_hidden)),
        b1=_uniform(rng, d_in, (dims.d_hidden,)),
        w2=_uniform(rng, dims.d_hidden, (dims.d_hidden, dims.n_answers)),
        b2=_uniform(rng, dims.d_hidden, (dims.n_answers,)),
    )
    for a in pipeline.arrays() + core.arrays():
        a.flags.writeable = False
    return pipeline, core


# -- adapters -----------------------------------------------------------------


@dataclass
class NanoAdapter:
    down: np.ndarray  # d_model x r
    up: np.ndarray  # r x d_model
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    @property
    def n_params(self) -> int:
        return self.down.size + self.up.size

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x + self.scale * (x @ self.down) @ self.up


@dataclass
class AdapterParams:
    """Image adapter ``a_i`` and text adapter ``a_t``; ``None`` means disabled.

    Flattening order: a_i.down, a_i.up, a_t.down, a_t.up, each row-major,
    skipping disabled adapters.
    """

    a_i: NanoAdapter | None
    a_t: NanoAdapter | None

    @property
    def enabled(self) -> tuple[bool, bool]:
        return (self.a_i is not None, self.a_t is not None)

    def slots(self):
        for name in ADAPTER_SLOTS:
            adapter = getattr(self, name)
            if adapter is not None:
                yield name, adapter

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, adapter in self.slots():
            out.append((f"{name}.down", adapter.down))
            out.append((f"{name}.up", adapter.up))
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.named_arrays())

    def flatten(self) -> np.ndarray:
        arrays = [a.reshape(-1) for _, a in self.named_arrays()]
        if not arrays:
            return np.zeros(0)
        return np.concatenate(arrays).astype(np.float64)

    def with_flat(self, vec: np.ndarray) -> AdapterParams:
        """Copy of self with values taken from ``vec`` (the inverse of flatten)."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({self.n_params},)")
        offset = 0
        built = {}
        for name, adapter in self.slots():
            parts = []
            for arr in (adapter.down, adapter.up):
                parts.append(vec[offset : offset + arr.size].reshape(arr.shape).copy())
                offset += arr.size
            built[name] = NanoAdapter(parts[0], parts[1], adapter.scale)
        return AdapterParams(a_i=built.get("a_i"), a_t=built.get("a_t"))

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        parts = [np.asarray(grads[name], dtype=np.float64).reshape(-1) for name, _ in self.named_arrays()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def checksum(self) -> str:
        return checksum(self.flatten())


def init_adapters(
    rank: int,
    d_model: int,
    seed: int,
    enable_image: bool = True,
    enable_text: bool = True,
) -> AdapterParams:
    """Random down-projections, zero up-projections: a fresh adapter is the identity."""
    if not 1 <= rank <= d_model:
        raise ValueError(f"rank must lie in [1, d_model={d_model}], got {rank}")
    rng = make_rng(seed, "adapters")
    built = {}
    for name, enabled in zip(ADAPTER_SLOTS, (enable_image, enable_text)):
        down = _uniform(rng, d_model, (d_model, rank))
        if enabled:
            built[name] = NanoAdapter(down=down, up=np.zeros((rank, d_model)), scale=1.0)
    return AdapterParams(a_i=built.get("a_i"), a_t=built.get("a_t"))


# -- batches & boundary -------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray  # B x d_img
    bow: np.ndarray  # B x vocab, rows sum to 1 (mean pooling weights)
    answers: np.ndarray  # B

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, idx) -> Batch:
        return Batch(self.images[idx], self.bow[idx], self.answers[idx])


def make_batch(samples: list[Sample], vocab: int) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    images = np.stack([s.image for s in samples]).astype(np.float64)
    tokens = np.stack([s.tokens for s in samples])
    if tokens.max() >= vocab or tokens.min() < 0:
        raise ValueError(f"token id outside [0, {vocab})")
    bow = np.zeros((len(samples), vocab))
    rows = np.repeat(np.arange(len(samples)), tokens.shape[1])
    np.add.at(bow, (rows, tokens.reshape(-1)), 1.0 / tokens.shape[1])
    answers = np.array([s.answer for s in samples], dtype=np.int64)
    return Batch(images, bow, answers)


@dataclass
class BoundaryActivation:
    """Adapted [image | text] vectors for one batch.  Holds no raw inputs."""

    values: np.ndarray  # B x 2*d_model
    batch_id: int

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    def to_dict(self) -> dict:
        return {"batch_id": self.batch_id, "shape": list(self.values.shape), "values": self.values.reshape(-1).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> BoundaryActivation:
        return cls(np.array(d["values"], dtype=np.float64).reshape(d["shape"]), int(d["batch_id"]))


@dataclass
class BoundaryGradient:
    values: np.ndarray
    batch_id: int


def _pipeline_nodes(g: Graph, pipeline: FrozenPipeline, adapters: AdapterParams) -> int:
    x = g.input("images")
    bow = g.input("bow")
    img = g.tanh(g.add(g.matmul(x, g.param("img_w", pipeline.img_w, False)), g.param("img_b", pipeline.img_b, False)))
    txt = g.matmul(bow, g.param("embed", pipeline.embed, False))
    conn_w = g.param("conn_w", pipeline.conn_w, False)
    conn_b = g.param("conn_b", pipeline.conn_b, False)
    paths = []
    for name, emb in zip(ADAPTER_SLOTS, (img, txt)):
        h = g.add(g.matmul(emb, conn_w), conn_b)
        adapter = getattr(adapters, name)
        if adapter is not None:
            low = g.matmul(g.matmul(h, g.param(f"{name}.down", adapter.down)), g.param(f"{name}.up", adapter.up))
            h = g.add(h, g.scale(low, adapter.scale))
        paths.append(h)
    return g.concat(*paths)


def _core_nodes(g: Graph, act: int, core: FrozenCore, loss_scale: float) -> tuple[int, int]:
    labels = g.input("answers", dtype=np.int64)
    hidden = g.relu(g.add(g.matmul(act, g.param("w1", core.w1, False)), g.param("b1", core.b1, False)))
    logits = g.add(g.matmul(hidden, g.param("w2", core.w2, False)), g.param("b2", core.b2, False))
    loss = g.mean(g.softmax_xent(logits, labels))
    if loss_scale != 1.0:
        loss = g.scale(loss, loss_scale)
    return logits, loss


class ClientModel:
    """Client half: frozen pipeline plus adapters, caching the last forward."""

    _batch_counter = itertools.count()

    def __init__(self, pipeline: FrozenPipeline, adapters: AdapterParams):
        if pipeline.conn_w.shape[1] != next((a.down.shape[0] for _, a in adapters.slots()), pipeline.conn_w.shape[1]):
            raise ValueError("adapter d_model does not match the pipeline connector")
        self.pipeline = pipeline
        self.layout = adapters
        self.graph = Graph()
        self.act_node = _pipeline_nodes(self.graph, pipeline, adapters)
        self._cached_batch: int | None = None

    def load(self, adapters: AdapterParams) -> None:
        if adapters.enabled != self.layout.enabled:
            raise ValueError("adapter enable flags differ from the model layout")
        for name, arr in adapters.named_arrays():
            self.graph.set_param(name, arr)
        self._cached_batch = None

    def forward(self, batch: Batch, adapters: AdapterParams | None = None) -> BoundaryActivation:
        if len(batch) == 0:
            raise ValueError("empty batch")
        if adapters is not None:
            self.load(adapters)
        self.graph.forward({"images": batch.images, "bow": batch.bow})
        self._cached_batch = next(self._batch_counter)
        return BoundaryActivation(self.graph.value(self.act_node).copy(), self._cached_batch)

    def backward(self, grad: BoundaryGradient) -> np.ndarray:
        """Flat adapter gradient (layout order) given the server's boundary gradient."""
        if self._cached_batch is None or grad.batch_id != self._cached_batch:
            raise GraphError(f"no cached forward for batch {grad.batch_id}")
        grads = self.graph.backward(self.act_node, grad.values)
        self._cached_batch = None
        return self.layout.flatten_grads(grads)


class ServerModel:
    """Server half: frozen core and loss; never updates its weights."""

    def __init__(self, core: FrozenCore, loss_scale: float = 1.0):
        self.core = core
        self.graph = Graph()
        self.act_node = self.graph.input("activation", requires_grad=True)
        self.logits_node, self.loss_node = _core_nodes(self.graph, self.act_node, core, loss_scale)

    def forward_loss(
        self, activation: BoundaryActivation, answers: np.ndarray
    ) -> tuple[float, np.ndarray, BoundaryGradient]:
        answers = np.asarray(answers, dtype=np.int64)
        if answers.shape != (activation.batch_size,):
            raise ValueError(f"{answers.shape[0]} labels for a batch of {activation.batch_size}")
        if answers.min() < 0 or answers.max() >= self.core.n_answers:
            raise ValueError(f"label outside [0, {self.core.n_answers})")
        self.graph.forward({"activation": activation.values, "answers": answers})
        grads = self.graph.backward(self.loss_node)
        loss = float(self.graph.value(self.loss_node))
        logits = self.graph.value(self.logits_node).copy()
        return loss, logits, BoundaryGradient(grads["activation"], activation.batch_id)

    def logits(self, activation: BoundaryActivation) -> np.ndarray:
        dummy = np.zeros(activation.batch_size, dtype=np.int64)
        self.graph.forward({"activation": activation.values, "answers": dummy})
        return self.graph.value(self.logits_node).copy()


def client_forward(batch: Batch, pipeline: FrozenPipeline, adapters: AdapterParams) -> tuple[BoundaryActivation, ClientModel]:
    model = ClientModel(pipeline, adapters)
    return model.forward(batch), model


def server_forward_loss(activation: BoundaryActivation, answers: np.ndarray, core: FrozenCore):
    return ServerModel(core).forward_loss(activation, answers)


def client_backward(grad: BoundaryGradient, client: ClientModel) -> np.ndarray:
    return client.backward(grad)


class SplitModel:
    """Client and server halves wired together, with pass counters.

    One training pass = client forward, server forward+backward, client backward.
    """

    def __init__(self, pipeline: FrozenPipeline, core: FrozenCore, adapters: AdapterParams, loss_scale: float = 1.0):
        self.client = ClientModel(pipeline, adapters)
        self.server = ServerModel(core, loss_scale)
        self.forward_passes = 0
        self.backward_passes = 0
        self.eval_passes = 0

    def loss_and_grad(self, batch: Batch, adapters: AdapterParams) -> tuple[float, np.ndarray]:
        act = self.client.forward(batch, adapters)
        loss, _, bgrad = self.server.forward_loss(act, batch.answers)
        self.forward_passes += 1
        grad = self.client.backward(bgrad)
        self.backward_passes += 1
        return loss, grad

    def predict(self, batch: Batch, adapters: AdapterParams) -> np.ndarray:
        act = self.client.forward(batch, adapters)
        self.eval_passes += 1
        return self.server.logits(act)

    def accuracy(self, batch: Batch, adapters: AdapterParams) -> float:
        return float(np.mean(self.predict(batch, adapters).argmax(axis=1) == batch.answers))


class StitchedModel:
    """The same composition as one graph, used to cross-check the split path."""

    def __init__(self, pipeline: FrozenPipeline, core: FrozenCore, adapters: AdapterParams, loss_scale: float = 1.0):
        self.layout = adapters
        self.graph = Graph()
        act = _pipeline_nodes(self.graph, pipeline, adapters)
        self.logits_node, self.loss_node = _core_nodes(self.graph, act, core, loss_scale)

    def feed(self, batch: Batch) -> dict[str, np.ndarray]:
        return {"images": batch.images, "bow": batch.bow, "answers": batch.answers}

    def loss_and_grad(self, batch: Batch, adapters: AdapterParams) -> tuple[float, np.ndarray]:
        for name, arr in adapters.named_arrays():
            self.graph.set_param(name, arr)
        self.graph.forward(self.feed(batch))
        grads = self.graph.backward(self.loss_node)
        return float(self.graph.value(self.loss_node)), self.layout.flatten_grads(grads)

    def logits(self, batch: Batch, adapters: AdapterParams) -> np.ndarray:
        for name, arr in adapters.named_arrays():
            self.graph.set_param(name, arr)
        self.graph.forward(self.feed(batch))
        return self.graph.value(self.logits_node).copy()
