"""One-hot trace encoding and the denoising autoencoder built on :mod:`nspad.tensorgrad`."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np

from .eventlog import EventLog, Trace, Vocabulary, build_vocab, max_trace_length
from .seeding import substream
from .tensorgrad import Graph, Node, NonFiniteError, ShapeError


class LengthError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


# ---------------------------------------------------------------------------
# encoding


def encode_trace(trace: Trace, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """Flattened ``max_len x (|A| + |R|)`` one-hot matrix; positions past the trace are PAD."""
    if len(trace) > max_len:
        raise LengthError(f"trace {trace.case_id!r} has {len(trace)} events > max_len={max_len}")
    n_act, n_res = vocab.n_activities, vocab.n_resources
    width = n_act + n_res
    mat = np.zeros((max_len, width))
    for i, e in enumerate(trace.events):
        mat[i, vocab.activity_index(e.activity)] = 1.0
        mat[i, n_act + vocab.resource_index(e.resource)] = 1.0
    mat[len(trace):, 0] = 1.0
    mat[len(trace):, n_act] = 1.0
    return mat.reshape(-1)


def encode_log(log: EventLog | Sequence[Trace], vocab: Vocabulary, max_len: int) -> np.ndarray:
    traces = list(log)
    if not traces:
        return np.zeros((0, max_len * (vocab.n_activities + vocab.n_resources)))
    return np.stack([encode_trace(t, vocab, max_len) for t in traces])


def decode_output(enc: np.ndarray, vocab: Vocabulary, max_len: int) -> list[str]:
    """Argmax activity per position, stopping at the first PAD."""
    mat = np.asarray(enc).reshape(max_len, vocab.n_activities + vocab.n_resources)
    labels = []
    for idx in mat[:, : vocab.n_activities].argmax(axis=1):
        if idx == 0:
            break
        labels.append(vocab.activities[idx])
    return labels


def corrupt(enc: np.ndarray, noise_rate: float, rng: np.random.Generator, vocab: Vocabulary) -> np.ndarray:
    """Replace each non-PAD activity one-hot, with probability ``noise_rate``, by a random non-PAD activity.

    Works on one encoding ``(D,)`` or a batch ``(N, D)``; resource blocks are left alone.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError(f"noise_rate must be in [0, 1], got {noise_rate}")
    enc = np.asarray(enc, dtype=np.float64)
    n_act = vocab.n_activities
    width = n_act + vocab.n_resources
    batch = enc.reshape(-1, enc.shape[-1] // width, width).copy()
    flips = rng.random(batch.shape[:2]) < noise_rate
    draws = rng.integers(1, max(n_act, 2), size=batch.shape[:2])
    flips &= batch[:, :, 0] != 1.0
    if n_act > 1 and flips.any():
        rows, cols = np.nonzero(flips)
        batch[rows, cols, :n_act] = 0.0
        batch[rows, cols, draws[rows, cols]] = 1.0
    return batch.reshape(enc.shape)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Architecture:
    max_len: int
    n_activities: int
    n_resources: int
    widths: tuple[int, ...] = (64, 32, 64)

    @property
    def block(self) -> int:
        return self.n_activities + self.n_resources

    @property
    def input_dim(self) -> int:
        return self.max_len * self.block

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.widths, self.input_dim]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {"max_len": self.max_len, "n_activities": self.n_activities,
                "n_resources": self.n_resources, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d) -> "Architecture":
        return cls(int(d["max_len"]), int(d["n_activities"]), int(d["n_resources"]), tuple(d["widths"]))


@dataclass
class Model:
    arch: Architecture
    vocab: Vocabulary
    params: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.arch, self.vocab, [p.copy() for p in self.params], json.loads(json.dumps(self.meta)))

    def bind(self, g: Graph) -> list[Node]:
        return [g.parameter(p) for p in self.params]


def init_model(arch: Architecture, vocab: Vocabulary, rng: np.random.Generator) -> Model:
    """Glorot-uniform weights, zero biases."""
    if vocab.n_activities != arch.n_activities or vocab.n_resources != arch.n_resources:
        raise ShapeError("vocabulary sizes do not match the architecture")
    if any(w < 1 for w in arch.widths):
        raise ValueError(f"layer widths must be positive: {arch.widths}")
    params = []
    for fan_in, fan_out in arch.layer_shapes():
        s = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return Model(arch, vocab, params)


@dataclass(frozen=True)
class ProbNodes:
    """Graph handles for a batched reconstruction."""

    activities: Node  # (B, L, |A|)
    resources: Node   # (B, L, |R|)
    flat: Node        # (B, D), same layout as the encoding


@dataclass(frozen=True)
class ProbTrace:
    """Per-position activity and resource distributions (optionally with a leading batch axis)."""

    activities: np.ndarray
    resources: np.ndarray
    vocab: Vocabulary

    def flat(self) -> np.ndarray:
        both = np.concatenate([self.activities, self.resources], axis=-1)
        return both.reshape(*both.shape[:-2], -1)

    def __getitem__(self, i) -> "ProbTrace":
        return ProbTrace(self.activities[i], self.resources[i], self.vocab)


def forward_graph(g: Graph, arch: Architecture, pnodes: Sequence[Node], x: Node) -> ProbNodes:
    """Encoder/decoder stack with ReLU hidden layers and a softmax per output block."""
    if x.value.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input dim {arch.input_dim}")
    h = x
    n_layers = len(pnodes) // 2
    for k in range(n_layers):
        h = g.add(g.matmul(h, pnodes[2 * k]), pnodes[2 * k + 1])
        if k < n_layers - 1:
            h = g.relu(h)
    logits = g.reshape(h, (x.shape[0], arch.max_len, arch.block))
    act = g.softmax(g.slice(logits, (slice(None), slice(None), slice(0, arch.n_activities))), axis=-1)
    res = g.softmax(g.slice(logits, (slice(None), slice(None), slice(arch.n_activities, None))), axis=-1)
    flat = g.reshape(g.concat([act, res], axis=2), (x.shape[0], arch.input_dim))
    return ProbNodes(act, res, flat)


def forward(model: Model, enc: np.ndarray) -> ProbTrace:
    """Reconstruct one encoding ``(D,)`` or a batch ``(N, D)``."""
    enc = np.asarray(enc, dtype=np.float64)
    single = enc.ndim == 1
    batch = enc.reshape(1, -1) if single else enc
    g = Graph()
    out = forward_graph(g, model.arch, model.bind(g), g.constant(batch))
    if single:
        return ProbTrace(out.activities.value[0], out.resources.value[0], model.vocab)
    return ProbTrace(out.activities.value, out.resources.value, model.vocab)


def reconstruction_error(enc: np.ndarray, out) -> float | np.ndarray:
    """Mean squared difference over all matrix entries, PAD positions included.

    With batched inputs ``(N, D)`` returns one error per row.
    """
    target = np.asarray(enc, dtype=np.float64)
    pred = out.flat() if isinstance(out, ProbTrace) else np.asarray(out, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"encoding shape {target.shape} != reconstruction shape {pred.shape}")
    err = ((target - pred) ** 2).mean(axis=-1)
    return float(err) if err.ndim == 0 else err


def reconstruction_loss(g: Graph, target: np.ndarray, out: ProbNodes) -> Node:
    """Batch mean of :func:`reconstruction_error` as a graph node."""
    diff = g.subtract(out.flat, g.constant(target))
    return g.mean(g.multiply(diff, diff))


# ---------------------------------------------------------------------------
# training


class Adam:
    """Gradient descent with bias-corrected first/second moment estimates."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch: int = 32
    noise_rate: float = 0.1
    seed: int = 0
    widths: tuple[int, ...] = (64, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


def pretrain(log: EventLog, config: PretrainConfig = PretrainConfig(), vocab: Vocabulary | None = None,
             max_len: int | None = None) -> Model:
    """Fit a denoising autoencoder: corrupted inputs, clean targets, mini-batch Adam."""
    if len(log) == 0:
        raise ValueError("cannot pretrain on an empty log")
    if config.epochs < 0 or config.batch < 1:
        raise ValueError("epochs must be >= 0 and batch >= 1")
    vocab = vocab or build_vocab(log)
    max_len = max_len or max_trace_length(log)
    arch = Architecture(max_len, vocab.n_activities, vocab.n_resources, config.widths)
    model = init_model(arch, vocab, substream(config.seed, "init"))
    data = encode_log(log, vocab, max_len)
    history = fit_reconstruction(model, data, config.epochs, config.lr, config.batch, config.noise_rate,
                                 substream(config.seed, "shuffle"), substream(config.seed, "corruption"))
    model.meta = {"stage": "pretrain", "epochs": config.epochs, "seed": config.seed,
                  "n_traces": len(log), "loss_history": history}
    return model


def fit_reconstruction(model: Model, data: np.ndarray, epochs: int, lr: float, batch: int, noise_rate: float,
                       shuffle_rng: np.random.Generator, noise_rng: np.random.Generator) -> list[float]:
    """Train ``model.params`` in place; returns the per-epoch mean loss."""
    opt = Adam(model.params, lr=lr)
    history = []
    n = len(data)
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            target = data[order[start:start + batch]]
            noisy = corrupt(target, noise_rate, noise_rng, model.vocab)
            try:
                g = Graph()
                pnodes = model.bind(g)
                loss = reconstruction_loss(g, target, forward_graph(g, model.arch, pnodes, g.constant(noisy)))
                grads = g.backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, str(exc)) from exc
            if not np.isfinite(loss.value):
                raise DivergenceError(epoch, "non-finite loss")
            opt.step(model.params, [grads[p.id] for p in pnodes])
            total += float(loss.value) * len(target)
        history.append(total / n)
    return history


# ---------------------------------------------------------------------------
# serialization (.ltnae): magic, u64 header length, JSON header, little-endian float64 parameters

MAGIC = b"LTNAE\x00\x01\n"


def save_model(model: Model, stream: IO[bytes]) -> None:
    header = {
        "architecture": model.arch.to_dict(),
        "vocabulary": model.vocab.to_dict(),
        "shapes": [list(p.shape) for p in model.params],
        "metadata": model.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    stream.write(MAGIC)
    stream.write(struct.pack("<Q", len(blob)))
    stream.write(blob)
    for p in model.params:
        stream.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(stream: IO[bytes]) -> Model:
    if stream.read(len(MAGIC)) != MAGIC:
        raise ValueError("not an .ltnae model file")
    (size,) = struct.unpack("<Q", stream.read(8))
    header = json.loads(stream.read(size).decode("utf-8"))
    params = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        raw = stream.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError("truncated parameter block")
        params.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
    arch = Architecture.from_dict(header["architecture"])
    model = Model(arch, Vocabulary.from_dict(header["vocabulary"]), params, header["metadata"])
    expected = [s for fi, fo in arch.layer_shapes() for s in ((fi, fo), (fo,))]
    if [p.shape for p in params] != expected:
        raise ShapeError("parameter shapes do not chain from input to output")
    return model


def model_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    save_model(model, buf)
    return buf.getvalue()


def with_meta(model: Model, **meta) -> Model:
    return replace(model, meta={**model.meta, **meta})
