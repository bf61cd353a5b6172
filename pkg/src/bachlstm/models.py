"""The note and duration networks, training loop and checkpoints.

Note model::

    LSTM(512, sequence) -> Dropout(0.7) -> BiLSTM(256) -> Dropout(0.7)
    -> BatchNorm -> Dense(V_note) -> Softmax

Duration model::

    LSTM(512, sequence) -> LSTM(256) -> Dropout(0.7) -> Dense(3) -> Softmax

``scale`` multiplies the recurrent widths so the same architectures can be
trained at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .dataset import BatchStream
from .tensor_nn import (BatchNorm, BiLSTM, Dense, Dropout, LayerSpec, LSTM, Network,
                        RmspropState, Softmax, clip_by_global_norm, rmsprop_step)

__all__ = [
    "ModelSpec",
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "TrainingError",
    "Trained",
    "CheckpointError",
    "CheckpointVersionError",
    "DictionaryMismatchError",
    "CorruptCheckpointError",
    "Checkpoint",
    "build_note_model",
    "build_duration_model",
    "build_network",
    "train",
    "accuracy_count",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

log = logging.getLogger(__name__)

KEEP_PROB = 0.7
NOTE_WIDTHS = (512, 256)
DURATION_WIDTHS = (512, 256)
N_DURATIONS = 3


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_dim: int
    output_dim: int

    def __post_init__(self):
        if len(self.layers) < 2 or self.layers[-2].kind != "dense" \
                or self.layers[-1].kind != "softmax":
            raise ValueError("model must end with dense then softmax")
        if self.layers[-2].width != self.output_dim:
            raise ValueError("dense width must equal the output vocabulary size")

    def to_dict(self) -> dict:
        return {"name": self.name, "input_dim": self.input_dim, "output_dim": self.output_dim,
                "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["name"], tuple(LayerSpec(**layer) for layer in d["layers"]),
                   d["input_dim"], d["output_dim"])

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _scaled(width: int, scale: float) -> int:
    return max(1, int(round(width * scale)))


def build_note_model(n_notes: int, scale: float = 1.0) -> ModelSpec:
    if n_notes < 2:
        raise ValueError("note vocabulary needs at least 2 entries")
    w1, w2 = (_scaled(w, scale) for w in NOTE_WIDTHS)
    layers = (
        LayerSpec("lstm", w1, returns_sequence=True),
        LayerSpec("dropout", keep_prob=KEEP_PROB),
        LayerSpec("bidirectional_lstm", w2),
        LayerSpec("dropout", keep_prob=KEEP_PROB),
        LayerSpec("batchnorm"),
        LayerSpec("dense", n_notes),
        LayerSpec("softmax"),
    )
    return ModelSpec("note", layers, n_notes, n_notes)


def build_duration_model(n_notes: int, n_durations: int = N_DURATIONS,
                         scale: float = 1.0) -> ModelSpec:
    if n_notes < 2:
        raise ValueError("note vocabulary needs at least 2 entries")
    w1, w2 = (_scaled(w, scale) for w in DURATION_WIDTHS)
    layers = (
        LayerSpec("lstm", w1, returns_sequence=True),
        LayerSpec("lstm", w2),
        LayerSpec("dropout", keep_prob=KEEP_PROB),
        LayerSpec("dense", n_durations),
        LayerSpec("softmax"),
    )
    return ModelSpec("duration", layers, n_notes + n_durations, n_durations)


def build_network(spec: ModelSpec, seed: int = 0) -> Network:
    """Instantiate ``spec`` with freshly initialized weights.

    Weight init and each dropout layer draw from independent streams
    spawned from ``seed``.
    """
    init_seq, *drop_seqs = np.random.SeedSequence(seed).spawn(1 + len(spec.layers))
    rng = np.random.default_rng(init_seq)
    layers = []
    dim = spec.input_dim
    for ls, dseq in zip(spec.layers, drop_seqs):
        if ls.kind == "lstm":
            layer = LSTM(dim, ls.width, ls.returns_sequence, rng)
        elif ls.kind == "bidirectional_lstm":
            layer = BiLSTM(dim, ls.width, rng)
        elif ls.kind == "dropout":
            layer = Dropout(ls.keep_prob, np.random.default_rng(dseq))
        elif ls.kind == "batchnorm":
            layer = BatchNorm(dim)
        elif ls.kind == "dense":
            layer = Dense(dim, ls.width, rng)
        else:
            layer = Softmax()
        dim = layer.output_dim(dim)
        layers.append(layer)
    return Network(layers)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    rho: float = 0.9
    epsilon: float = 1e-7
    clip_norm: float | None = 5.0
    patience: int | None = 10
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    seconds: float
    correct: int = 0
    rows: int = 0


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be appended in increasing order")
        if not 0.0 <= record.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.records]

    def metrics(self) -> list[tuple[int, float, float]]:
        """Everything except wall-clock time; stable across identical runs."""
        return [(r.epoch, r.loss, r.accuracy) for r in self.records]

    def to_tsv(self) -> str:
        lines = ["epoch\tloss\taccuracy\tseconds"]
        lines += [f"{r.epoch}\t{r.loss!r}\t{r.accuracy!r}\t{r.seconds:.3f}" for r in self.records]
        return "\n".join(lines) + "\n"


class Trained(NamedTuple):
    network: Network
    history: TrainHistory
    optimizer: RmspropState


def accuracy_count(probs, targets) -> int:
    return int(np.sum(np.argmax(probs, axis=1) == np.argmax(targets, axis=1)))


def train(spec: ModelSpec, stream: BatchStream, config: TrainConfig = TrainConfig(),
          network: Network | None = None, optimizer: RmspropState | None = None,
          start_epoch: int = 0,
          on_batch: Callable | None = None,
          on_checkpoint: Callable[[int, Network, RmspropState], None] | None = None) -> Trained:
    """Fit ``spec`` on ``stream`` with RMSprop.

    Epochs are numbered from 1.  Training stops early when the epoch-mean
    loss has not improved for ``config.patience`` epochs.  ``on_batch`` is
    called as ``on_batch(epoch, index, probs, y)`` after every update.
    """
    if len(stream) == 0:
        raise TrainingError("empty batch stream")
    net = network if network is not None else build_network(spec, config.seed)
    params = net.parameters()
    if optimizer is None:
        optimizer = RmspropState.for_params(params, learning_rate=config.learning_rate,
                                            rho=config.rho, epsilon=config.epsilon)
    history = TrainHistory()
    best, stale = np.inf, 0
    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        t0 = time.perf_counter()
        loss_sum, correct, rows = 0.0, 0, 0
        for index, batch in enumerate(stream.epoch(epoch)):
            loss, probs = net.loss(batch.x, batch.y, train=True)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {index}")
            grads = net.gradients()
            if config.clip_norm is not None:
                clip_by_global_norm(grads, config.clip_norm)
            rmsprop_step(params, grads, optimizer)
            n = len(batch.y)
            loss_sum += loss * n
            correct += accuracy_count(probs, batch.y)
            rows += n
            if on_batch is not None:
                on_batch(epoch, index, probs, batch.y)
        record = EpochRecord(epoch, loss_sum / rows, correct / rows,
                             time.perf_counter() - t0, correct, rows)
        history.append(record)
        log.info("epoch %d loss %.6f accuracy %.4f", epoch, record.loss, record.accuracy)
        if on_checkpoint is not None and config.checkpoint_every \
                and epoch % config.checkpoint_every == 0:
            on_checkpoint(epoch, net, optimizer)
        if record.loss < best:
            best, stale = record.loss, 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                log.info("no improvement for %d epochs; stopping", stale)
                break
    return Trained(net, history, optimizer)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BACHLSTM"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DictionaryMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    network: Network
    optimizer: RmspropState
    dict_hash: str
    epoch: int = 0
    seed: int = 0
    metadata: dict = field(default_factory=dict)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """Canonical serialization: JSON header, then float32 payloads."""
    tensors = []
    for name, arr in ckpt.network.parameters().items():
        tensors.append((f"param/{name}", arr))
    for name, arr in ckpt.network.buffers().items():
        tensors.append((f"buffer/{name}", arr))
    for name, arr in sorted(ckpt.optimizer.accumulators.items()):
        tensors.append((f"opt/{name}", arr))
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": ckpt.spec.to_dict(),
        "spec_digest": ckpt.spec.digest(),
        "dict_hash": ckpt.dict_hash,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "optimizer": {"learning_rate": ckpt.optimizer.learning_rate,
                      "rho": ckpt.optimizer.rho, "epsilon": ckpt.optimizer.epsilon},
        "metadata": ckpt.metadata,
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "float32"} for n, a in tensors],
        "payload_crc32": zlib.crc32(payload),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)) + head + payload


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def _parse_checkpoint(data: bytes):
    if len(data) < _PREAMBLE.size:
        raise CorruptCheckpointError("file too short for a checkpoint")
    magic, version, head_len = _PREAMBLE.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("bad checkpoint magic")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    start = _PREAMBLE.size
    try:
        header = json.loads(data[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("format_version") != version:
        raise CheckpointVersionError("header and preamble versions disagree")
    payload = data[start + head_len:]
    expected = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
    if len(payload) != expected or zlib.crc32(payload) != header["payload_crc32"]:
        raise CorruptCheckpointError("checkpoint payload is damaged")
    tensors = {}
    offset = 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
        offset += 4 * count
    return header, tensors


def load_checkpoint(path, expected_dict_hash: str | None = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises :class:`CheckpointVersionError`, :class:`DictionaryMismatchError`
    or :class:`CorruptCheckpointError`.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    header, tensors = _parse_checkpoint(data)
    if expected_dict_hash is not None and header["dict_hash"] != expected_dict_hash:
        raise DictionaryMismatchError(
            "checkpoint was trained with different dictionaries")
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"invalid model spec: {exc}") from None
    if spec.digest() != header["spec_digest"]:
        raise CorruptCheckpointError("model spec digest mismatch")
    net = build_network(spec, header["seed"])
    params = net.parameters()
    acc = {}
    buffers = {}
    for name, arr in tensors.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            if key not in params or params[key].shape != arr.shape:
                raise CorruptCheckpointError(f"unexpected tensor {name}")
            params[key][...] = arr
        elif kind == "buffer":
            buffers[key] = arr
        elif kind == "opt":
            acc[key] = arr
        else:
            raise CorruptCheckpointError(f"unexpected tensor {name}")
    if set(params) - {n.partition("/")[2] for n in tensors if n.startswith("param/")}:
        raise CorruptCheckpointError("checkpoint is missing parameters")
    try:
        net.load_buffers(buffers)
    except KeyError as exc:
        raise CorruptCheckpointError(str(exc)) from None
    opt = RmspropState(**header["optimizer"])
    opt.accumulators = {k: acc[k] for k in sorted(acc)}
    return Checkpoint(spec, net, opt, header["dict_hash"], header["epoch"], header["seed"],
                      header["metadata"])
