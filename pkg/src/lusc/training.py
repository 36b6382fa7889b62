"""Cross-entropy training loop, optimizers, early stopping and checkpoints.

Checkpoint layout (little-endian)::

    magic "LUCK" | version u32 | architecture fingerprint (32 bytes)
    parameter count u64 | count x f32 parameters in enumeration order
    [optional] optimizer section: u64 byte length, then payload

The Adam payload is ``t`` (u64) followed by the first and second moment
vectors, each ``count`` f32 values.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AugmentationPolicy, DatasetArchive, DatasetError, SplitSpec, batches, epoch_order, standardize
from .nn import Model

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LUCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI32sQ")
CSV_HEADER = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "wall_seconds"]


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of integer labels, via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ad.ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    B, K = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range for {K} classes: {labels.tolist()}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / B),)

    return ad._make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# -- optimizers -------------------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float, weight_decay: float = 0.0):
    return [p - lr * (g + weight_decay * p) for p, g in zip(params, grads)]


@dataclass
class AdamState:
    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
):
    """Bias-corrected Adam with decoupled weight decay; returns (params, state)."""
    t = state.t + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_p.append((p - lr * (update + weight_decay * p)).astype(p.dtype))
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return new_p, AdamState(t, new_m, new_v)


# -- configuration and logs ------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 60
    early_stop_patience: int = 10
    lr_schedule: str = "step"
    lr_step_factor: float = 0.1
    lr_step_every: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.lr_schedule not in ("constant", "step", "cosine"):
            raise ValueError(f"lr_schedule must be constant, step or cosine, got {self.lr_schedule!r}")
        if self.lr_schedule == "step" and (self.lr_step_every < 1 or self.lr_step_factor <= 0):
            raise ValueError("step schedule needs lr_step_every >= 1 and lr_step_factor > 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 1-based ``epoch``."""
        e = epoch - 1
        if self.lr_schedule == "step":
            return self.learning_rate * self.lr_step_factor ** (e // self.lr_step_every)
        if self.lr_schedule == "cosine":
            return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * e / max(self.max_epochs, 1)))
        return self.learning_rate


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    wall_seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    label_hashes: list[str] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.epoch, f"{r.train_loss:.8g}", f"{r.train_acc:.8g}", f"{r.val_loss:.8g}",
                        f"{r.val_acc:.8g}", f"{r.lr:.8g}", f"{r.wall_seconds:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        recs = [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]), float(r["val_loss"]),
                            float(r["val_acc"]), float(r["lr"]), float(r["wall_seconds"])) for r in rows]
        return cls(recs)


def label_stream_hash(labels: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(labels, dtype="<i8").tobytes()).hexdigest()


def epoch_seed(seed: int, epoch: int) -> int:
    return (int(seed) + 0x9E3779B97F4A7C15 * epoch) % 2**64


# -- training loop -----------------------------------------------------------------

def _validation_pass(model: Model, archive: DatasetArchive, indices, batch_size: int) -> tuple[float, float]:
    total_loss, correct = 0.0, 0
    with ad.no_grad():
        for x, y in batches(archive, indices, batch_size, None, image_size=model.input_shape[:2]):
            logits = model(x, "eval")
            total_loss += cross_entropy(logits, y).item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    n = len(indices)
    return total_loss / n, correct / n


class Optimizer:
    def __init__(self, model: Model, config: TrainConfig):
        self.model, self.config = model, config
        self.state = AdamState.zeros_like(model.get_state()) if config.optimizer == "adam" else None

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        params = self.model.parameters()
        c = self.config
        # one parameter at a time keeps peak memory near one extra copy of the largest tensor
        st = self.state
        for i, p in enumerate(params):
            if st is None:
                (d,) = sgd_step([p.data], [grads[i]], lr, c.weight_decay)
            else:
                (d,), one = adam_step([p.data], [grads[i]], AdamState(st.t, [st.m[i]], [st.v[i]]),
                                      lr, c.beta1, c.beta2, c.eps, c.weight_decay)
                st.m[i], st.v[i] = one.m[0], one.v[0]
            p.data = d.astype(p.data.dtype)
            grads[i] = None
        if st is not None:
            st.t += 1


def fit(
    model: Model,
    archive: DatasetArchive,
    split: SplitSpec,
    config: TrainConfig,
    policy: AugmentationPolicy | None = None,
    optimizer: Optimizer | None = None,
) -> tuple[Model, TrainLog]:
    """Train ``model`` on ``split.train`` with early stopping on ``split.val`` loss.

    The best-validation-loss weights are restored before returning.  Images
    are resized to the model's input grid on the fly when the archive
    resolution differs.
    """
    config.validate()
    if not split.train or not split.val:
        raise DatasetError("fit needs non-empty train and val subsets")
    if not archive.standardized:
        archive = standardize(archive)
    opt = optimizer or Optimizer(model, config)
    model.reseed_dropout([config.seed, 0xD0])
    size = model.input_shape[:2]
    params = model.parameters()
    tlog = TrainLog()
    best_loss, best_state, wait = math.inf, None, 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.monotonic()
        lr = config.lr_at(epoch)
        seed = epoch_seed(config.seed, epoch)
        tlog.label_hashes.append(label_stream_hash(archive.labels[epoch_order(split.train, seed)]))
        loss_sum, correct, seen = 0.0, 0, 0
        for b, (x, y) in enumerate(batches(archive, split.train, config.batch_size, seed, policy, size), start=1):
            logits = model(x, "train")
            loss = cross_entropy(logits, y)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, b, value)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            grads = ad.grad(loss, params, retain_graph=False)
            del logits, loss
            opt.step(grads, lr)
            del grads
            loss_sum += value * len(y)
            seen += len(y)
        val_loss, val_acc = _validation_pass(model, archive, split.val, config.batch_size)
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch, 0, val_loss)
        tlog.records.append(
            EpochRecord(epoch, loss_sum / seen, correct / seen, val_loss, val_acc, lr, time.monotonic() - t0)
        )
        log.info("epoch %d: train %.4f/%.3f val %.4f/%.3f", epoch, loss_sum / seen, correct / seen, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, best_state, wait = val_loss, model.get_state(), 0
            tlog.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.early_stop_patience:
                tlog.stopped_early = True
                break

    if best_state is not None:
        model.set_state(best_state)
    return model, tlog


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(model: Model, optimizer_state: AdamState | None, path) -> None:
    arrays = model.get_state()
    count = sum(a.size for a in arrays)
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, model.fingerprint(), count))
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        if optimizer_state is not None:
            payload = struct.pack("<Q", optimizer_state.t)
            payload += b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in optimizer_state.m)
            payload += b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in optimizer_state.v)
            f.write(struct.pack("<Q", len(payload)) + payload)


def checkpoint_fingerprint(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(_CKPT_HEADER.size)
    if len(head) < _CKPT_HEADER.size or head[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    return _CKPT_HEADER.unpack(head)[2]


def load_checkpoint(path, model: Model) -> tuple[Model, AdamState | None]:
    """Load parameters (and optimizer state, if stored) into a freshly built ``model``."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError(f"checkpoint truncated at byte {len(data)}")
    magic, version, fp, count = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if fp != model.fingerprint():
        raise FingerprintMismatch(
            f"checkpoint architecture {fp.hex()} does not match model architecture {model.fingerprint().hex()}"
        )
    shapes = [p.shape for p in model.parameters()]
    if count != sum(int(np.prod(s)) for s in shapes):
        raise CheckpointError(f"checkpoint holds {count} parameters, model has {model.num_parameters()}")
    off = _CKPT_HEADER.size
    end = off + 4 * count
    if len(data) < end:
        raise CheckpointError(f"checkpoint truncated at byte {len(data)}, parameters end at {end}")
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=off)

    def unflatten(vec):
        out, i = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(vec[i : i + n].reshape(s).astype(np.float32))
            i += n
        return out

    model.set_state(unflatten(flat))
    state = None
    if len(data) > end:
        (n,) = struct.unpack_from("<Q", data, end)
        payload = data[end + 8 :]
        if len(payload) != n or n != 8 + 8 * count:
            raise CheckpointError(f"optimizer section length {n} does not match {len(payload)} stored bytes")
        (t,) = struct.unpack_from("<Q", payload, 0)
        m = np.frombuffer(payload, dtype="<f4", count=count, offset=8)
        v = np.frombuffer(payload, dtype="<f4", count=count, offset=8 + 4 * count)
        state = AdamState(t, unflatten(m), unflatten(v))
    return model, state
