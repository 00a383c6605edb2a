"""Training: cross-entropy loss, Adam, the epoch loop, and checkpointing.

The loop shuffles per epoch, runs forward/backward/Adam per batch, evaluates
on the validation split after each epoch, and overwrites the checkpoint only
when validation loss strictly improves the best seen so far.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, NormStats, batches
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    ConfigMismatchError,
    NumericalError,
)
from .model import Model, ModelConfig, build_model, forward
from .tensor import GradTape, Tensor, backward, record_op, zero_grads

__all__ = [
    "TrainConfig",
    "Adam",
    "EpochStats",
    "Checkpoint",
    "sparse_ce_loss",
    "evaluate",
    "train_loop",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
    "history_to_csv",
]

CKPT_MAGIC = b"BEATCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    # optional per-class loss weights (imbalance remedy); None reproduces the
    # unweighted objective, which is the default
    class_weights: Optional[tuple] = None

    def validate(self) -> list[str]:
        bad = []
        if not isinstance(self.epochs, int) or self.epochs < 1:
            bad.append(f"epochs must be a positive integer, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            bad.append(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if not self.lr > 0:
            bad.append(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                bad.append(f"{name} must lie in [0, 1), got {v}")
        if not self.eps > 0:
            bad.append(f"eps must be > 0, got {self.eps}")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            bad.append(f"class_weights must all be > 0, got {self.class_weights}")
        return bad


def sparse_ce_loss(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean negative log-likelihood of the true class, via log-sum-exp.

    With ``class_weights`` the per-sample losses are averaged with weights
    looked up by true class (normalized by the total weight in the batch).
    Gradient is the fused softmax-minus-onehot rule.
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"labels must lie in {{0..{z.shape[1] - 1}}}")
    b = z.shape[0]
    if class_weights is None:
        sample_w = np.ones(b)
    else:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (z.shape[1],):
            raise ValueError(
                f"class_weights must have one entry per class, got {class_weights.shape}"
            )
        sample_w = class_weights[labels]
    total_w = sample_w.sum()
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    per_sample = lse - z[np.arange(b), labels]
    out = Tensor(np.asarray((sample_w * per_sample).sum() / total_w),
                 needs_grad=logits.needs_grad)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), labels] -= 1.0
        return (np.asarray(g) * (sample_w[:, None] / total_w) * p,)

    record_op(out, (logits,), bwd)
    return out


class Adam:
    """Adam with bias correction; one moment pair per parameter tensor."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """One update: t += 1, moment updates, bias correction, parameter step."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                raise ValueError("adam step requires populated gradients; run backward first")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


def history_to_csv(history: Sequence[EpochStats]) -> str:
    lines = ["epoch,train_loss,val_loss,train_acc,val_acc"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss!r},{h.val_loss!r},{h.train_acc!r},{h.val_acc!r}")
    return "\n".join(lines) + "\n"


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode loss and accuracy over the whole dataset, exact cover."""
    total_loss = 0.0
    correct = 0
    for batch in batches(ds, batch_size):
        logits = forward(model, batch.features, mode="eval")
        total_loss += sparse_ce_loss(logits, batch.labels).item() * batch.n
        preds = np.argmax(logits.data, axis=1)  # ties resolve to the lowest class id
        correct += int((preds == batch.labels).sum())
    return total_loss / ds.n, correct / ds.n


def predict(model: Model, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode softmax probabilities, one row per input row."""
    probs = []
    for start in range(0, features.shape[0], batch_size):
        logits = forward(model, features[start : start + batch_size], mode="eval").data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs.append(e / e.sum(axis=1, keepdims=True))
    return np.vstack(probs)


@dataclass
class Checkpoint:
    """Best-so-far model state plus everything needed to reproduce its run."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray
    norm_fitted_on: str
    best_val_loss: float
    epoch: int
    seed: int

    def norm_stats(self) -> NormStats:
        return NormStats(mean=self.norm_mean, std=self.norm_std, fitted_on=self.norm_fitted_on)


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.parameters()}


def train_loop(
    model: Model,
    cfg: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    checkpoint_path: Optional[str] = None,
    norm_stats: Optional[NormStats] = None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Run the full training schedule; return the best checkpoint and history.

    The checkpoint (in memory, and on disk when a path is given) is replaced
    only when validation loss strictly improves. A non-finite training loss
    aborts with the offending epoch/batch in the message.
    """
    violations = cfg.validate()
    if violations:
        raise ConfigError(violations)
    if cfg.class_weights is not None and len(cfg.class_weights) != model.config.n_classes:
        raise ConfigError(
            f"class_weights has {len(cfg.class_weights)} entries for "
            f"{model.config.n_classes} classes"
        )
    stats = norm_stats or NormStats(
        mean=np.zeros(model.config.input_len),
        std=np.ones(model.config.input_len),
        fitted_on="identity",
    )
    params = model.param_tensors()
    optimizer = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    dropout_rng = np.random.default_rng([cfg.seed, 0xD0])

    best = Checkpoint(
        config=model.config,
        params=_snapshot(model),
        norm_mean=np.asarray(stats.mean, dtype=np.float64),
        norm_std=np.asarray(stats.std, dtype=np.float64),
        norm_fitted_on=stats.fitted_on,
        best_val_loss=math.inf,
        epoch=-1,
        seed=cfg.seed,
    )
    history: list[EpochStats] = []

    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        epoch_correct = 0
        for batch_idx, batch in enumerate(
            batches(train_ds, cfg.batch_size, shuffle=True, seed=[cfg.seed, epoch])
        ):
            zero_grads(params)
            with GradTape() as tape:
                logits = forward(model, batch.features, mode="train", rng=dropout_rng)
                loss = sparse_ce_loss(logits, batch.labels, cfg.class_weights)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericalError(
                    f"non-finite training loss {loss_value} at epoch {epoch}, "
                    f"batch {batch_idx}"
                )
            backward(tape, loss)
            optimizer.step()
            epoch_loss += loss_value * batch.n
            preds = np.argmax(logits.data, axis=1)
            epoch_correct += int((preds == batch.labels).sum())

        val_loss, val_acc = evaluate(model, val_ds)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=epoch_loss / train_ds.n,
                val_loss=val_loss,
                train_acc=epoch_correct / train_ds.n,
                val_acc=val_acc,
            )
        )
        if val_loss < best.best_val_loss:
            best = Checkpoint(
                config=model.config,
                params=_snapshot(model),
                norm_mean=best.norm_mean,
                norm_std=best.norm_std,
                norm_fitted_on=best.norm_fitted_on,
                best_val_loss=val_loss,
                epoch=epoch,
                seed=cfg.seed,
            )
            if checkpoint_path is not None:
                save_checkpoint(best, checkpoint_path)

    return best, history


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------
#
# Little-endian binary layout:
#   magic (8 bytes) | version u32 | meta_len u64 | meta utf-8 | n_tensors u32
#   then per tensor: name_len u32 | name utf-8 | rank u32 | dims u64 * rank
#   | data float64 * prod(dims)
# Meta is "key = value" lines: the model config, best_val_loss (float.hex for
# bit-exactness), epoch, seed and the normalization provenance id.


def _meta_text(ckpt: Checkpoint) -> str:
    pairs = dict(ckpt.config.to_dict())
    pairs["best_val_loss"] = float(ckpt.best_val_loss).hex()
    pairs["epoch"] = ckpt.epoch
    pairs["run_seed"] = ckpt.seed
    pairs["norm_fitted_on"] = ckpt.norm_fitted_on
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


def _parse_meta(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Atomic write: serialize to a temp file, then rename over the target."""
    meta = _meta_text(ckpt).encode("utf-8")
    tensors = dict(ckpt.params)
    tensors["norm.mean"] = ckpt.norm_mean
    tensors["norm.std"] = ckpt.norm_std

    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    blob += struct.pack("<Q", len(meta))
    blob += meta
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.astype("<f8").tobytes()

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint while reading {what}", offset=self.offset
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path: str, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """Parse and validate a checkpoint file; fail closed on any corruption."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())

    magic = reader.take(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, not a checkpoint file", offset=0)
    version = reader.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} unsupported (expected {CKPT_VERSION})"
        )
    meta_len = reader.u64("meta length")
    try:
        meta = _parse_meta(reader.take(meta_len, "meta").decode("utf-8"))
    except UnicodeDecodeError:
        raise CheckpointError("meta block is not valid UTF-8", offset=reader.offset) from None

    config_keys = ModelConfig().__dict__.keys()
    missing = [k for k in list(config_keys) + ["best_val_loss", "epoch", "run_seed",
                                               "norm_fitted_on"] if k not in meta]
    if missing:
        raise CheckpointError(f"meta block missing keys: {', '.join(missing)}")
    config = ModelConfig.from_dict({k: meta[k] for k in config_keys})
    if expected_config is not None and config != expected_config:
        diffs = [
            f"{k}: stored {getattr(config, k)!r} vs expected {getattr(expected_config, k)!r}"
            for k in config_keys
            if getattr(config, k) != getattr(expected_config, k)
        ]
        raise ConfigMismatchError("checkpoint config mismatch: " + "; ".join(diffs))

    n_tensors = reader.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = reader.u32("tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        rank = reader.u32(f"rank of {name}")
        if rank > 3:
            raise CheckpointError(f"tensor {name} has rank {rank} > 3", offset=reader.offset)
        dims = struct.unpack(f"<{rank}Q", reader.take(8 * rank, f"dims of {name}"))
        count = 1
        for d in dims:
            count *= d
        raw = reader.take(8 * count, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    if reader.offset != len(reader.data):
        raise CheckpointError("trailing bytes after final tensor", offset=reader.offset)
    for required in ("norm.mean", "norm.std"):
        if required not in tensors:
            raise CheckpointError(f"checkpoint lacks the {required} tensor")

    return Checkpoint(
        config=config,
        params={k: v for k, v in tensors.items() if not k.startswith("norm.")},
        norm_mean=tensors["norm.mean"],
        norm_std=tensors["norm.std"],
        norm_fitted_on=meta["norm_fitted_on"],
        best_val_loss=float.fromhex(meta["best_val_loss"]),
        epoch=int(meta["epoch"]),
        seed=int(meta["run_seed"]),
    )


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the model from the stored config and load weights bit-exactly."""
    model = build_model(ckpt.config)
    for name, tensor in model.parameters():
        if name not in ckpt.params:
            raise ConfigMismatchError(f"checkpoint lacks parameter {name}")
        stored = ckpt.params[name]
        if stored.shape != tensor.data.shape:
            raise ConfigMismatchError(
                f"parameter {name} has shape {stored.shape}, expected {tensor.data.shape}"
            )
        tensor.data[...] = stored
    return model
