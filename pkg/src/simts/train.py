"""SGD training loop and checkpoint persistence.

One step per mini-batch: mean batch loss, reverse-mode gradients, classic
momentum update with the L2 term folded into the gradient
(v = m*v + g + wd*theta; theta -= lr*v).  Shuffling uses a fresh generator
seeded by (seed, epoch), so resuming from a checkpoint at any epoch
reproduces an uninterrupted run bit for bit (velocity is persisted too).
"""

import ast
import struct
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from simts import backend
from simts import model as model_mod
from simts.autodiff import Tensor, backward
from simts.data import WindowSample
from simts.errors import ConfigError, DataError
from simts.model import EncoderConfig, Model, check_variant

CHECKPOINT_MAGIC = b"STSC"
CHECKPOINT_VERSION = 1
_VELOCITY_PREFIX = "velocity/"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 500
    batch_size: int = 8
    variant: str = "simts"
    seed: int = 0
    window_len: int = 402
    history_len: int = 201
    stride: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.stride < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, stride >= 1 required")
        if not 0 < self.history_len < self.window_len:
            raise ConfigError("need 0 < history_len < window_len")
        check_variant(self.variant)

    @property
    def horizon(self):
        return self.window_len - self.history_len


@dataclass
class TrainState:
    """Mutable optimizer state carried across epochs (and checkpoints)."""

    velocity: Dict[str, np.ndarray]
    epoch: int = 0
    loss_history: List[float] = field(default_factory=list)


def init_state(model: Model) -> TrainState:
    return TrainState({k: np.zeros_like(p.data) for k, p in model.params.items()})


def sgd_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
             velocity: Dict[str, np.ndarray], cfg: TrainConfig):
    """One in-place momentum update over every parameter."""
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g.sum()):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        backend.sgd_update(p.data, g, velocity[name], cfg.learning_rate,
                           cfg.momentum, cfg.weight_decay)


def train(samples: Sequence[WindowSample], model: Model, cfg: TrainConfig,
          state: Optional[TrainState] = None) -> TrainState:
    """Train the model in place for cfg.epochs epochs (resuming from
    state.epoch if a state is given); returns the final state, whose
    loss_history holds one mean per-sample loss per epoch."""
    if not samples:
        raise DataError("train: no training samples")
    state = state or init_state(model)
    n = len(samples)
    for epoch in range(state.epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            loss = model_mod.batch_loss(model, batch, cfg.variant)
            grads = backward(loss, model.params)
            sgd_step(model.params, grads, state.velocity, cfg)
            total += loss.item() * len(batch)
        state.loss_history.append(total / n)
        state.epoch = epoch + 1
    return state


# ---------------------------------------------------------------------------
# checkpoint file format (all integers little-endian)
#
#   "STSC" | u32 version | u64 len | config text block (sorted key=value
#   lines) | u32 n_records | records | u64 n_loss | f64 loss values
#
# Each record: u16 name length | name utf-8 | u8 rank | u64 extents |
# raw float64 little-endian values.  Records prefixed "velocity/" are
# optimizer state; the rest are model parameters.


@dataclass
class Checkpoint:
    version: int
    encoder: EncoderConfig
    train_config: TrainConfig
    horizon: int
    params: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray]
    epoch: int
    loss_history: List[float]


def make_checkpoint(model: Model, cfg: TrainConfig, state: TrainState) -> Checkpoint:
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        encoder=model.encoder,
        train_config=cfg,
        horizon=model.horizon,
        params={k: p.data.copy() for k, p in model.params.items()},
        velocity={k: v.copy() for k, v in state.velocity.items()},
        epoch=state.epoch,
        loss_history=list(state.loss_history),
    )


def _config_text(ckpt: Checkpoint) -> str:
    pairs = {"horizon": ckpt.horizon, "epoch": ckpt.epoch}
    for f in fields(EncoderConfig):
        pairs[f"encoder.{f.name}"] = getattr(ckpt.encoder, f.name)
    for f in fields(TrainConfig):
        pairs[f"train.{f.name}"] = getattr(ckpt.train_config, f.name)
    return "".join(f"{k}={pairs[k]!r}\n" for k in sorted(pairs))


def _parse_config_text(text: str, path) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"corrupt checkpoint {path}: bad config line {line!r}")
        key, _, value = line.partition("=")
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            raise DataError(
                f"corrupt checkpoint {path}: unreadable config value {line!r}"
            ) from None
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version)]
    config = _config_text(ckpt).encode("utf-8")
    chunks.append(struct.pack("<Q", len(config)))
    chunks.append(config)

    records = list(ckpt.params.items()) + [
        (_VELOCITY_PREFIX + k, v) for k, v in ckpt.velocity.items()
    ]
    chunks.append(struct.pack("<I", len(records)))
    for name, arr in records:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    loss = np.asarray(ckpt.loss_history, dtype="<f8")
    chunks.append(struct.pack("<Q", loss.size))
    chunks.append(loss.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise DataError(
                f"corrupt checkpoint {self.path}: unexpected end of file at "
                f"byte offset {self.off} (needed {n} more bytes)"
            )
        out = self.blob[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(blob, path)
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"corrupt checkpoint {path}: bad magic {magic!r} at byte offset 0")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint {path} has format version {version}; "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    (config_len,) = r.unpack("<Q")
    config = _parse_config_text(r.take(config_len).decode("utf-8"), path)

    (n_records,) = r.unpack("<I")
    params, velocity = {}, {}
    for _ in range(n_records):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        if name.startswith(_VELOCITY_PREFIX):
            velocity[name[len(_VELOCITY_PREFIX) :]] = arr
        else:
            params[name] = arr
    (n_loss,) = r.unpack("<Q")
    loss = np.frombuffer(r.take(8 * n_loss), dtype="<f8").tolist()

    encoder = EncoderConfig(
        **{f.name: config[f"encoder.{f.name}"] for f in fields(EncoderConfig)}
    )
    train_config = TrainConfig(
        **{f.name: config[f"train.{f.name}"] for f in fields(TrainConfig)}
    )
    return Checkpoint(version, encoder, train_config, config["horizon"],
                      params, velocity, config["epoch"], loss)


def restore(ckpt: Checkpoint):
    """Rebuild (model, cfg, state) from a checkpoint, ready to resume."""
    params = {k: Tensor(v, requires_grad=True) for k, v in ckpt.params.items()}
    model = Model(ckpt.encoder, ckpt.horizon, params)
    state = TrainState(
        velocity={k: v.copy() for k, v in ckpt.velocity.items()},
        epoch=ckpt.epoch,
        loss_history=list(ckpt.loss_history),
    )
    return model, ckpt.train_config, state
