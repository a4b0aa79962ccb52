"""Training loop: BCE loss, SGD with momentum, LR schedule, checkpoints.

The recipe is plain SGD with momentum 0.9, weight decay 1e-4, initial
learning rate 1e-5 decayed by 0.1 at fixed epoch intervals. Sequences
are split into fixed-length windows; each window is one forward/backward
pass and one optimizer step, with gradients clipped by global norm.

Checkpoints are a little-endian binary format (magic "TSAL") storing
parameters and momentum buffers as 32-bit floats with a trailing CRC-32;
writes are atomic (temp file then rename).
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyDataset,
    LengthMismatch,
    NonFinite,
    ShapeMismatch,
)
from .model import (
    CONV_LSTM,
    CONV_ONLY,
    AdaptationModel,
    backward_sequence,
    forward_sequence,
    init_parameters,
)
from .tensor import Tensor4

BCE_CLAMP = 1e-7
CHECKPOINT_MAGIC = b"TSAL"
CHECKPOINT_VERSION = 1
VARIANT_CODES = {CONV_ONLY: 0, CONV_LSTM: 1}
CODE_VARIANTS = {code: name for name, code in VARIANT_CODES.items()}


@dataclass
class Hyper:
    """Optimizer hyperparameters; defaults follow the training recipe."""

    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr0: float = 1e-5
    decay_factor: float = 0.1
    decay_every_epochs: int = 3

    def __post_init__(self) -> None:
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")


@dataclass
class OptimizerState:
    momentum_buffers: dict[str, np.ndarray]
    lr: float
    hyper: Hyper
    step_count: int = 0

    @staticmethod
    def fresh(model: AdaptationModel, hyper: Hyper) -> "OptimizerState":
        buffers = {name: np.zeros_like(arr) for name, arr in model.named_parameters()}
        return OptimizerState(momentum_buffers=buffers, lr=hyper.lr0, hyper=hyper)


@dataclass
class TrainConfig:
    epochs: int = 1
    clip_length: int = 16
    seed: int = 0
    checkpoint_path: str | None = None
    clip_norm: float = 10.0
    max_steps: int | None = None
    hyper: Hyper = field(default_factory=Hyper)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")


@dataclass
class TrainSample:
    """One video: aligned static-map and ground-truth sequences."""

    video_id: str
    frames: list[Tensor4]
    targets: list[Tensor4]

    def __post_init__(self) -> None:
        if len(self.frames) != len(self.targets):
            raise LengthMismatch(
                f"{self.video_id}: {len(self.frames)} frames vs {len(self.targets)} targets"
            )
        if not self.frames:
            raise LengthMismatch(f"{self.video_id}: empty sequence")


@dataclass
class TrainResult:
    model: AdaptationModel
    state: OptimizerState
    history: list[tuple[int, float]]  # (step, window loss)


def bce_loss(pred: Tensor4, target: Tensor4) -> tuple[float, Tensor4]:
    """Mean per-pixel binary cross-entropy and its exact gradient w.r.t. pred.

    Predictions are clamped to [1e-7, 1-1e-7] before the logs; outside the
    clamp the loss is locally constant, so the gradient there is zero.
    """
    if pred.dims != target.dims:
        raise DimensionMismatch(f"pred dims {pred.dims} != target dims {target.dims}")
    p = pred.data
    t = target.data
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    pc = np.clip(p, lo, hi)
    n = p.size
    loss = -float(np.sum(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))) / n
    active = (p >= lo) & (p <= hi)
    grad = np.where(active, (pc - t) / (n * pc * (1.0 - pc)), 0.0)
    return loss, Tensor4(grad)


def lr_schedule(hyper: Hyper, completed_epochs: int) -> float:
    """Step decay: lr0 * factor^(completed_epochs // decay_every_epochs)."""
    intervals = completed_epochs // hyper.decay_every_epochs
    return hyper.lr0 * hyper.decay_factor**intervals


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is <= max_norm.

    Returns the norm before clipping.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def sgd_step(
    model: AdaptationModel, grads: dict[str, np.ndarray], state: OptimizerState
) -> None:
    """One momentum-SGD update, in place: v <- m*v + (g + wd*w); w <- w - lr*v."""
    hyper = state.hyper
    for name, w in model.named_parameters():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} != param shape {w.shape}")
        v = state.momentum_buffers[name]
        v *= hyper.momentum
        v += g + hyper.weight_decay * w
        w -= state.lr * v
    state.step_count += 1


def train(
    model: AdaptationModel, dataset: list[TrainSample], config: TrainConfig
) -> TrainResult:
    """Run the full training loop; deterministic for a fixed config seed.

    Each epoch shuffles video order, splits every video into windows of
    clip_length frames, and performs one clipped SGD step per window
    (loss is the sum of per-frame BCE means). A checkpoint is written
    after every epoch when a path is configured.
    """
    if not dataset:
        raise EmptyDataset("no training samples")
    state = OptimizerState.fresh(model, config.hyper)
    rng = np.random.default_rng(config.seed)
    history: list[tuple[int, float]] = []

    for epoch in range(config.epochs):
        state.lr = lr_schedule(config.hyper, epoch)
        order = rng.permutation(len(dataset))
        for idx in order:
            sample = dataset[idx]
            for start in range(0, len(sample.frames), config.clip_length):
                if config.max_steps is not None and state.step_count >= config.max_steps:
                    break
                window = sample.frames[start : start + config.clip_length]
                targets = sample.targets[start : start + config.clip_length]
                try:
                    loss = _train_window(model, window, targets, state, config)
                except NonFinite as exc:
                    raise NonFinite(
                        f"non-finite values in video {sample.video_id!r} "
                        f"window starting at frame {start}: {exc}"
                    ) from exc
                history.append((state.step_count, loss))
        if config.checkpoint_path is not None:
            save_checkpoint(model, state.momentum_buffers, config.checkpoint_path)
        if config.max_steps is not None and state.step_count >= config.max_steps:
            break
    return TrainResult(model=model, state=state, history=history)


def _train_window(
    model: AdaptationModel,
    frames: list[Tensor4],
    targets: list[Tensor4],
    state: OptimizerState,
    config: TrainConfig,
) -> float:
    outputs, cache = forward_sequence(frames, model)
    loss = 0.0
    grad_outputs: list[Tensor4] = []
    for y, t in zip(outputs, targets):
        frame_loss, frame_grad = bce_loss(y, t)
        loss += frame_loss
        grad_outputs.append(frame_grad)
    grads = backward_sequence(cache, grad_outputs)
    cache.release()
    clip_gradients(grads, config.clip_norm)
    sgd_step(model, grads, state)
    return loss


def _canonical_dims(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    """Rank-1 tensors (biases) are encoded as (n, 1, 1, 1)."""
    if len(shape) == 4:
        return shape  # type: ignore[return-value]
    if len(shape) == 1:
        return (shape[0], 1, 1, 1)
    raise ShapeMismatch(f"cannot encode shape {shape}")


def _pack_tensors(named: list[tuple[str, np.ndarray]]) -> bytes:
    chunks: list[bytes] = []
    for name, arr in named:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<4I", *_canonical_dims(arr.shape)))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(
    model: AdaptationModel, momentum_buffers: dict[str, np.ndarray], path: str
) -> None:
    """Serialize parameters and momentum buffers at 32-bit precision.

    The write is atomic: a sibling temp file is renamed over the target.
    """
    named = model.named_parameters()
    for name, arr in named:
        if name not in momentum_buffers:
            raise ShapeMismatch(f"missing momentum buffer for {name}")
        if momentum_buffers[name].shape != arr.shape:
            raise ShapeMismatch(f"momentum buffer shape mismatch for {name}")

    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<H", CHECKPOINT_VERSION)
    body += struct.pack("<B", VARIANT_CODES[model.variant])
    body += struct.pack("<H", model.hidden_channels)
    body += struct.pack("<I", len(named))
    body += _pack_tensors(named)
    body += _pack_tensors([(name, momentum_buffers[name]) for name, _ in named])
    body += struct.pack("<I", zlib.crc32(bytes(body)))

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(body))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CorruptCheckpoint("truncated checkpoint")
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor_section(
    reader: _Reader, expected: list[tuple[str, np.ndarray]]
) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for exp_name, exp_arr in expected:
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        if name != exp_name:
            raise CorruptCheckpoint(f"unexpected tensor {name!r}, wanted {exp_name!r}")
        dims = reader.unpack("<4I")
        if dims != _canonical_dims(exp_arr.shape):
            raise CorruptCheckpoint(
                f"tensor {name!r} has dims {dims}, wanted {_canonical_dims(exp_arr.shape)}"
            )
        count = int(np.prod(dims))
        raw = reader.take(count * 4)
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        out[name] = values.reshape(exp_arr.shape)
    return out


def load_checkpoint(
    path: str, expect_variant: str | None = None
) -> tuple[AdaptationModel, dict[str, np.ndarray]]:
    """Load a checkpoint; validates magic, version, CRC, variant, and shapes."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise CorruptCheckpoint("file too small to be a checkpoint")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored_crc:
        raise CorruptCheckpoint("checksum mismatch")

    reader = _Reader(body)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    (version,) = reader.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    (variant_code,) = reader.unpack("<B")
    if variant_code not in CODE_VARIANTS:
        raise CorruptCheckpoint(f"unknown variant code {variant_code}")
    variant = CODE_VARIANTS[variant_code]
    if expect_variant is not None and variant != expect_variant:
        raise CorruptCheckpoint(
            f"variant mismatch: checkpoint holds {variant!r}, expected {expect_variant!r}"
        )
    (hidden_channels,) = reader.unpack("<H")
    (tensor_count,) = reader.unpack("<I")

    model = init_parameters(variant, rng_seed=0, hidden_channels=hidden_channels)
    named = model.named_parameters()
    if tensor_count != len(named):
        raise CorruptCheckpoint(
            f"{tensor_count} tensors in file, model needs {len(named)}"
        )
    params = _read_tensor_section(reader, named)
    buffers = _read_tensor_section(reader, named)
    if reader.pos != len(body):
        raise CorruptCheckpoint("trailing bytes after tensor data")
    for name, arr in named:
        arr[...] = params[name]
    return model, buffers
