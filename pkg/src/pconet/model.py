"""PCONet model assembly, training loop, evaluation, text summary, and
binary checkpoints.

The architecture is five conv(3x3, s=1, ReLU) + maxpool(2x2, s=2) blocks
with 32/32/64/64/128 filters on a 224x224x3 input, then
Flatten -> Dense(128, ReLU, dropout 0.5) -> Dense(256, ReLU, dropout 0.5)
-> Dense(2, sigmoid). 582,690 trainable parameters.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pconet import data as data_mod
from pconet import metrics as metrics_mod
from pconet import nn
from pconet.optim import Adam, bce_loss
from pconet.tensor import ShapeError, conv2d_output_hw

CLASS_NAMES = ("infected", "not infected")
INPUT_SHAPE = (224, 224, 3)

CHECKPOINT_MAGIC = b"PCON"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base for unreadable or mismatched checkpoint files."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Record names or tensor shapes do not match the model being loaded."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class LayerRow:
    """One architecture-table row; dropout > 0 appends an (untabulated)
    dropout layer after the activation."""

    title: str
    key: str
    kind: str  # conv | pool | flatten | dense
    filters: int = 0
    units: int = 0
    activation: str = ""
    dropout: float = 0.0


@dataclass(frozen=True)
class ModelSpec:
    rows: tuple[LayerRow, ...]
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    class_names: tuple[str, str] = CLASS_NAMES


PCONET_ROWS = (
    LayerRow("Conv_1", "conv_1", "conv", filters=32, activation="relu"),
    LayerRow("Max_pool_1", "max_pool_1", "pool"),
    LayerRow("Conv_2", "conv_2", "conv", filters=32, activation="relu"),
    LayerRow("Max_pool_2", "max_pool_2", "pool"),
    LayerRow("Conv_3", "conv_3", "conv", filters=64, activation="relu"),
    LayerRow("Max_pool_3", "max_pool_3", "pool"),
    LayerRow("Conv_4", "conv_4", "conv", filters=64, activation="relu"),
    LayerRow("Max_pool_4", "max_pool_4", "pool"),
    LayerRow("Conv_5", "conv_5", "conv", filters=128, activation="relu"),
    LayerRow("Max_pool_5", "max_pool_5", "pool"),
    LayerRow("Flattening Layer", "flatten", "flatten"),
    LayerRow("Dense Layer 1", "dense_1", "dense", units=128, activation="relu", dropout=0.5),
    LayerRow("Dense Layer 2", "dense_2", "dense", units=256, activation="relu", dropout=0.5),
    LayerRow("Output Layer", "output", "dense", units=2, activation="sigmoid"),
)


def pconet_spec() -> ModelSpec:
    return ModelSpec(PCONET_ROWS)


class Model:
    def __init__(self, spec: ModelSpec, layers: list[nn.Layer],
                 param_layers: list[tuple[str, nn.Layer]],
                 row_shapes: list[tuple[LayerRow, tuple[int, ...]]]):
        self.spec = spec
        self.layers = layers
        self._param_layers = param_layers
        self.row_shapes = row_shapes
        self.train_state: TrainState | None = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, training=training)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def named_params(self) -> dict[str, np.ndarray]:
        return {
            f"{key}/{pname}": arr
            for key, layer in self._param_layers
            for pname, arr in layer.params.items()
        }

    def named_grads(self) -> dict[str, np.ndarray]:
        return {
            f"{key}/{pname}": arr
            for key, layer in self._param_layers
            for pname, arr in layer.grads.items()
        }

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def astype(self, dtype) -> "Model":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def seed_dropout(self, seed: int) -> None:
        j = 0
        for layer in self.layers:
            if isinstance(layer, nn.Dropout):
                layer.rng = np.random.default_rng([seed, 1000 + j])
                j += 1

    def shape_trace(self) -> list[tuple[int, ...]]:
        return [shape for _, shape in self.row_shapes]

    def predict(self, image: np.ndarray) -> tuple[str, tuple[float, float]]:
        """Classify one preprocessed image. Ties break to class index 0
        ("infected"): conservative toward flagging disease."""
        if image.shape != self.spec.input_shape:
            raise ShapeError(
                f"expected one image of shape {self.spec.input_shape}, got {tuple(image.shape)}"
            )
        probs = self.forward(image[None].astype(np.float32), training=False)[0]
        s0, s1 = float(probs[0]), float(probs[1])
        label = self.spec.class_names[0 if s0 >= s1 else 1]
        return label, (s0, s1)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Assemble runtime layers from an architecture table, checking that
    consecutive shapes chain legally, and Glorot-initialize weights."""
    policy = nn.InitPolicy(seed=seed)
    layers: list[nn.Layer] = []
    param_layers: list[tuple[str, nn.Layer]] = []
    row_shapes: list[tuple[LayerRow, tuple[int, ...]]] = []
    cur: tuple[int, ...] = tuple(spec.input_shape)
    stream = 0
    for row in spec.rows:
        if row.kind == "conv":
            if len(cur) != 3:
                raise ShapeError(f"{row.title}: conv needs (h,w,c) input, have {cur}")
            h, w, c = cur
            layer = nn.Conv2D(c, row.filters, kernel_size=3, stride=1, dtype=dtype)
            nn.init_weights(layer, policy, stream)
            stream += 1
            oh, ow = conv2d_output_hw(h, w, 3, 3, 1)
            if oh < 1 or ow < 1:
                raise ShapeError(f"{row.title}: input {h}x{w} too small for 3x3 kernel")
            cur = (oh, ow, row.filters)
            layers.append(layer)
            param_layers.append((row.key, layer))
            if row.activation:
                layers.append(nn.Activation(row.activation))
        elif row.kind == "pool":
            if len(cur) != 3 or cur[0] < 2 or cur[1] < 2:
                raise ShapeError(f"{row.title}: pool needs (h>=2,w>=2,c) input, have {cur}")
            layers.append(nn.MaxPool2D())
            cur = (cur[0] // 2, cur[1] // 2, cur[2])
        elif row.kind == "flatten":
            if len(cur) != 3:
                raise ShapeError(f"{row.title}: flatten needs (h,w,c) input, have {cur}")
            layers.append(nn.Flatten())
            cur = (cur[0] * cur[1] * cur[2],)
        elif row.kind == "dense":
            if len(cur) != 1:
                raise ShapeError(f"{row.title}: dense needs flat input, have {cur}")
            layer = nn.Dense(cur[0], row.units, dtype=dtype)
            nn.init_weights(layer, policy, stream)
            stream += 1
            cur = (row.units,)
            layers.append(layer)
            param_layers.append((row.key, layer))
            if row.activation:
                layers.append(nn.Activation(row.activation))
            if row.dropout > 0:
                layers.append(nn.Dropout(row.dropout))
        else:
            raise ValueError(f"unknown layer kind {row.kind!r}")
        row_shapes.append((row, cur))
    if layers and isinstance(layers[0], nn.Conv2D):
        layers[0].need_input_grad = False  # nothing upstream consumes it
    model = Model(spec, layers, param_layers, row_shapes)
    model.seed_dropout(seed)
    return model


def build_pconet(seed: int = 0, dtype=np.float32) -> Model:
    return build_model(pconet_spec(), seed=seed, dtype=dtype)


_ACT_LABELS = {"relu": "ReLu", "sigmoid": "Sigmoid"}


def summary(model: Model) -> str:
    """Three-column architecture table (Type | Specifications | Output
    Size) plus parameter totals; the last line is the total count."""
    lines = ["Type | Specifications | Output Size"]
    for row, shape in model.row_shapes:
        if row.kind == "conv":
            spec_str = f"{row.filters}(3, 3), s=1"
        elif row.kind == "pool":
            spec_str = "(2, 2), s=2"
        elif row.kind == "dense":
            spec_str = f"{row.units}, {_ACT_LABELS.get(row.activation, row.activation)}"
        else:
            spec_str = ""
        if len(shape) == 3:
            size_str = f"({shape[0]}, {shape[1]}, {shape[2]})"
        else:
            size_str = f"(None, {shape[0]})"
        lines.append(f"{row.title} | {spec_str} | {size_str}")
    total = model.param_count()
    lines.append("")
    lines.append(f"Trainable params: {total:,}")
    lines.append(f"Total params: {total:,}")
    return "\n".join(lines)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-5
    seed: int = 0
    augment: bool = True
    train_dir: Path | None = None
    val_dir: Path | None = None
    log_path: Path | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")


@dataclass
class TrainState:
    """Optimizer moments and progress counters for the checkpoint trailer."""

    epoch: int
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    precision: float
    recall: float
    confusion: metrics_mod.ConfusionMatrix
    n: int


@dataclass
class TrainResult:
    log: list[metrics_mod.EpochRow]
    state: TrainState


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    """Ceiling division: the trailing short batch is kept."""
    return math.ceil(n_items / batch_size)


def evaluate(model: Model, items: list, batch_size: int = 16) -> EvalResult:
    """Eval-mode pass. `precision`/`recall` are micro-averaged over both
    sigmoid outputs at a 0.5 threshold (the quantity the per-epoch curve
    log tracks); the per-class view comes from
    ``metrics.report(result.confusion)``."""
    if not items:
        raise ValueError("empty dataset")
    loss_sum = 0.0
    total = 0
    tp = fp = fn = 0
    preds: list[np.ndarray] = []
    actuals: list[np.ndarray] = []
    for batch in data_mod.batches(items, batch_size):
        probs = model.forward(batch.images, training=False)
        loss, _ = bce_loss(probs, batch.labels)
        b = len(batch)
        loss_sum += loss * b
        total += b
        preds.append(np.where(probs[:, 1] > probs[:, 0], 1, 0))
        actuals.append(batch.labels.argmax(axis=1))
        pos = probs > 0.5
        truth = batch.labels > 0.5
        tp += int((pos & truth).sum())
        fp += int((pos & ~truth).sum())
        fn += int((~pos & truth).sum())
    cm = metrics_mod.confusion(np.concatenate(preds), np.concatenate(actuals))
    accuracy = float(np.trace(cm.counts)) / total
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalResult(loss_sum / total, accuracy, precision, recall, cm, total)


def train(model: Model, train_items: list, val_items: list, config: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Run exactly config.epochs epochs of Adam/BCE training with
    per-epoch reshuffling; after each epoch, evaluate the train and
    validation sets and append a row to the curve log (a fresh log file
    per run). Aborts with epoch/step diagnostics on a non-finite loss."""
    if not train_items or not val_items:
        raise ValueError("training and validation sets must both be non-empty")
    adam = Adam(lr=config.learning_rate)
    model.seed_dropout(config.seed)
    log_path = Path(config.log_path) if config.log_path else None
    if log_path is not None and log_path.exists():
        log_path.unlink()
    rows: list[metrics_mod.EpochRow] = []
    for epoch in range(1, config.epochs + 1):
        aug_rng = (
            np.random.default_rng([config.seed, epoch, 1]) if config.augment else None
        )
        for step, batch in enumerate(
            data_mod.batches(
                train_items, config.batch_size,
                shuffle_seed=config.seed, epoch=epoch, augment_rng=aug_rng,
            ),
            start=1,
        ):
            probs = model.forward(batch.images, training=True)
            loss, dprobs = bce_loss(probs, batch.labels)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, step)
            model.zero_grads()
            model.backward(dprobs)
            adam.step(model.named_params(), model.named_grads())
        tr = evaluate(model, train_items, config.batch_size)
        va = evaluate(model, val_items, config.batch_size)
        row = metrics_mod.EpochRow(
            epoch, tr.loss, tr.accuracy, va.loss, va.accuracy, va.precision, va.recall
        )
        rows.append(row)
        if log_path is not None:
            metrics_mod.curve_log_append(log_path, row)
        if on_epoch is not None:
            on_epoch(row)
    state = TrainState(config.epochs, adam.t, dict(adam.m), dict(adam.v))
    model.train_state = state
    return TrainResult(rows, state)


def save_checkpoint(model: Model, path, train_state: TrainState | None = None) -> None:
    """Binary layout: magic "PCON" | u32 version | u32 record count |
    per record (u16 name length, name, u8 rank, u32 dims, raw f32 data) |
    u8 trailer-presence byte | optional trailer (u32 epoch, u64 step,
    then per record the raw f32 first and second moments). All integers
    and floats little-endian; float64 models are stored as float32."""
    params = model.named_params()
    if train_state is None:
        train_state = model.train_state
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, arr in params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if train_state is None:
        chunks.append(struct.pack("<B", 0))
    else:
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<IQ", train_state.epoch, train_state.step))
        for name in params:
            chunks.append(np.ascontiguousarray(train_state.m[name], dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(train_state.v[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, origin: str):
        self.buf = buf
        self.pos = 0
        self.origin = origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"{self.origin}: truncated (needed {n} bytes at offset {self.pos})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def load_checkpoint(path, spec: ModelSpec | None = None) -> Model:
    """Rebuild the model for `spec` (PCONet by default) and load its
    parameters; the stored record names and shapes must match the model's
    parameter table exactly."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), str(path))
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )
    (count,) = reader.unpack("<I")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        records[name] = reader.floats(int(np.prod(dims))).reshape(dims)

    model = build_model(spec if spec is not None else pconet_spec(), seed=0)
    params = model.named_params()
    if list(params) != list(records):
        raise CheckpointShapeError(
            f"{path}: record names {list(records)} do not match model parameters {list(params)}"
        )
    for name, arr in params.items():
        if records[name].shape != arr.shape:
            raise CheckpointShapeError(
                f"{path}: {name}: stored shape {records[name].shape} != expected {arr.shape}"
            )
        arr[...] = records[name]

    (present,) = reader.unpack("<B")
    if present == 1:
        epoch, step = reader.unpack("<IQ")
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for name, arr in params.items():
            m[name] = reader.floats(arr.size).reshape(arr.shape)
            v[name] = reader.floats(arr.size).reshape(arr.shape)
        model.train_state = TrainState(epoch, step, m, v)
    elif present != 0:
        raise CheckpointError(f"{path}: invalid trailer presence byte {present}")
    if reader.pos != len(reader.buf):
        raise CheckpointError(f"{path}: {len(reader.buf) - reader.pos} unexpected trailing bytes")
    return model
