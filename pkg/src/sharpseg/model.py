"""U-Net style encoder-decoder with plain or sharpening skip connections.

Five encoder blocks (two 3x3 same-padded convs + ReLU each, 2x2 max-pool
after the first four), four decoder blocks (2x2 up-convolution, skip fusion
by channel concatenation, two 3x3 convs + ReLU), and a 1x1 output head.
With ``connection="sharp"`` every encoder feature map passes through a fixed
depthwise Laplacian filter before fusion; this adds zero learnable
parameters, so plain and sharp builds have byte-identical parameter sets.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import data, ops
from .autograd import Parameter, Tape
from .ops import ShapeError

# 3x3 Laplacian high-pass kernel: zero-sum, point-symmetric, frozen.
SHARP_KERNEL = np.array([[-1.0, -1.0, -1.0],
                         [-1.0, 8.0, -1.0],
                         [-1.0, -1.0, -1.0]], dtype=np.float32)
SHARP_KERNEL.setflags(write=False)

CHECKPOINT_FORMAT = "sharpseg-checkpoint"
CHECKPOINT_VERSION = 1
CONNECTIONS = ("plain", "sharp")


class CheckpointError(ValueError):
    """A checkpoint directory is malformed or incompatible."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 1  # 1 = sigmoid head, >= 2 = per-pixel softmax head
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)
    connection: str = "plain"
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        widths = tuple(int(w) for w in self.widths)
        if len(widths) != 5 or any(w < 1 for w in widths):
            raise ValueError(f"widths must be 5 positive ints, got {self.widths}")
        object.__setattr__(self, "widths", widths)
        if self.connection not in CONNECTIONS:
            raise ValueError(f"connection must be one of {CONNECTIONS}, "
                             f"got {self.connection!r}")

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels,
                "num_classes": self.num_classes,
                "widths": list(self.widths),
                "connection": self.connection,
                "seed": self.seed}

    @staticmethod
    def from_dict(doc: dict) -> "ModelConfig":
        return ModelConfig(in_channels=doc["in_channels"],
                           num_classes=doc["num_classes"],
                           widths=tuple(doc["widths"]),
                           connection=doc["connection"],
                           seed=doc.get("seed", 0))


class Model:
    """Parameter registry plus the config that shaped it."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def conv_weights(self, layer: str) -> ops.ConvWeights:
        return ops.ConvWeights(self.params[f"{layer}.kernel"].value,
                               self.params[f"{layer}.bias"].value)


def build_model(config: ModelConfig) -> Model:
    """Instantiate parameters: He-normal kernels, zero biases, seeded.

    The draw order is fixed and connection-independent, so plain and sharp
    builds with equal seeds produce identical initial parameters.
    """
    rng = np.random.default_rng(config.seed)
    params: dict[str, Parameter] = {}

    def add(name, kernel_shape):
        if name.endswith(".up"):
            fan_in = kernel_shape[0] * kernel_shape[2] * kernel_shape[3]
            out_ch = kernel_shape[1]
        else:
            fan_in = kernel_shape[1] * kernel_shape[2] * kernel_shape[3]
            out_ch = kernel_shape[0]
        std = np.float32(np.sqrt(2.0 / fan_in))
        kernel = rng.standard_normal(kernel_shape, dtype=np.float32) * std
        params[f"{name}.kernel"] = Parameter(f"{name}.kernel", kernel)
        params[f"{name}.bias"] = Parameter(f"{name}.bias",
                                           np.zeros(out_ch, dtype=np.float32))

    widths = config.widths
    prev = config.in_channels
    for i, w in enumerate(widths, start=1):
        add(f"enc{i}.conv1", (w, prev, 3, 3))
        add(f"enc{i}.conv2", (w, w, 3, 3))
        prev = w
    for i in range(4, 0, -1):
        add(f"dec{i}.up", (widths[i], widths[i - 1], 2, 2))
        add(f"dec{i}.conv1", (widths[i - 1], 2 * widths[i - 1], 3, 3))
        add(f"dec{i}.conv2", (widths[i - 1], widths[i - 1], 3, 3))
    add("head", (config.num_classes, widths[0], 1, 1))
    return Model(config, params)


def sharp_block(enc: np.ndarray) -> np.ndarray:
    """Depthwise Laplacian sharpening of an encoder feature map; shape and
    parameter count are unchanged."""
    return ops.depthwise_sharp(enc, SHARP_KERNEL)


def count_params(model: Model) -> int:
    """Total learnable scalars; frozen sharp kernels contribute nothing."""
    return sum(p.value.size for p in model.parameters())


@dataclass
class ForwardTrace:
    tape: Tape
    logits_id: int
    fusion_ids: dict[int, int]  # concat level (1 = full resolution) -> node id

    @property
    def logits(self) -> np.ndarray:
        return self.tape.value(self.logits_id)


def run_forward(model: Model, batch: np.ndarray, tape: Tape) -> ForwardTrace:
    """Record the full network on a tape and return the trace handles."""
    ops.check_tensor(batch, "batch")
    cfg = model.config
    if batch.shape[1] != cfg.in_channels:
        raise ShapeError(f"batch has {batch.shape[1]} channels, model expects "
                         f"{cfg.in_channels} (batch shape {batch.shape})")
    if batch.shape[2] % 16 or batch.shape[3] % 16:
        raise ShapeError(f"height and width must be divisible by 16 (four "
                         f"poolings), got {batch.shape[2]}x{batch.shape[3]}")

    def conv(layer, x):
        k = tape.parameter(model.params[f"{layer}.kernel"])
        b = tape.parameter(model.params[f"{layer}.bias"])
        return tape.conv2d(x, k, b, padding="same")

    def upconv(layer, x):
        k = tape.parameter(model.params[f"{layer}.kernel"])
        b = tape.parameter(model.params[f"{layer}.bias"])
        return tape.transposed_conv2d(x, k, b)

    x = tape.input(batch)
    skips: dict[int, int] = {}
    for i in range(1, 6):
        x = tape.relu(conv(f"enc{i}.conv1", x))
        x = tape.relu(conv(f"enc{i}.conv2", x))
        if i < 5:
            skips[i] = x
            x = tape.maxpool2x2(x)

    fusion_ids: dict[int, int] = {}
    for i in range(4, 0, -1):
        up = upconv(f"dec{i}.up", x)
        skip = skips[i]
        if cfg.connection == "sharp":
            skip = tape.depthwise_sharp(skip, SHARP_KERNEL)
        if tape.value(skip).shape[2:] != tape.value(up).shape[2:]:
            raise ShapeError(f"fusion {i}: encoder {tape.value(skip).shape} and "
                             f"decoder {tape.value(up).shape} spatial dims differ")
        x = tape.concat_channels(skip, up)
        fusion_ids[i] = x
        x = tape.relu(conv(f"dec{i}.conv1", x))
        x = tape.relu(conv(f"dec{i}.conv2", x))

    k = tape.parameter(model.params["head.kernel"])
    b = tape.parameter(model.params["head.bias"])
    logits = tape.conv2d(x, k, b, padding="same")
    return ForwardTrace(tape, logits, fusion_ids)


def forward(model: Model, batch: np.ndarray, tape: Optional[Tape] = None) -> np.ndarray:
    """Logits of shape (n, num_classes, h, w); records onto ``tape`` if given."""
    trace = run_forward(model, batch, tape if tape is not None else Tape())
    return trace.logits


# ------------------------------------------------------------ checkpoints

def save_checkpoint(model: Model, path, epoch: int = 0,
                    best_val_loss: Optional[float] = None) -> None:
    """Write config + every parameter blob into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    records = []
    for idx, p in enumerate(model.parameters()):
        fname = f"p{idx:03d}.tnsr"
        blob = p.value if p.value.ndim == 4 else p.value.reshape(-1, 1, 1, 1)
        data.save_tensor(os.path.join(path, fname), blob)
        records.append({"name": p.name, "shape": list(p.value.shape),
                        "file": fname})
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "config": model.config.to_dict(), "epoch": epoch,
           "best_val_loss": best_val_loss, "params": records}
    with open(os.path.join(path, "model.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_checkpoint_meta(path) -> dict:
    manifest = os.path.join(path, "model.json")
    if not os.path.exists(manifest):
        raise CheckpointError(f"{path}: no model.json manifest")
    with open(manifest, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{manifest}: unparseable: {e}") from e
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest}: bad format marker "
                              f"{doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{manifest}: unsupported version "
                              f"{doc.get('version')!r}")
    return doc


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> Model:
    """Rebuild a model from a checkpoint directory, bit-exact.

    With ``expected_config`` given, any architecture field mismatch (seed
    aside) is a :class:`CheckpointError`.
    """
    doc = read_checkpoint_meta(path)
    config = ModelConfig.from_dict(doc["config"])
    if expected_config is not None:
        if replace(config, seed=0) != replace(expected_config, seed=0):
            raise CheckpointError(
                f"checkpoint config {config} does not match expected "
                f"{expected_config}")
    model = build_model(config)
    seen = set()
    for rec in doc["params"]:
        name = rec["name"]
        if name not in model.params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        blob = data.load_tensor(os.path.join(path, rec["file"]))
        value = blob.reshape(rec["shape"])
        if tuple(value.shape) != model.params[name].value.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} shape {value.shape} does not "
                f"match model shape {model.params[name].value.shape}")
        model.params[name].value = np.ascontiguousarray(value)
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return model
