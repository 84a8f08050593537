"""Slice classifier: layer stack, softmax cross-entropy, dropout, SGD training.

A network is an ordered list of :class:`LayerSpec` ending in a single
softmax.  Dense layers implicitly flatten a preceding spatial map.  All
parameters are float64 and every random draw (initialisation, shuffling,
dropout masks) comes from a seeded ``numpy.random.Generator`` so that
training is bitwise reproducible.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .image import Image2D

log = logging.getLogger(__name__)

DEFAULT_CLASSES = ("neck", "lungs", "liver", "pelvis", "legs")
INPUT_SIZE = 256

LAYER_KINDS = ("conv", "maxpool", "relu", "dropout", "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    window: int = 0
    rate: float = 0.0
    units: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.filters < 1 or self.kernel < 1 or self.stride < 1 or self.pad < 0):
            raise ValueError(f"invalid conv layer {self}")
        if self.kind == "maxpool" and (self.window < 1 or self.stride < 1):
            raise ValueError(f"invalid maxpool layer {self}")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind == "dense" and self.units < 1:
            raise ValueError(f"dense layer needs units >= 1, got {self.units}")

    def to_text(self) -> str:
        if self.kind == "conv":
            return f"conv filters={self.filters} kernel={self.kernel} stride={self.stride} pad={self.pad}"
        if self.kind == "maxpool":
            return f"maxpool window={self.window} stride={self.stride}"
        if self.kind == "dropout":
            return f"dropout rate={self.rate!r}"
        if self.kind == "dense":
            return f"dense units={self.units}"
        return self.kind

    @classmethod
    def from_text(cls, line: str) -> "LayerSpec":
        kind, *fields = line.split()
        kwargs = {}
        for item in fields:
            key, _, value = item.partition("=")
            if key not in {"filters", "kernel", "stride", "pad", "window", "rate", "units"}:
                raise ValueError(f"unknown layer field {key!r} in {line!r}")
            kwargs[key] = float(value) if key == "rate" else int(value)
        return cls(kind, **kwargs)


def conv(filters: int, kernel: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec("conv", filters=filters, kernel=kernel, stride=stride, pad=pad)


def maxpool(window: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=window if stride is None else stride)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def dropout(rate: float = 0.5) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def default_architecture(num_classes: int = len(DEFAULT_CLASSES)) -> list[LayerSpec]:
    """Five conv layers, three pools, two dropout-regularised FC layers (single input channel)."""
    return [
        conv(64, 11, stride=4), relu(), maxpool(2),
        conv(192, 5, pad=2), relu(), maxpool(2),
        conv(384, 3, pad=1), relu(),
        conv(256, 3, pad=1), relu(),
        conv(256, 3, pad=1), relu(), maxpool(2),
        dense(512), relu(), dropout(0.5),
        dense(512), relu(), dropout(0.5),
        dense(num_classes), softmax(),
    ]


def scaled_down_architecture(num_classes: int = len(DEFAULT_CLASSES)) -> list[LayerSpec]:
    """Same topology as :func:`default_architecture` with far fewer filters/units, for CPU runs."""
    return [
        conv(8, 11, stride=4), relu(), maxpool(2),
        conv(16, 5, pad=2), relu(), maxpool(2),
        conv(24, 3, pad=1), relu(),
        conv(24, 3, pad=1), relu(),
        conv(16, 3, pad=1), relu(), maxpool(2),
        dense(64), relu(), dropout(0.5),
        dense(64), relu(), dropout(0.5),
        dense(num_classes), softmax(),
    ]


ARCHITECTURES: dict[str, Callable[[int], list[LayerSpec]]] = {
    "default": default_architecture,
    "scaled": scaled_down_architecture,
}


def _infer_shapes(specs: Sequence[LayerSpec], input_shape: tuple[int, int, int]):
    """Validate a layer stack; return per-layer parameter shapes."""
    if not specs or specs[-1].kind != "softmax":
        raise ValueError("network must end in a softmax layer")
    if sum(s.kind == "softmax" for s in specs) != 1:
        raise ValueError("network must contain exactly one softmax layer")
    shape: tuple = tuple(input_shape)
    param_shapes = []
    for i, s in enumerate(specs):
        if s.kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv cannot follow a dense layer")
            c, h, w = shape
            oh = T.conv_output_size(h, s.kernel, s.stride, s.pad)
            ow = T.conv_output_size(w, s.kernel, s.stride, s.pad)
            param_shapes.append({"W": (s.filters, c, s.kernel, s.kernel), "b": (s.filters,)})
            shape = (s.filters, oh, ow)
        elif s.kind == "maxpool":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: maxpool cannot follow a dense layer")
            c, h, w = shape
            if s.window > min(h, w):
                raise ValueError(f"layer {i}: pool window {s.window} larger than map {h}x{w}")
            shape = (c, (h - s.window) // s.stride + 1, (w - s.window) // s.stride + 1)
            param_shapes.append({})
        elif s.kind == "dense":
            fan_in = int(np.prod(shape))
            param_shapes.append({"W": (fan_in, s.units), "b": (s.units,)})
            shape = (s.units,)
        else:
            param_shapes.append({})
    if len(shape) != 1:
        raise ValueError("softmax must be preceded by a dense layer")
    return param_shapes, shape[0]


@dataclass(eq=False)
class ConvNetModel:
    specs: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    input_shape: tuple[int, int, int] = (1, INPUT_SIZE, INPUT_SIZE)
    seed: int = 0

    def __post_init__(self):
        self.specs = list(self.specs)
        self.class_names = tuple(self.class_names)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shapes, n_out = _infer_shapes(self.specs, self.input_shape)
        if n_out != len(self.class_names):
            raise ValueError(f"final dense layer has {n_out} units but {len(self.class_names)} classes are declared")
        if len(self.params) != len(self.specs):
            raise ValueError("params must hold one dict per layer")
        for i, (want, got) in enumerate(zip(shapes, self.params)):
            if set(want) != set(got) or any(tuple(got[k].shape) != want[k] for k in want):
                raise ValueError(f"layer {i} parameters do not match {want}")

    @classmethod
    def build(cls, specs: Sequence[LayerSpec], class_names: Sequence[str] = DEFAULT_CLASSES,
              input_shape=(1, INPUT_SIZE, INPUT_SIZE), seed: int = 0) -> "ConvNetModel":
        """He-initialised weights (std ``sqrt(2/fan_in)``), zero biases."""
        shapes, _ = _infer_shapes(specs, tuple(input_shape))
        rng = np.random.default_rng(seed)
        params = []
        for p in shapes:
            layer = {}
            if p:
                wshape = p["W"]
                fan_in = int(np.prod(wshape[1:])) if len(wshape) == 4 else wshape[0]
                layer["W"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=wshape)
                layer["b"] = np.zeros(p["b"])
            params.append(layer)
        return cls(list(specs), params, tuple(class_names), tuple(input_shape), seed)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def copy(self) -> "ConvNetModel":
        return copy.deepcopy(self)

    def describe(self) -> str:
        """Canonical text form of the architecture, used in model files."""
        lines = [
            f"input {' '.join(map(str, self.input_shape))}",
            f"classes {','.join(self.class_names)}",
            f"seed {self.seed}",
        ]
        lines += [s.to_text() for s in self.specs]
        return "\n".join(lines) + "\n"

    def parameter_count(self) -> int:
        return sum(v.size for layer in self.params for v in layer.values())


@dataclass
class ClassProbabilities:
    probs: np.ndarray
    class_names: tuple[str, ...]

    @property
    def predicted_index(self) -> int:
        return int(np.argmax(self.probs))  # lowest index wins ties

    @property
    def predicted(self) -> str:
        return self.class_names[self.predicted_index]

    def __getitem__(self, name: str) -> float:
        return float(self.probs[self.class_names.index(name)])


# -- forward / backward ------------------------------------------------------


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def apply_dropout(activations, rate: float, rng: np.random.Generator | None = None, training: bool = True):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    activations = np.asarray(activations, dtype=np.float64)
    if not training or rate == 0.0:
        return activations
    return activations * dropout_mask(activations.shape, rate, rng)


def _check_batch(model: ConvNetModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise T.ShapeError(
            f"model expects input of shape (N, {', '.join(map(str, model.input_shape))}), got {x.shape}"
        )
    return x


def _run(model: ConvNetModel, x: np.ndarray, train: bool, rng: np.random.Generator | None):
    """Forward to logits. Returns ``(logits, caches)``; caches is None unless ``train``."""
    caches = [] if train else None
    a = x
    for spec, p in zip(model.specs, model.params):
        k = spec.kind
        if k == "conv":
            a, cache = T.conv2d_forward(a, p["W"], p["b"], spec.stride, spec.pad)
        elif k == "maxpool":
            a, cache = T.maxpool2d_forward(a, spec.window, spec.stride)
        elif k == "relu":
            cache = a
            a = T.relu_forward(a)
        elif k == "dropout":
            if train and spec.rate > 0.0:
                cache = dropout_mask(a.shape, spec.rate, rng)
                a = a * cache
            else:
                cache = None
        elif k == "dense":
            flat = a.reshape(a.shape[0], -1)
            cache = (a.shape, flat)
            a = flat @ p["W"] + p["b"]
        else:  # softmax is applied by callers on the logits
            break
        if train:
            caches.append(cache)
    return a, caches


def _backprop(model: ConvNetModel, dlogits: np.ndarray, caches) -> list[dict[str, np.ndarray]]:
    grads: list[dict[str, np.ndarray]] = [{} for _ in model.specs]
    g = dlogits
    for i in range(len(caches) - 1, -1, -1):
        spec, p, cache = model.specs[i], model.params[i], caches[i]
        k = spec.kind
        if k == "conv":
            g, gw, gb = T.conv2d_backward(g, cache, input_grad=i > 0)
            grads[i] = {"W": gw, "b": gb}
        elif k == "maxpool":
            g = T.maxpool2d_backward(g, cache)
        elif k == "relu":
            g = T.relu_backward(g, cache)
        elif k == "dropout":
            if cache is not None:
                g = g * cache
        elif k == "dense":
            in_shape, flat = cache
            gx, gw = T.matmul_backward(g, flat, p["W"])
            grads[i] = {"W": gw, "b": g.sum(axis=0)}
            g = gx.reshape(in_shape)
    return grads


def forward(model: ConvNetModel, batch, mode: str = "eval", rng: np.random.Generator | None = None):
    """Class probabilities for ``batch[N,1,H,W]``.

    In ``"train"`` mode dropout is active and ``(probs, caches)`` is returned.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _check_batch(model, batch)
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng(model.seed)
    logits, caches = _run(model, x, train, rng)
    probs = T.softmax(logits)
    return (probs, caches) if train else probs


def loss_and_grad(model: ConvNetModel, batch, labels, rng: np.random.Generator | None = None):
    """Mean cross-entropy and its gradient w.r.t. every parameter.

    Dropout masks are drawn from ``rng`` (default: a generator seeded with
    ``model.seed``), so the same generator state reproduces the same masks.
    Returns ``(loss, grads)`` with ``grads`` shaped like ``model.params``.
    """
    x = _check_batch(model, batch)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise T.ShapeError(f"expected {x.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    if rng is None:
        rng = np.random.default_rng(model.seed)
    logits, caches = _run(model, x, True, rng)
    n = x.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_z
    loss = float(-log_p.mean())
    probs = np.exp(shifted - log_z[:, None])
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, _backprop(model, dlogits, caches)


# -- inference ---------------------------------------------------------------


def _image_batch(model: ConvNetModel, image) -> np.ndarray:
    pixels = image.pixels if isinstance(image, Image2D) else np.asarray(image, dtype=np.float64)
    if pixels.ndim != 2 or (1,) + pixels.shape != model.input_shape:
        raise T.ShapeError(
            f"model expects a {model.input_shape[1]}x{model.input_shape[2]} image, got {pixels.shape}"
        )
    return pixels[None, None]


def predict(model: ConvNetModel, image) -> ClassProbabilities:
    """Eval-mode probabilities for one preprocessed image."""
    probs = forward(model, _image_batch(model, image))[0]
    return ClassProbabilities(probs, model.class_names)


def predict_batch(model: ConvNetModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return np.concatenate([forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def penultimate_features(model: ConvNetModel, image) -> np.ndarray:
    """Activations entering the final softmax (the output of the last dense layer)."""
    if not any(s.kind == "dense" for s in model.specs):
        raise ValueError("model has no dense layer before softmax")
    logits, _ = _run(model, _image_batch(model, image), False, None)
    return logits[0]


def features_batch(model: ConvNetModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return np.concatenate(
        [_run(model, _check_batch(model, x[i : i + batch_size]), False, None)[0] for i in range(0, len(x), batch_size)]
    )


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0 or self.lr_decay_interval < 1:
            raise ValueError("epochs must be >= 0 and lr_decay_interval >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_interval)


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    loss: float
    train_accuracy: float
    held_out_accuracy: float | None


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, last_finite_loss: float | None):
        self.epoch, self.batch, self.last_finite_loss = epoch, batch, last_finite_loss
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} (last finite loss: {last_finite_loss})"
        )


def accuracy(model: ConvNetModel, images: np.ndarray, labels: np.ndarray) -> float:
    probs = predict_batch(model, images)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def train(model: ConvNetModel, dataset, config: TrainConfig, held_out=None,
          callback: Callable[[EpochRecord], None] | None = None):
    """Shuffled minibatch SGD with momentum, L2 weight decay and step decay.

    ``dataset`` and ``held_out`` are ``(images[N,1,H,W], labels[N])`` pairs.
    The input model is not modified; returns ``(trained_model, epoch_log)``.
    """
    x = _check_batch(model, dataset[0])
    y = np.asarray(dataset[1], dtype=np.intp)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if len(y) != len(x):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    velocity = [{k: np.zeros_like(v) for k, v in layer.items()} for layer in model.params]
    history: list[EpochRecord] = []
    last_finite = None
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(x))
        total, correct = 0.0, 0
        for b, start in enumerate(range(0, len(x), config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grad(model, x[idx], y[idx], rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, last_finite)
            last_finite = loss
            total += loss * len(idx)
            for layer, grad, vel in zip(model.params, grads, velocity):
                for k, g in grad.items():
                    if k == "W" and config.weight_decay:
                        g = g + config.weight_decay * layer[k]
                    vel[k] *= config.momentum
                    vel[k] -= lr * g
                    layer[k] += vel[k]
        train_acc = accuracy(model, x, y)
        held = accuracy(model, held_out[0], held_out[1]) if held_out is not None else None
        rec = EpochRecord(epoch, lr, total / len(x), train_acc, held)
        history.append(rec)
        log.info("epoch %d lr %.4g loss %.5f train acc %.4f held-out acc %s",
                 epoch, lr, rec.loss, train_acc, "-" if held is None else f"{held:.4f}")
        if callback:
            callback(rec)
    return model, history


# -- model files -------------------------------------------------------------

MAGIC = b"SLICENET"
FORMAT_VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class ModelFileError(Exception):
    """Base class for unreadable model files."""


class ModelVersionError(ModelFileError):
    pass


class ModelTruncatedError(ModelFileError):
    pass


class ModelChecksumError(ModelFileError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def model_to_bytes(model: ConvNetModel) -> bytes:
    text = model.describe().encode("utf-8")
    parts = [MAGIC + str(FORMAT_VERSION).encode(), struct.pack("<I", len(text)), text]
    for layer in model.params:
        for key in ("W", "b"):
            if key in layer:
                parts.append(np.ascontiguousarray(layer[key], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def _parse_description(text: str):
    lines = text.splitlines()
    header = {}
    for line in lines[:3]:
        key, _, value = line.partition(" ")
        header[key] = value
    if set(header) != {"input", "classes", "seed"}:
        raise ModelFileError(f"malformed model description header: {lines[:3]}")
    input_shape = tuple(int(v) for v in header["input"].split())
    classes = tuple(header["classes"].split(","))
    specs = [LayerSpec.from_text(line) for line in lines[3:] if line.strip()]
    return specs, classes, input_shape, int(header["seed"])


def model_from_bytes(data: bytes) -> ConvNetModel:
    head = len(MAGIC) + 1
    if len(data) < head or not data.startswith(MAGIC):
        raise ModelFileError("not a model file (bad magic)")
    version = data[len(MAGIC) : head]
    if version != str(FORMAT_VERSION).encode():
        raise ModelVersionError(f"unsupported model format version {version!r}, expected {FORMAT_VERSION}")
    if len(data) < head + 4 + 8:
        raise ModelTruncatedError(f"model file truncated: {len(data)} bytes")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if fnv1a64(body) != stored:
        raise ModelChecksumError("model file checksum mismatch (truncated or corrupted)")
    (text_len,) = struct.unpack_from("<I", body, head)
    offset = head + 4
    text = body[offset : offset + text_len].decode("utf-8")
    offset += text_len
    specs, classes, input_shape, seed = _parse_description(text)
    shapes, _ = _infer_shapes(specs, input_shape)
    params = []
    for layer_shapes in shapes:
        layer = {}
        for key in ("W", "b"):
            if key in layer_shapes:
                count = int(np.prod(layer_shapes[key]))
                end = offset + 8 * count
                if end > len(body):
                    raise ModelTruncatedError("parameter payload shorter than the described architecture")
                layer[key] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(np.float64)
                layer[key] = layer[key].reshape(layer_shapes[key])
                offset = end
        params.append(layer)
    if offset != len(body):
        raise ModelTruncatedError(f"{len(body) - offset} unexpected trailing bytes after parameters")
    return ConvNetModel(specs, params, classes, input_shape, seed)


def save_model(model: ConvNetModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ConvNetModel:
    return model_from_bytes(Path(path).read_bytes())
