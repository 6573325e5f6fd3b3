"""Softmax MLP classifiers: confidences, top/runner-up prediction, margins, JSON I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import sigmoid_value, softplus_value
from .numstats import RngStream, sample_gaussian

ACTIVATIONS = ("softplus", "tanh")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    top: int
    runner_up: int
    margin: float


class MlpClassifier:
    """Fully connected network; hidden layers use `activation`, the output is a softmax."""

    def __init__(self, layers: Sequence, activation: str = "softplus"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not layers:
            raise ValueError("need at least one layer")
        parsed = []
        fan_in = None
        for w, b in layers:
            w = np.array(w, dtype=float, ndmin=2)
            b = np.array(b, dtype=float).reshape(-1)
            if w.shape[0] != b.shape[0]:
                raise DimensionError("bias length must equal the weight row count")
            if fan_in is not None and w.shape[1] != fan_in:
                raise DimensionError("consecutive layer sizes do not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("weights must be finite")
            w.setflags(write=False)
            b.setflags(write=False)
            parsed.append((w, b))
            fan_in = w.shape[0]
        if fan_in < 2:
            raise ValueError("need at least two output classes")
        self.layers = tuple(parsed)
        self.activation = activation

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w, _ in self.layers]

    def _act(self, a):
        return softplus_value(a) if self.activation == "softplus" else np.tanh(a)

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"expected input dimension {self.input_dim}, got {x.shape[-1]}")
        h = x
        for w, b in self.layers[:-1]:
            h = self._act(h @ w.T + b)
        w, b = self.layers[-1]
        return h @ w.T + b

    def confidences(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def with_layers(self, layers) -> "MlpClassifier":
        return MlpClassifier(layers, self.activation)

    def __eq__(self, other):
        if not isinstance(other, MlpClassifier) or other.activation != self.activation:
            return False
        if len(other.layers) != len(self.layers):
            return False
        return all(np.array_equal(w1, w2) and np.array_equal(b1, b2)
                   for (w1, b1), (w2, b2) in zip(self.layers, other.layers))

    def __repr__(self):
        return f"MlpClassifier(dims={self.dims}, activation={self.activation!r})"


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def top_two(conf: np.ndarray):
    """Top and runner-up indices along the last axis, lowest index winning ties."""
    conf = np.asarray(conf)
    top = np.argmax(conf, axis=-1)
    masked = conf.copy()
    np.put_along_axis(masked, np.expand_dims(top, -1), -np.inf, axis=-1)
    runner = np.argmax(masked, axis=-1)
    return top, runner


def confidences(model: MlpClassifier, x) -> np.ndarray:
    return model.confidences(x)


def predict(model: MlpClassifier, x) -> Prediction:
    conf = model.confidences(x)
    if conf.ndim != 1:
        raise DimensionError("predict takes a single input; use predict_batch")
    top, runner = top_two(conf)
    return Prediction(int(top), int(runner), float(conf[top] - conf[runner]))


def predict_batch(model: MlpClassifier, xs) -> np.ndarray:
    return np.argmax(model.confidences(xs), axis=-1)


def margin(model: MlpClassifier, x, y1: int, y2: int) -> float:
    c = model.num_classes
    for y in (y1, y2):
        if not (0 <= int(y) < c):
            raise ValueError(f"class label {y} outside [0, {c})")
    conf = model.confidences(x)
    return conf[..., y1] - conf[..., y2]


def init_random(d: int, hidden: Sequence[int], num_classes: int, rng: RngStream,
                activation: str = "softplus") -> MlpClassifier:
    """He-style initialisation: weights N(0, 2/fan_in), zero biases."""
    sizes = [d, *hidden, num_classes]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = sample_gaussian(rng, (fan_out, fan_in), np.sqrt(2.0 / fan_in))
        layers.append((w, np.zeros(fan_out)))
    return MlpClassifier(layers, activation)


def input_jacobian(model: MlpClassifier, x) -> np.ndarray:
    """d f / d x: shape (C, d) for one input, (B, C, d) for a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    jac = np.broadcast_to(np.eye(h.shape[1]), (h.shape[0], h.shape[1], h.shape[1]))
    for w, b in model.layers[:-1]:
        a = h @ w.T + b
        deriv = sigmoid_value(a) if model.activation == "softplus" else 1.0 - np.tanh(a) ** 2
        jac = deriv[:, :, None] * np.einsum("md,bdk->bmk", w, jac)
        h = model._act(a)
    w, b = model.layers[-1]
    f = softmax(h @ w.T + b)
    jz = np.einsum("md,bdk->bmk", w, jac)
    jf = f[:, :, None] * (jz - np.einsum("bm,bmk->bk", f, jz)[:, None, :])
    return jf[0] if single else jf


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def to_json(model: MlpClassifier) -> str:
    """JSON text with every weight written to 17 significant digits."""
    layer_txt = []
    for w, b in model.layers:
        rows = ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in w)
        layer_txt.append('{"w":[' + rows + '],"b":[' + ",".join(_fmt(v) for v in b) + "]}")
    dims = ",".join(str(d) for d in model.dims)
    return ('{"dims":[' + dims + '],"activation":' + json.dumps(model.activation)
            + ',"layers":[' + ",".join(layer_txt) + "]}")


def from_json(text: str) -> MlpClassifier:
    doc = json.loads(text)
    model = MlpClassifier([(l["w"], l["b"]) for l in doc["layers"]], doc["activation"])
    if model.dims != list(doc["dims"]):
        raise DimensionError(f"declared dims {doc['dims']} disagree with layers {model.dims}")
    return model


def save(model: MlpClassifier, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(model))
        fh.write("\n")


def load(path) -> MlpClassifier:
    with open(path) as fh:
        return from_json(fh.read())
