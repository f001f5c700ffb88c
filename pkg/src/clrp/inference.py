"""Forward pass with recording of the instance-specific structure
information (ReLU masks and max-pool switches) that every backward
explanation consumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelContainer
from .tensor import (FLOAT, ShapeError, as_tensor, avgpool_forward, conv2d_forward,
                     fc_forward, maxpool_forward, relu_forward)


@dataclass(frozen=True)
class ForwardTrace:
    model: ModelContainer
    inputs: tuple[np.ndarray, ...]          # input activation of each layer
    masks: dict[int, np.ndarray]            # layer index -> ReLU mask
    switches: dict[int, np.ndarray]         # layer index -> max-pool switches
    logits: np.ndarray


@dataclass(frozen=True)
class Prediction:
    class_index: int
    class_name: str
    logit: float
    probability: float


def preprocess(image: np.ndarray, model: ModelContainer) -> np.ndarray:
    """uint8 [H,W,3] -> normalized float32 [C,H,W]."""
    c, h, w = model.input_shape
    if image.ndim != 3 or image.shape[2] != c:
        raise ShapeError(f"image must be [H,W,{c}], got {image.shape}",
                         dimension="channels")
    if image.shape[0] != h or image.shape[1] != w:
        raise ShapeError(f"image is {image.shape[0]}x{image.shape[1]}, model "
                         f"expects {h}x{w} (resize before preprocessing)",
                         dimension="spatial")
    x = image.astype(FLOAT) / FLOAT(255.0)
    x = (x - model.mean[None, None, :]) / model.std[None, None, :]
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def apply_layer(layer, x: np.ndarray):
    """Run one layer; returns (output, mask_or_None, switches_or_None)."""
    if layer.kind == "Conv2d":
        return conv2d_forward(x, layer.weights, layer.bias, layer.geom), None, None
    if layer.kind == "Linear":
        return fc_forward(x, layer.weights, layer.bias), None, None
    if layer.kind == "ReLU":
        out, mask = relu_forward(x)
        return out, mask, None
    if layer.kind == "MaxPool2d":
        out, switches = maxpool_forward(x, layer.window, layer.stride)
        return out, None, switches
    if layer.kind == "AvgPool2d":
        return avgpool_forward(x, layer.window, layer.stride), None, None
    if layer.kind == "Flatten":
        return x.reshape(-1), None, None
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def forward(model: ModelContainer, x: np.ndarray) -> ForwardTrace:
    x = as_tensor(x)
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape} != model input_shape "
                         f"{model.input_shape}", dimension="input")
    inputs = []
    masks: dict[int, np.ndarray] = {}
    switches: dict[int, np.ndarray] = {}
    for i, layer in enumerate(model.layers):
        inputs.append(x)
        x, mask, sw = apply_layer(layer, x)
        if mask is not None:
            masks[i] = mask
        if sw is not None:
            switches[i] = sw
    return ForwardTrace(model=model, inputs=tuple(inputs), masks=masks,
                        switches=switches, logits=x)


def replay(trace: ForwardTrace) -> np.ndarray:
    """Re-apply every layer to its recorded input; returns the logits."""
    out = None
    for i, layer in enumerate(trace.model.layers):
        out, _, _ = apply_layer(layer, trace.inputs[i])
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits.astype(np.float64) - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def predict_topk(trace: ForwardTrace, k: int) -> list[Prediction]:
    m = trace.logits.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    probs = softmax(trace.logits)
    order = np.argsort(-trace.logits, kind="stable")[:k]
    names = trace.model.class_names
    return [Prediction(int(i), names[int(i)], float(trace.logits[i]), float(probs[i]))
            for i in order]
