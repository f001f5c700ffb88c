"""Load, validate, save and describe models in the container format.

A container is a directory holding ``manifest.json`` plus a single
``weights.bin`` of little-endian float32 values, row-major, concatenated in
manifest order. The manifest schema ships with the package as
``manifest.schema.json``; the formats are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import FLOAT, ConvGeometry

SUPPORTED_KINDS = ("Conv2d", "Linear", "ReLU", "MaxPool2d", "AvgPool2d", "Flatten")


class ModelFormatError(Exception):
    """Base error for container problems; message names the offending layer."""


class ManifestSchemaError(ModelFormatError):
    pass


class UnsupportedLayerError(ModelFormatError):
    pass


class MissingBlobError(ModelFormatError):
    pass


class ShapeChainError(ModelFormatError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    # Conv2d / pooling geometry; None for layers without it.
    geom: ConvGeometry | None = None
    window: int | None = None
    stride: int | None = None
    in_features: int | None = None
    out_features: int | None = None
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass(frozen=True)
class ModelContainer:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    class_names: tuple[str, ...]
    mean: np.ndarray            # per-channel, raw-pixel units in [0,1]
    std: np.ndarray
    input_low: np.ndarray       # per-channel z^beta bounds, normalized units
    input_high: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(f"no layer named {name!r}")

    def with_layer(self, index: int, layer: LayerSpec) -> "ModelContainer":
        layers = list(self.layers)
        layers[index] = layer
        return replace(self, layers=tuple(layers))


def _shape_after(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "Conv2d":
        if len(shape) != 3 or shape[0] != layer.geom.in_channels:
            raise ShapeChainError(
                f"layer {layer.name!r}: expects {layer.geom.in_channels} input "
                f"channels, got shape {shape}")
        oh, ow = layer.geom.out_size(shape[1], shape[2])
        return (layer.geom.out_channels, oh, ow)
    if layer.kind == "Linear":
        if len(shape) != 1 or shape[0] != layer.in_features:
            raise ShapeChainError(
                f"layer {layer.name!r}: expects {layer.in_features} input "
                f"features, got shape {shape}")
        return (layer.out_features,)
    if layer.kind in ("MaxPool2d", "AvgPool2d"):
        if len(shape) != 3:
            raise ShapeChainError(f"layer {layer.name!r}: pooling needs [C,H,W] input")
        c, h, w = shape
        oh = (h - layer.window) // layer.stride + 1
        ow = (w - layer.window) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeChainError(f"layer {layer.name!r}: window {layer.window} "
                                  f"does not fit input {h}x{w}")
        return (c, oh, ow)
    if layer.kind == "Flatten":
        return (int(np.prod(shape)),)
    return shape  # ReLU


def output_shapes(model: ModelContainer) -> list[tuple[int, ...]]:
    shapes = []
    shape = model.input_shape
    for layer in model.layers:
        shape = _shape_after(layer, shape)
        shapes.append(shape)
    return shapes


def _load_schema():
    schema_path = Path(__file__).parent / "manifest.schema.json"
    return json.loads(schema_path.read_text())


def _read_blob(raw: np.ndarray, ref: dict, layer_name: str, what: str) -> np.ndarray:
    offset, shape = ref["offset"], tuple(ref["shape"])
    count = int(np.prod(shape))
    if offset % 4 != 0:
        raise MissingBlobError(f"layer {layer_name!r}: {what} offset {offset} "
                               "not float32-aligned")
    start = offset // 4
    if start + count > raw.size:
        raise MissingBlobError(f"layer {layer_name!r}: {what} blob "
                               f"(offset {offset}, {count} values) exceeds weights.bin")
    return raw[start:start + count].reshape(shape).copy()


def load_model(path: str | Path) -> ModelContainer:
    path = Path(path)
    manifest_path = path / "manifest.json"
    weights_path = path / "weights.bin"
    if not manifest_path.is_file():
        raise ManifestSchemaError(f"{manifest_path} not found")
    if not weights_path.is_file():
        raise MissingBlobError(f"{weights_path} not found")
    manifest = json.loads(manifest_path.read_text())

    import jsonschema
    try:
        jsonschema.validate(manifest, _load_schema())
    except jsonschema.ValidationError as exc:
        raise ManifestSchemaError(f"manifest invalid: {exc.message}") from exc

    raw = np.frombuffer(weights_path.read_bytes(), dtype="<f4")

    layers = []
    for entry in manifest["layers"]:
        kind, name = entry["kind"], entry["name"]
        if kind not in SUPPORTED_KINDS:
            raise UnsupportedLayerError(
                f"layer {name!r}: unsupported kind {kind!r} (normalization layers "
                "must be folded by the exporter)")
        if kind == "Conv2d":
            geom = ConvGeometry(
                in_channels=entry["in_channels"], out_channels=entry["out_channels"],
                kernel_h=entry["kernel"][0], kernel_w=entry["kernel"][1],
                stride_h=entry["stride"][0], stride_w=entry["stride"][1],
                pad_h=entry["padding"][0], pad_w=entry["padding"][1])
            w = _read_blob(raw, entry["weight"], name, "weight")
            b = _read_blob(raw, entry["bias"], name, "bias")
            expected = (geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w)
            if w.shape != expected:
                raise ShapeChainError(f"layer {name!r}: weight blob shape {w.shape} "
                                      f"!= declared geometry {expected}")
            if b.shape != (geom.out_channels,):
                raise ShapeChainError(f"layer {name!r}: bias blob shape {b.shape} "
                                      f"!= ({geom.out_channels},)")
            layers.append(LayerSpec(kind, name, geom=geom, weights=w, bias=b))
        elif kind == "Linear":
            w = _read_blob(raw, entry["weight"], name, "weight")
            b = _read_blob(raw, entry["bias"], name, "bias")
            out_f, in_f = entry["out_features"], entry["in_features"]
            if w.shape != (out_f, in_f):
                raise ShapeChainError(f"layer {name!r}: weight blob shape {w.shape} "
                                      f"!= ({out_f}, {in_f})")
            if b.shape != (out_f,):
                raise ShapeChainError(f"layer {name!r}: bias blob shape {b.shape} "
                                      f"!= ({out_f},)")
            layers.append(LayerSpec(kind, name, in_features=in_f, out_features=out_f,
                                    weights=w, bias=b))
        elif kind in ("MaxPool2d", "AvgPool2d"):
            layers.append(LayerSpec(kind, name, window=entry["window"],
                                    stride=entry["stride"]))
        else:
            layers.append(LayerSpec(kind, name))

    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        raise ManifestSchemaError("duplicate layer names in manifest")
    if not layers or layers[-1].kind != "Linear":
        raise ShapeChainError("last layer must be Linear (the logit layer)")

    pre = manifest["preprocessing"]
    bounds = manifest["input_bounds"]
    model = ModelContainer(
        layers=tuple(layers),
        input_shape=tuple(manifest["input_shape"]),
        class_names=tuple(manifest["class_names"]),
        mean=np.asarray(pre["mean"], dtype=FLOAT),
        std=np.asarray(pre["std"], dtype=FLOAT),
        input_low=np.asarray(bounds["low"], dtype=FLOAT),
        input_high=np.asarray(bounds["high"], dtype=FLOAT),
    )

    c = model.input_shape[0]
    for arr, what in ((model.mean, "mean"), (model.std, "std"),
                      (model.input_low, "input_bounds.low"),
                      (model.input_high, "input_bounds.high")):
        if arr.shape != (c,):
            raise ManifestSchemaError(f"{what} must have one value per input channel")
    if np.any(model.input_low > 0) or np.any(model.input_high < 0):
        raise ManifestSchemaError("input_bounds must satisfy low <= 0 <= high "
                                  "per channel")

    output_shapes(model)  # raises ShapeChainError on a broken chain
    if model.num_classes != layers[-1].out_features:
        raise ShapeChainError(
            f"class_names has {model.num_classes} entries but final layer "
            f"{layers[-1].name!r} outputs {layers[-1].out_features}")
    return model


def save_model(model: ModelContainer, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs: list[np.ndarray] = []
    offset = 0
    entries = []
    for layer in model.layers:
        entry: dict = {"kind": layer.kind, "name": layer.name}
        if layer.kind == "Conv2d":
            g = layer.geom
            entry.update(in_channels=g.in_channels, out_channels=g.out_channels,
                         kernel=[g.kernel_h, g.kernel_w],
                         stride=[g.stride_h, g.stride_w],
                         padding=[g.pad_h, g.pad_w])
        elif layer.kind == "Linear":
            entry.update(in_features=layer.in_features, out_features=layer.out_features)
        elif layer.kind in ("MaxPool2d", "AvgPool2d"):
            entry.update(window=layer.window, stride=layer.stride)
        if layer.weights is not None:
            for key, arr in (("weight", layer.weights), ("bias", layer.bias)):
                arr = np.ascontiguousarray(arr, dtype=FLOAT)
                entry[key] = {"offset": offset, "shape": list(arr.shape)}
                blobs.append(arr)
                offset += arr.size * 4
        entries.append(entry)
    manifest = {
        "format_version": 1,
        "input_shape": list(model.input_shape),
        "class_names": list(model.class_names),
        "preprocessing": {"mean": [float(v) for v in model.mean],
                          "std": [float(v) for v in model.std]},
        "input_bounds": {"low": [float(v) for v in model.input_low],
                         "high": [float(v) for v in model.input_high]},
        "layers": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    with open(path / "weights.bin", "wb") as fh:
        for blob in blobs:
            fh.write(blob.astype("<f4").tobytes())


def parameter_count(model: ModelContainer) -> int:
    total = 0
    for layer in model.layers:
        if layer.weights is not None:
            total += layer.weights.size + layer.bias.size
    return total


def model_info(model: ModelContainer) -> str:
    lines = [f"{'layer':<12} {'kind':<10} {'output shape':<16} {'params':>8}"]
    shape: tuple[int, ...] = model.input_shape
    lines.append(f"{'(input)':<12} {'':<10} {str(shape):<16} {'':>8}")
    for layer in model.layers:
        shape = _shape_after(layer, shape)
        params = (layer.weights.size + layer.bias.size) if layer.weights is not None else 0
        lines.append(f"{layer.name:<12} {layer.kind:<10} {str(shape):<16} {params:>8}")
    lines.append(f"total parameters: {parameter_count(model)}")
    return "\n".join(lines)
