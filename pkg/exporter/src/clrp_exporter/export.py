"""Convert a sequential torch model into the container format.

Batch-norm layers are folded into the preceding convolution or linear
layer so the exported model contains only the layer kinds the engine
supports. A ``reference.json`` with random inputs and framework logits is
written next to the container for round-trip verification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from clrp.inference import forward
from clrp.model import LayerSpec, ModelContainer, load_model, save_model
from clrp.tensor import ConvGeometry

ROUND_TRIP_TOL = 1e-4


class ExportError(ValueError):
    """Raised for unsupported layers or unfoldable normalization placement."""


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _iter_leaves(module: nn.Module, prefix: str = ""):
    """Yield (qualified name, leaf module) in forward execution order.

    Only containers with a data-independent sequential forward are
    descended into; anything else with children is rejected because its
    execution order cannot be read off the module tree.
    """
    children = list(module.named_children())
    if not children:
        yield prefix or module.__class__.__name__, module
        return
    if not isinstance(module, nn.Sequential):
        raise ExportError(
            f"layer {prefix or module.__class__.__name__!r}: non-sequential "
            f"block {module.__class__.__name__} cannot be exported")
    for name, child in children:
        child_prefix = f"{prefix}.{name}" if prefix else name
        yield from _iter_leaves(child, child_prefix)


def _fold_batchnorm(entry: LayerSpec, bn: nn.modules.batchnorm._BatchNorm,
                    qualname: str) -> LayerSpec:
    scale = (bn.weight / torch.sqrt(bn.running_var + bn.eps)).detach().numpy()
    shift = (bn.bias - bn.running_mean * bn.weight
             / torch.sqrt(bn.running_var + bn.eps)).detach().numpy()
    w = entry.weights
    if entry.kind == "Conv2d":
        if w.shape[0] != scale.shape[0]:
            raise ExportError(f"layer {qualname!r}: feature count "
                              f"{scale.shape[0]} does not match preceding "
                              f"convolution ({w.shape[0]} channels)")
        w = w * scale[:, None, None, None]
    else:
        if w.shape[0] != scale.shape[0]:
            raise ExportError(f"layer {qualname!r}: feature count "
                              f"{scale.shape[0]} does not match preceding "
                              f"linear layer ({w.shape[0]} outputs)")
        w = w * scale[:, None]
    b = entry.bias * scale + shift
    from dataclasses import replace
    return replace(entry, weights=w.astype(np.float32), bias=b.astype(np.float32))


def convert_layers(module: nn.Module) -> tuple[LayerSpec, ...]:
    """Map torch leaf modules onto container layer specs, folding batch norm."""
    module = module.eval()
    layers: list[LayerSpec] = []
    counters = {"conv": 0, "fc": 0, "relu": 0, "pool": 0, "avgpool": 0,
                "flatten": 0}

    def fresh(kind: str) -> str:
        name = f"{kind}{counters[kind]}"
        counters[kind] += 1
        return name

    # index of the container layer a batch norm may still fold into; reset
    # by any intervening layer
    foldable: int | None = None

    for qualname, leaf in _iter_leaves(module):
        if isinstance(leaf, nn.Conv2d):
            if leaf.groups != 1 or _pair(leaf.dilation) != (1, 1):
                raise ExportError(f"layer {qualname!r}: grouped or dilated "
                                  "convolutions are not supported")
            kh, kw = _pair(leaf.kernel_size)
            sh, sw = _pair(leaf.stride)
            ph, pw = _pair(leaf.padding)
            geom = ConvGeometry(in_channels=leaf.in_channels,
                                out_channels=leaf.out_channels,
                                kernel_h=kh, kernel_w=kw, stride_h=sh,
                                stride_w=sw, pad_h=ph, pad_w=pw)
            w = leaf.weight.detach().numpy().astype(np.float32)
            b = (leaf.bias.detach().numpy().astype(np.float32) if leaf.bias is not None
                 else np.zeros(leaf.out_channels, dtype=np.float32))
            layers.append(LayerSpec("Conv2d", fresh("conv"), geom=geom,
                                    weights=w, bias=b))
            foldable = len(layers) - 1
        elif isinstance(leaf, nn.Linear):
            w = leaf.weight.detach().numpy().astype(np.float32)
            b = (leaf.bias.detach().numpy().astype(np.float32) if leaf.bias is not None
                 else np.zeros(leaf.out_features, dtype=np.float32))
            layers.append(LayerSpec("Linear", fresh("fc"),
                                    in_features=leaf.in_features,
                                    out_features=leaf.out_features,
                                    weights=w, bias=b))
            foldable = len(layers) - 1
        elif isinstance(leaf, (nn.BatchNorm2d, nn.BatchNorm1d)):
            if foldable is None:
                raise ExportError(f"layer {qualname!r}: batch norm has no "
                                  "preceding convolution or linear layer to "
                                  "fold into")
            layers[foldable] = _fold_batchnorm(layers[foldable], leaf, qualname)
            foldable = None
        elif isinstance(leaf, nn.ReLU):
            layers.append(LayerSpec("ReLU", fresh("relu")))
            foldable = None
        elif isinstance(leaf, nn.MaxPool2d):
            kh, kw = _pair(leaf.kernel_size)
            sh, sw = _pair(leaf.stride if leaf.stride is not None
                           else leaf.kernel_size)
            if kh != kw or sh != sw or _pair(leaf.padding) != (0, 0):
                raise ExportError(f"layer {qualname!r}: only square, unpadded "
                                  "max pooling is supported")
            layers.append(LayerSpec("MaxPool2d", fresh("pool"),
                                    window=kh, stride=sh))
            foldable = None
        elif isinstance(leaf, nn.AvgPool2d):
            kh, kw = _pair(leaf.kernel_size)
            sh, sw = _pair(leaf.stride if leaf.stride is not None
                           else leaf.kernel_size)
            if kh != kw or sh != sw or _pair(leaf.padding) != (0, 0):
                raise ExportError(f"layer {qualname!r}: only square, unpadded "
                                  "average pooling is supported")
            layers.append(LayerSpec("AvgPool2d", fresh("avgpool"),
                                    window=kh, stride=sh))
            foldable = None
        elif isinstance(leaf, nn.Flatten):
            if leaf.start_dim not in (0, 1):
                raise ExportError(f"layer {qualname!r}: partial flatten is "
                                  "not supported")
            layers.append(LayerSpec("Flatten", fresh("flatten")))
            foldable = None
        elif isinstance(leaf, (nn.Dropout, nn.Identity)):
            continue  # no-ops at inference time
        else:
            raise ExportError(f"layer {qualname!r}: unsupported module "
                              f"{leaf.__class__.__name__}")
    if not layers or layers[-1].kind != "Linear":
        raise ExportError("exported model must end with a linear logit layer")
    return tuple(layers)


@dataclass(frozen=True)
class ExportResult:
    container: ModelContainer
    model_dir: Path
    reference_path: Path
    max_logit_error: float


def export_model(module: nn.Module, out_dir: str | Path, *,
                 input_shape: tuple[int, int, int],
                 class_names: tuple[str, ...],
                 mean: np.ndarray, std: np.ndarray,
                 input_low: np.ndarray | None = None,
                 input_high: np.ndarray | None = None,
                 n_reference: int = 10, seed: int = 0) -> ExportResult:
    """Write the container plus reference.json and verify the round trip.

    Bounds default to the image of [0, 1] pixels under (x - mean) / std,
    the domain the first-layer relevance rule assumes.
    """
    out_dir = Path(out_dir)
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if input_low is None:
        input_low = (0.0 - mean) / std
    if input_high is None:
        input_high = (1.0 - mean) / std

    layers = convert_layers(module)
    container = ModelContainer(layers=layers, input_shape=tuple(input_shape),
                               class_names=tuple(class_names), mean=mean,
                               std=std,
                               input_low=np.asarray(input_low, np.float32),
                               input_high=np.asarray(input_high, np.float32))
    model_dir = out_dir / "model"
    save_model(container, model_dir)
    loaded = load_model(model_dir)

    rng = np.random.default_rng(seed)
    low = np.asarray(input_low, np.float64)[:, None, None]
    high = np.asarray(input_high, np.float64)[:, None, None]
    inputs = (rng.random((n_reference, *input_shape)) * (high - low)
              + low).astype(np.float32)

    module = module.eval()
    with torch.no_grad():
        torch_logits = module(torch.from_numpy(inputs)).numpy()

    max_err = 0.0
    for x, want in zip(inputs, torch_logits):
        got = forward(loaded, x).logits
        max_err = max(max_err, float(np.max(np.abs(got - want))))
    if max_err > ROUND_TRIP_TOL:
        raise ExportError(f"round-trip logit mismatch {max_err:.3g} exceeds "
                          f"{ROUND_TRIP_TOL:g}")

    reference_path = out_dir / "reference.json"
    reference_path.write_text(json.dumps({
        "input_shape": list(input_shape),
        "inputs": [x.ravel().tolist() for x in inputs],
        "logits": [list(map(float, row)) for row in torch_logits],
    }) + "\n")
    return ExportResult(container=loaded, model_dir=model_dir,
                        reference_path=reference_path, max_logit_error=max_err)
