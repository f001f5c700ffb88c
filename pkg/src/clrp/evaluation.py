"""Energy-thresholded pointing game, mean-patch ablation study and the
per-neuron ablation matrix, with JSON/CSV report serialization."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrastive import CLRP1, CLRP2, clrp_explain, neuron_explain
from .inference import ForwardTrace, apply_layer, forward, preprocess
from .model import ModelContainer
from .relevance import (ExplanationRefused, OutputRelevance, RuleConfig,
                        guided_backprop, lrp_explain, vanilla_gradient)

log = logging.getLogger(__name__)

METHODS = ("lrp", "clrp1", "clrp2", "grad", "guided")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedSample:
    image: str
    label: int
    boxes: tuple[tuple[int, int, int, int], ...]  # (x0,y0,x1,y1) inclusive


@dataclass
class Dataset:
    root: Path
    samples: list[AnnotatedSample]

    def __len__(self):
        return len(self.samples)


@dataclass
class PointingResult:
    method: str
    levels: list[float]
    hits: list[int]
    misses: list[int]

    @property
    def accuracy(self) -> list[float]:
        return [h / (h + m) for h, m in zip(self.hits, self.misses)]


@dataclass
class AblationResult:
    method: str
    drops: list[float]

    @property
    def mean_drop(self) -> float:
        return float(np.mean(self.drops))


def load_annotations(path: str | Path) -> Dataset:
    path = Path(path)
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("image", "label", "boxes"):
                if key not in obj:
                    raise AnnotationError(f"{path}:{lineno}: missing key {key!r}")
            boxes = []
            for box in obj["boxes"]:
                if len(box) != 4 or box[0] > box[2] or box[1] > box[3]:
                    raise AnnotationError(f"{path}:{lineno}: malformed box {box}")
                boxes.append(tuple(int(v) for v in box))
            if not boxes:
                raise AnnotationError(f"{path}:{lineno}: sample needs >= 1 box")
            samples.append(AnnotatedSample(obj["image"], int(obj["label"]),
                                           tuple(boxes)))
    return Dataset(root=path.parent, samples=samples)


def load_sample_image(dataset: Dataset, sample: AnnotatedSample) -> np.ndarray:
    from PIL import Image
    with Image.open(dataset.root / sample.image) as img:
        return np.asarray(img.convert("RGB"))


def energy_threshold(values: np.ndarray, p: float,
                     tie_mode: str = "first") -> np.ndarray:
    """Binary mask of the smallest descending-value prefix whose cumulative
    sum first reaches p * total energy. Ties broken by row-major index."""
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if np.any(values < 0):
        raise ValueError("energy thresholding requires a nonnegative map")
    flat = values.ravel().astype(np.float64)
    total = flat.sum()
    if total <= 0:
        raise ValueError("zero-energy map cannot be thresholded")
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    k = int(np.searchsorted(csum, p * total - 1e-12)) + 1
    if tie_mode == "all":
        # include every pixel whose value ties the last selected one
        cutoff = flat[order[k - 1]]
        k = int(np.searchsorted(-flat[order], -cutoff, side="right"))
    mask = np.zeros(flat.shape, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(values.shape)


def pointing_hit(mask: np.ndarray, sample: AnnotatedSample,
                 mode: str = "containment") -> bool:
    """containment: every selected pixel inside the union of boxes;
    overlap: at least one selected pixel inside."""
    box_mask = np.zeros(mask.shape, dtype=bool)
    for x0, y0, x1, y1 in sample.boxes:
        box_mask[y0:y1 + 1, x0:x1 + 1] = True
    if mode == "containment":
        return bool(np.all(box_mask[mask]))
    if mode == "overlap":
        return bool(np.any(box_mask[mask]))
    raise ValueError(f"unknown containment mode {mode!r}")


def explain_for_method(model: ModelContainer, trace: ForwardTrace, target: int,
                       method: str, rules: RuleConfig):
    if method == "lrp":
        out_rel = OutputRelevance.single_class(trace.logits, target)
        if float(out_rel.values.sum()) <= 0:
            raise ExplanationRefused(f"class {target} has non-positive logit")
        return lrp_explain(model, trace, out_rel, rules)
    if method == "clrp1":
        return clrp_explain(model, trace, target, CLRP1, rules)
    if method == "clrp2":
        return clrp_explain(model, trace, target, CLRP2, rules)
    if method == "grad":
        return vanilla_gradient(model, trace, target)
    if method == "guided":
        return guided_backprop(model, trace, target)
    raise ValueError(f"unknown method {method!r}")


def _pointing_one(model, dataset, sample, methods, p_levels, rules, mode):
    image = load_sample_image(dataset, sample)
    x = preprocess(image, model)
    trace = forward(model, x)
    hits = {}
    for method in methods:
        row = []
        try:
            smap = explain_for_method(model, trace, sample.label, method, rules)
            for p in p_levels:
                mask = energy_threshold(np.maximum(smap.values, 0), p)
                row.append(pointing_hit(mask, sample, mode=mode))
        except (ExplanationRefused, ValueError) as exc:
            log.warning("sample %s, method %s: %s (counted as miss)",
                        sample.image, method, exc)
            row = [False] * len(p_levels)
        hits[method] = row
    return hits


def run_pointing(model: ModelContainer, dataset: Dataset, methods: list[str],
                 p_levels: list[float], rules: RuleConfig,
                 mode: str = "containment", workers: int = 1) -> list[PointingResult]:
    if not dataset.samples:
        raise ValueError("dataset is empty")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_sample = list(pool.map(
                lambda s: _pointing_one(model, dataset, s, methods, p_levels,
                                        rules, mode),
                dataset.samples))
    else:
        per_sample = [_pointing_one(model, dataset, s, methods, p_levels, rules, mode)
                      for s in dataset.samples]
    results = []
    for method in methods:
        hits = [0] * len(p_levels)
        for sample_hits in per_sample:
            for i, hit in enumerate(sample_hits[method]):
                hits[i] += int(hit)
        misses = [len(dataset) - h for h in hits]
        results.append(PointingResult(method, list(p_levels), hits, misses))
    return results


def mean_pixel_image(model: ModelContainer, dataset: Dataset) -> np.ndarray:
    """Per-position mean of the preprocessed tensors over the dataset."""
    if not dataset.samples:
        raise ValueError("dataset is empty")
    acc = np.zeros(model.input_shape, dtype=np.float64)
    for sample in dataset.samples:
        acc += preprocess(load_sample_image(dataset, sample), model)
    return (acc / len(dataset)).astype(np.float32)


def ablate_patch(x: np.ndarray, center: tuple[int, int], fill: np.ndarray,
                 size: int = 9) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError("patch size must be odd")
    row, col = center
    _, h, w = x.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"center {center} outside image {h}x{w}")
    half = size // 2
    r0, r1 = max(0, row - half), min(h, row + half + 1)
    c0, c1 = max(0, col - half), min(w, col + half + 1)
    out = x.copy()
    out[:, r0:r1, c0:c1] = fill[:, r0:r1, c0:c1]
    return out


def map_maximum(values: np.ndarray) -> tuple[int, int]:
    """Row-major first occurrence of the maximum."""
    idx = int(np.argmax(values))
    return idx // values.shape[1], idx % values.shape[1]


def ablation_study(model: ModelContainer, dataset: Dataset, methods: list[str],
                   rules: RuleConfig, patch_size: int = 9, seed: int = 42,
                   mean_image: np.ndarray | None = None) -> list[AblationResult]:
    if mean_image is None:
        mean_image = mean_pixel_image(model, dataset)
    rng = np.random.default_rng(seed)
    drops: dict[str, list[float]] = {m: [] for m in list(methods) + ["random"]}
    for sample in dataset.samples:
        image = load_sample_image(dataset, sample)
        x = preprocess(image, model)
        trace = forward(model, x)
        before = float(trace.logits[sample.label])
        h, w = x.shape[1], x.shape[2]
        centers = {"random": (int(rng.integers(h)), int(rng.integers(w)))}
        for method in methods:
            try:
                smap = explain_for_method(model, trace, sample.label, method, rules)
                centers[method] = map_maximum(smap.values)
            except (ExplanationRefused, ValueError) as exc:
                log.warning("sample %s, method %s: %s (zero drop recorded)",
                            sample.image, method, exc)
                centers[method] = None
        for method, center in centers.items():
            if center is None:
                drops[method].append(0.0)
                continue
            ablated = ablate_patch(x, center, mean_image, size=patch_size)
            after = float(forward(model, ablated).logits[sample.label])
            drops[method].append(before - after)
    return [AblationResult(m, drops[m]) for m in list(methods) + ["random"]]


def neuron_ablation_matrix(model: ModelContainer, x: np.ndarray, layer: str,
                           neurons: list[int], rules: RuleConfig,
                           mean_image: np.ndarray, patch_size: int = 9) -> np.ndarray:
    """Entry (i, j) = activation_before(j) - activation_after(j) when the
    patch located by neuron i's contrastive map is ablated. Positive entries
    mean the activation dropped."""
    trace = forward(model, x)
    index = model.layer_index(layer)
    before, _, _ = apply_layer(model.layers[index], trace.inputs[index])
    for n in neurons:
        if before[n] <= 0:
            raise ExplanationRefused(f"neuron {n} of layer {layer!r} is inactive")
    k = len(neurons)
    matrix = np.zeros((k, k), dtype=np.float64)
    for i, n_i in enumerate(neurons):
        smap = neuron_explain(model, trace, layer, n_i, rules)
        center = map_maximum(smap.values)
        ablated = ablate_patch(x, center, mean_image, size=patch_size)
        trace_after = forward(model, ablated)
        after, _, _ = apply_layer(model.layers[index], trace_after.inputs[index])
        for j, n_j in enumerate(neurons):
            matrix[i, j] = float(before[n_j]) - float(after[n_j])
    return matrix


def _sig9(value: float) -> float:
    return float(f"{value:.9g}")


def pointing_report_json(results: list[PointingResult]) -> str:
    payload = [{"method": r.method, "levels": [_sig9(p) for p in r.levels],
                "hits": r.hits, "misses": r.misses,
                "accuracy": [_sig9(a) for a in r.accuracy]} for r in results]
    return json.dumps({"pointing": payload}, indent=2) + "\n"


def pointing_report_csv(results: list[PointingResult]) -> str:
    lines = ["method,energy,hits,misses,accuracy"]
    for r in results:
        for p, h, m, a in zip(r.levels, r.hits, r.misses, r.accuracy):
            lines.append(f"{r.method},{_sig9(p)},{h},{m},{_sig9(a)}")
    return "\n".join(lines) + "\n"


def ablation_report_json(results: list[AblationResult]) -> str:
    payload = [{"method": r.method, "mean_drop": _sig9(r.mean_drop),
                "drops": [_sig9(d) for d in r.drops]} for r in results]
    return json.dumps({"ablation": payload}, indent=2) + "\n"


def ablation_report_csv(results: list[AblationResult]) -> str:
    lines = ["method,mean_drop"]
    for r in results:
        lines.append(f"{r.method},{_sig9(r.mean_drop)}")
    return "\n".join(lines) + "\n"
