"""Contrastive explanations: build a dual signal modeling the opposite
concept, propagate both, and keep the clipped difference."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .inference import ForwardTrace, apply_layer
from .model import ModelContainer
from .relevance import (ExplanationRefused, OutputRelevance, RuleConfig,
                        SaliencyMap, propagate_relevance)

CLRP1 = "clrp1"
CLRP2 = "clrp2"


@dataclass(frozen=True)
class DualConceptSpec:
    variant: str                       # CLRP1 | CLRP2
    layer_index: int                   # index of the targeted Linear layer
    neuron: int

    def __post_init__(self):
        if self.variant not in (CLRP1, CLRP2):
            raise ValueError(f"variant must be {CLRP1!r} or {CLRP2!r}")


def dual_output_relevance_clrp1(logits: np.ndarray, target: int) -> OutputRelevance:
    """Spread the target score uniformly over the other classes, keeping the
    same total mass so the two propagations are directly comparable."""
    m = logits.shape[0]
    if m < 2:
        raise ExplanationRefused("CLRP1 needs at least two output neurons")
    score = logits[target]
    values = np.full(m, score / (m - 1), dtype=logits.dtype)
    values[target] = 0.0
    return OutputRelevance(values, f"clrp1 dual of class {target}")


def clrp2_negated_last_layer(model: ModelContainer, target: int,
                             layer_index: int | None = None) -> ModelContainer:
    """Model view with the target neuron's fan-in weight row negated; all
    other layers share the original arrays."""
    if layer_index is None:
        layer_index = len(model.layers) - 1
    layer = model.layers[layer_index]
    if layer.kind != "Linear":
        raise ValueError(f"layer {layer.name!r} is not Linear")
    if not 0 <= target < layer.out_features:
        raise ValueError(f"target {target} out of range for layer {layer.name!r}")
    weights = layer.weights.copy()
    weights[target] = -weights[target]
    return model.with_layer(layer_index, replace(layer, weights=weights))


def _linear_output(trace: ForwardTrace, layer_index: int) -> np.ndarray:
    layer = trace.model.layers[layer_index]
    out, _, _ = apply_layer(layer, trace.inputs[layer_index])
    return out


def _channel_sum(rel: np.ndarray) -> np.ndarray:
    return rel.sum(axis=0) if rel.ndim == 3 else rel


def clrp_explain(model: ModelContainer, trace: ForwardTrace, target: int,
                 variant: str, rules: RuleConfig) -> SaliencyMap:
    """Contrastive explanation of an output class: max(0, R - R_dual)."""
    if trace.model is not model:
        raise ValueError("trace was produced by a different model")
    if variant not in (CLRP1, CLRP2):
        raise ValueError(f"unknown variant {variant!r}")
    logits = trace.logits
    score = float(logits[target])
    if score <= 0:
        raise ExplanationRefused(f"class {target} has non-positive logit {score}; "
                                 "nothing to redistribute")
    out_rel = OutputRelevance.single_class(logits, target)
    rel, diag = propagate_relevance(model, trace, out_rel.values, rules)

    if variant == CLRP1:
        dual = dual_output_relevance_clrp1(logits, target)
        rel_dual, diag_dual = propagate_relevance(model, trace, dual.values, rules)
    else:
        last = len(model.layers) - 1
        negated = model.layers[last].weights.copy()
        negated[target] = -negated[target]
        rel_dual, diag_dual = propagate_relevance(
            model, trace, out_rel.values, rules, weight_override={last: negated})

    r_map = _channel_sum(rel)
    d_map = _channel_sum(rel_dual)
    values = np.maximum(0.0, r_map - d_map).astype(r_map.dtype)
    diag.padding_leakage += diag_dual.padding_leakage
    return SaliencyMap(values=values, method=variant, target=f"class {target}",
                       total_relevance=float(rel.sum()), channel_values=None,
                       diagnostics=diag)


def neuron_explain(model: ModelContainer, trace: ForwardTrace, layer: str,
                   neuron: int, rules: RuleConfig) -> SaliencyMap:
    """CLRP2 applied to one neuron of an intermediate Linear layer: propagate
    its activation down to the input with original and negated fan-in weights,
    subtract, clip."""
    if trace.model is not model:
        raise ValueError("trace was produced by a different model")
    index = model.layer_index(layer)
    spec = model.layers[index]
    if spec.kind != "Linear":
        raise ValueError(f"layer {layer!r} is not Linear; neuron explanations "
                         "need a fan-in weight row")
    if not 0 <= neuron < spec.out_features:
        raise ValueError(f"neuron {neuron} out of range for layer {layer!r}")
    activations = _linear_output(trace, index)
    score = float(activations[neuron])
    if score <= 0:
        raise ExplanationRefused(f"neuron {neuron} of layer {layer!r} is inactive "
                                 f"(value {score})")
    out_rel = np.zeros_like(activations)
    out_rel[neuron] = score
    rel, diag = propagate_relevance(model, trace, out_rel, rules, start_index=index)
    negated = spec.weights.copy()
    negated[neuron] = -negated[neuron]
    rel_dual, diag_dual = propagate_relevance(model, trace, out_rel, rules,
                                              start_index=index,
                                              weight_override={index: negated})
    values = np.maximum(0.0, _channel_sum(rel) - _channel_sum(rel_dual))
    diag.padding_leakage += diag_dual.padding_leakage
    return SaliencyMap(values=values.astype(rel.dtype), method="clrp2-neuron",
                       target=f"{layer}[{neuron}]", total_relevance=float(rel.sum()),
                       diagnostics=diag)
