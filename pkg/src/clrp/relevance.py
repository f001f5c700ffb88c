"""Layer-wise relevance propagation plus gradient-based baselines.

The redistribution rules operate on pairs of adjacent linear(ised) layers
using their recorded input activations. ReLU layers pass relevance through
unchanged, max-pool routes each cell's relevance entirely to its recorded
switch position, average-pool splits it evenly over the window, and biases
receive no relevance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import ForwardTrace
from .model import LayerSpec, ModelContainer
from .tensor import FLOAT, ConvGeometry, ShapeError, col2im_add, pad_input

RULE_Z = "z"
RULE_ZPLUS = "zplus"
RULE_ZBETA = "zbeta"


class NumericalError(RuntimeError):
    """Non-finite relevance appeared (zero denominator not caught by epsilon)."""


class ExplanationRefused(ValueError):
    """The requested explanation is ill-posed (e.g. non-positive target score)."""


@dataclass(frozen=True)
class RuleConfig:
    default_rule: str = RULE_ZPLUS          # rule for all linear/conv layers
    first_conv_rule: str | None = RULE_ZBETA  # None: use default at first conv too
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.default_rule not in (RULE_Z, RULE_ZPLUS):
            raise ValueError(f"default_rule must be 'z' or 'zplus', "
                             f"got {self.default_rule!r}")
        if self.first_conv_rule not in (None, RULE_ZBETA):
            raise ValueError("first_conv_rule must be 'zbeta' or None")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass(frozen=True)
class OutputRelevance:
    values: np.ndarray
    tag: str

    @classmethod
    def single_class(cls, logits: np.ndarray, target: int) -> "OutputRelevance":
        values = np.zeros_like(logits)
        values[target] = logits[target]
        return cls(values, f"single-class target {target}")

    @classmethod
    def multi_class(cls, logits: np.ndarray, targets: list[int]) -> "OutputRelevance":
        values = np.zeros_like(logits)
        for t in targets:
            values[t] = logits[t]
        if values.sum() <= 0:
            raise ExplanationRefused("multi-class initialization must carry a "
                                     "positive total score")
        return cls(values, f"multi-class {sorted(set(targets))}")


@dataclass
class PropagationDiagnostics:
    layer_sums: list[tuple[str, float]] = field(default_factory=list)
    padding_leakage: float = 0.0
    conservation_residual: float = 0.0


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray                 # [H,W] channel-summed map
    method: str
    target: str
    total_relevance: float             # sum before channel-summing / clipping
    channel_values: np.ndarray | None = None   # [C,H,W] pre-reduction relevance
    diagnostics: PropagationDiagnostics | None = None


def _stabilized(denom: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon == 0.0:
        return denom
    sign = np.where(denom >= 0, 1.0, -1.0).astype(denom.dtype)
    return denom + epsilon * sign


def _safe_div(num: np.ndarray, denom: np.ndarray) -> np.ndarray:
    # 0/0 paths (zero relevance over zero denominator) resolve to 0.
    out = np.zeros_like(num)
    nonzero = denom != 0
    out[nonzero] = num[nonzero] / denom[nonzero]
    if np.any((~nonzero) & (num != 0)):
        raise NumericalError("relevance over exactly-zero denominator; "
                             "use a positive epsilon")
    return out


def linear_relevance(rule: str, x: np.ndarray, weights: np.ndarray,
                     rel_out: np.ndarray, epsilon: float,
                     low: np.ndarray | None = None,
                     high: np.ndarray | None = None) -> np.ndarray:
    """Redistribute rel_out [M] through a dense layer back to rel_in [N]."""
    if weights.shape[0] != rel_out.shape[0] or weights.shape[1] != x.shape[0]:
        raise ShapeError(f"weights {weights.shape} incompatible with input "
                         f"{x.shape} / relevance {rel_out.shape}")
    x = x.astype(np.float64)
    weights = weights.astype(np.float64)
    rel_out = rel_out.astype(np.float64)
    if rule == RULE_ZPLUS:
        wp = np.maximum(weights, 0)
        denom = _stabilized(wp @ x, epsilon)
        s = _safe_div(rel_out, denom)
        return x * (wp.T @ s)
    if rule == RULE_Z:
        denom = _stabilized(weights @ x, epsilon)
        s = _safe_div(rel_out, denom)
        return x * (weights.T @ s)
    if rule == RULE_ZBETA:
        low = low.astype(np.float64)
        high = high.astype(np.float64)
        wp = np.maximum(weights, 0)
        wm = np.minimum(weights, 0)
        denom = _stabilized(weights @ x - wp @ low - wm @ high, epsilon)
        s = _safe_div(rel_out, denom)
        return x * (weights.T @ s) - low * (wp.T @ s) - high * (wm.T @ s)
    raise ValueError(f"unknown rule {rule!r}")


def _cols_from_padded(xp: np.ndarray, geom: ConvGeometry,
                      out_h: int, out_w: int) -> np.ndarray:
    sh, sw = geom.stride_h, geom.stride_w
    cols = np.empty((geom.in_channels * geom.kernel_h * geom.kernel_w, out_h * out_w),
                    dtype=FLOAT)
    row = 0
    for c in range(geom.in_channels):
        for i in range(geom.kernel_h):
            for j in range(geom.kernel_w):
                cols[row] = xp[c, i:i + sh * out_h:sh, j:j + sw * out_w:sw].ravel()
                row += 1
    return cols


def conv_relevance(rule: str, x: np.ndarray, weights: np.ndarray,
                   geom: ConvGeometry, rel_out: np.ndarray, epsilon: float,
                   low: np.ndarray | None = None,
                   high: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Redistribute rel_out [K,OH,OW] through a convolution back to the input.

    Returns (rel_in [C,H,W], leakage), where leakage is relevance assigned to
    zero-padding positions (nonzero only under the z^beta rule) which is
    discarded from the returned array.
    """
    in_h, in_w = x.shape[1], x.shape[2]
    out_h, out_w = geom.out_size(in_h, in_w)
    if rel_out.shape != (geom.out_channels, out_h, out_w):
        raise ShapeError(f"relevance {rel_out.shape} != conv output "
                         f"({geom.out_channels},{out_h},{out_w})")
    w_mat = weights.reshape(geom.out_channels, -1).astype(np.float64)
    x_col = _cols_from_padded(pad_input(x, geom), geom, out_h, out_w).astype(np.float64)
    r_flat = rel_out.reshape(geom.out_channels, -1).astype(np.float64)

    if rule == RULE_ZPLUS:
        wp = np.maximum(w_mat, 0)
        denom = _stabilized(wp @ x_col, epsilon)
        s = _safe_div(r_flat, denom)
        r_col = x_col * (wp.T @ s)
    elif rule == RULE_Z:
        denom = _stabilized(w_mat @ x_col, epsilon)
        s = _safe_div(r_flat, denom)
        r_col = x_col * (w_mat.T @ s)
    elif rule == RULE_ZBETA:
        wp = np.maximum(w_mat, 0)
        wm = np.minimum(w_mat, 0)
        padded_shape = (geom.in_channels, in_h + 2 * geom.pad_h, in_w + 2 * geom.pad_w)
        # Bound maps are constant per channel; padded positions keep the
        # channel's bounds, so they can draw relevance that is then discarded.
        lp = np.broadcast_to(low[:, None, None], padded_shape).astype(FLOAT)
        hp = np.broadcast_to(high[:, None, None], padded_shape).astype(FLOAT)
        l_col = _cols_from_padded(lp, geom, out_h, out_w).astype(np.float64)
        h_col = _cols_from_padded(hp, geom, out_h, out_w).astype(np.float64)
        denom = _stabilized(w_mat @ x_col - wp @ l_col - wm @ h_col, epsilon)
        s = _safe_div(r_flat, denom)
        r_col = x_col * (w_mat.T @ s) - l_col * (wp.T @ s) - h_col * (wm.T @ s)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return col2im_add(r_col, geom, in_h, in_w)


def maxpool_relevance(rel_out: np.ndarray, switches: np.ndarray,
                      in_shape: tuple[int, int, int]) -> np.ndarray:
    flat = np.zeros(int(np.prod(in_shape)), dtype=np.float64)
    np.add.at(flat, switches.ravel(), rel_out.ravel().astype(np.float64))
    return flat.reshape(in_shape)


def avgpool_relevance(rel_out: np.ndarray, window: int, stride: int,
                      in_shape: tuple[int, int, int]) -> np.ndarray:
    acc = np.zeros(in_shape, dtype=np.float64)
    share = rel_out.astype(np.float64) / (window * window)
    out_h, out_w = rel_out.shape[1], rel_out.shape[2]
    for i in range(window):
        for j in range(window):
            acc[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += share
    return acc


def first_conv_index(model: ModelContainer) -> int | None:
    for i, layer in enumerate(model.layers):
        if layer.kind == "Conv2d":
            return i
    return None


def _rule_for(model: ModelContainer, index: int, layer: LayerSpec,
              rules: RuleConfig) -> str:
    if (layer.kind == "Conv2d" and rules.first_conv_rule == RULE_ZBETA
            and index == first_conv_index(model)):
        return RULE_ZBETA
    return rules.default_rule


def propagate_relevance(model: ModelContainer, trace: ForwardTrace,
                        out_rel: np.ndarray, rules: RuleConfig,
                        start_index: int | None = None,
                        weight_override: dict[int, np.ndarray] | None = None,
                        capture: list | None = None,
                        ) -> tuple[np.ndarray, PropagationDiagnostics]:
    """Walk layers [0..start_index] backward; returns per-channel input
    relevance and bookkeeping. ``weight_override`` swaps the weight matrix of
    selected layer indices without touching the recorded activations."""
    if trace.model is not model:
        raise ValueError("trace was produced by a different model")
    if start_index is None:
        start_index = len(model.layers) - 1
    weight_override = weight_override or {}
    diag = PropagationDiagnostics()
    r = np.asarray(out_rel, dtype=np.float64)
    total_in = float(r.sum())
    for i in range(start_index, -1, -1):
        layer = model.layers[i]
        x = trace.inputs[i]
        if layer.kind == "Linear":
            w = weight_override.get(i, layer.weights)
            rule = rules.default_rule
            r = linear_relevance(rule, x, w, r, rules.epsilon)
        elif layer.kind == "Conv2d":
            rule = _rule_for(model, i, layer, rules)
            low = high = None
            if rule == RULE_ZBETA:
                low, high = model.input_low, model.input_high
            w = weight_override.get(i, layer.weights)
            r, leak = conv_relevance(rule, x, w, layer.geom, r, rules.epsilon,
                                     low=low, high=high)
            diag.padding_leakage += leak
        elif layer.kind == "ReLU":
            pass  # relevance attaches to post-activation neurons
        elif layer.kind == "MaxPool2d":
            r = maxpool_relevance(r, trace.switches[i], x.shape)
        elif layer.kind == "AvgPool2d":
            r = avgpool_relevance(r, layer.window, layer.stride, x.shape)
        elif layer.kind == "Flatten":
            r = r.reshape(x.shape)
        if not np.all(np.isfinite(r)):
            raise NumericalError(f"non-finite relevance below layer {layer.name!r}")
        diag.layer_sums.append((layer.name, float(r.sum())))
        if capture is not None:
            capture.append((layer.name, r.copy()))
    final = float(r.sum())
    scale = max(abs(total_in), np.finfo(np.float64).tiny)
    diag.conservation_residual = (total_in - final) / scale
    return r, diag


def lrp_explain(model: ModelContainer, trace: ForwardTrace,
                out_rel: OutputRelevance, rules: RuleConfig) -> SaliencyMap:
    rel, diag = propagate_relevance(model, trace, out_rel.values, rules)
    spatial = rel.sum(axis=0) if rel.ndim == 3 else rel
    return SaliencyMap(values=spatial, method="lrp", target=out_rel.tag,
                       total_relevance=float(rel.sum()), channel_values=rel,
                       diagnostics=diag)


def input_gradient(model: ModelContainer, trace: ForwardTrace, target: int,
                   guided: bool = False,
                   relu_signals: list[np.ndarray] | None = None) -> np.ndarray:
    """Signed d logit_target / d input through the recorded masks and switches.

    With ``guided`` the backward signal is additionally clipped to be
    nonnegative at every ReLU. ``relu_signals`` collects the post-clip signals
    for instrumentation."""
    if trace.model is not model:
        raise ValueError("trace was produced by a different model")
    m = trace.logits.shape[0]
    if not 0 <= target < m:
        raise ValueError(f"target {target} out of range [0, {m})")
    g = np.zeros(m, dtype=np.float64)
    g[target] = 1.0
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x = trace.inputs[i]
        if layer.kind == "Linear":
            g = layer.weights.astype(np.float64).T @ g
        elif layer.kind == "Conv2d":
            geom = layer.geom
            out_h, out_w = geom.out_size(x.shape[1], x.shape[2])
            w_mat = layer.weights.reshape(geom.out_channels, -1)
            g_col = w_mat.T @ g.reshape(geom.out_channels, -1)
            g, _ = col2im_add(g_col, geom, x.shape[1], x.shape[2])
        elif layer.kind == "ReLU":
            g = g * trace.masks[i]
            if guided:
                g = np.maximum(g, 0)
            if relu_signals is not None:
                relu_signals.append(g.copy())
        elif layer.kind == "MaxPool2d":
            g = maxpool_relevance(g, trace.switches[i], x.shape)
        elif layer.kind == "AvgPool2d":
            g = avgpool_relevance(g, layer.window, layer.stride, x.shape)
        elif layer.kind == "Flatten":
            g = g.reshape(x.shape)
    return g


def vanilla_gradient(model: ModelContainer, trace: ForwardTrace,
                     target: int) -> SaliencyMap:
    g = input_gradient(model, trace, target, guided=False)
    spatial = np.abs(g).sum(axis=0) if g.ndim == 3 else np.abs(g)
    return SaliencyMap(values=spatial, method="grad",
                       target=f"class {target}", total_relevance=float(g.sum()),
                       channel_values=g)


def guided_backprop(model: ModelContainer, trace: ForwardTrace,
                    target: int) -> SaliencyMap:
    g = input_gradient(model, trace, target, guided=True)
    spatial = np.abs(g).sum(axis=0) if g.ndim == 3 else np.abs(g)
    return SaliencyMap(values=spatial, method="guided",
                       target=f"class {target}", total_relevance=float(g.sum()),
                       channel_values=g)
