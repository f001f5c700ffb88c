"""Naive loop-based reference implementations used as independent oracles.

Everything here is deliberately slow and simple: explicit Python loops,
no vectorization, no code shared with the engine's numerics.
"""

import numpy as np


def conv2d_naive(x, weights, bias, stride=(1, 1), padding=(0, 0)):
    c_in, h, w = x.shape
    k, _, kh, kw = weights.shape
    sh, sw = stride
    ph, pw = padding
    out_h = (h + 2 * ph - kh) // sh + 1
    out_w = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((k, out_h, out_w), dtype=np.float64)
    for oc in range(k):
        for oi in range(out_h):
            for oj in range(out_w):
                acc = 0.0
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            ii = oi * sh + i - ph
                            jj = oj * sw + j - pw
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += float(x[c, ii, jj]) * float(weights[oc, c, i, j])
                out[oc, oi, oj] = acc + float(bias[oc])
    return out


def fc_naive(x, weights, bias):
    m, n = weights.shape
    out = np.zeros(m, dtype=np.float64)
    for j in range(m):
        acc = 0.0
        for i in range(n):
            acc += float(x[i]) * float(weights[j, i])
        out[j] = acc + float(bias[j])
    return out


def maxpool_naive(x, window, stride):
    c_in, h, w = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    out = np.zeros((c_in, out_h, out_w), dtype=np.float64)
    switches = np.zeros((c_in, out_h, out_w), dtype=np.int64)
    for c in range(c_in):
        for oi in range(out_h):
            for oj in range(out_w):
                best = None
                best_idx = None
                for i in range(window):
                    for j in range(window):
                        ii, jj = oi * stride + i, oj * stride + j
                        v = float(x[c, ii, jj])
                        if best is None or v > best:
                            best = v
                            best_idx = c * h * w + ii * w + jj
                out[c, oi, oj] = best
                switches[c, oi, oj] = best_idx
    return out, switches


def avgpool_naive(x, window, stride):
    c_in, h, w = x.shape
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1
    out = np.zeros((c_in, out_h, out_w), dtype=np.float64)
    for c in range(c_in):
        for oi in range(out_h):
            for oj in range(out_w):
                acc = 0.0
                for i in range(window):
                    for j in range(window):
                        acc += float(x[c, oi * stride + i, oj * stride + j])
                out[c, oi, oj] = acc / (window * window)
    return out


def _rule_terms(rule, x_i, w_ij, low_i, high_i):
    """Per-connection numerator contribution of one input neuron."""
    wp = w_ij if w_ij > 0 else 0.0
    wm = w_ij if w_ij < 0 else 0.0
    if rule == "zplus":
        return x_i * wp
    if rule == "z":
        return x_i * w_ij
    if rule == "zbeta":
        return x_i * w_ij - low_i * wp - high_i * wm
    raise ValueError(rule)


def linear_relevance_naive(rule, x, weights, rel_out, epsilon=0.0,
                           low=None, high=None):
    """Per-neuron double loop version of the redistribution rules."""
    m, n = weights.shape
    rel_in = np.zeros(n, dtype=np.float64)
    for j in range(m):
        if rel_out[j] == 0.0:
            continue
        denom = 0.0
        for i in range(n):
            li = float(low[i]) if low is not None else 0.0
            hi = float(high[i]) if high is not None else 0.0
            denom += _rule_terms(rule, float(x[i]), float(weights[j, i]), li, hi)
        denom += epsilon * (1.0 if denom >= 0 else -1.0)
        for i in range(n):
            li = float(low[i]) if low is not None else 0.0
            hi = float(high[i]) if high is not None else 0.0
            num = _rule_terms(rule, float(x[i]), float(weights[j, i]), li, hi)
            rel_in[i] += num / denom * float(rel_out[j])
    return rel_in


def conv_relevance_naive(rule, x, weights, rel_out, stride=(1, 1), padding=(0, 0),
                         epsilon=0.0, low=None, high=None):
    """Loop over every output cell and its receptive field. Relevance landing
    on padded positions is dropped; returns (rel_in, leakage)."""
    c_in, h, w = x.shape
    k, _, kh, kw = weights.shape
    sh, sw = stride
    ph, pw = padding
    out_h = (h + 2 * ph - kh) // sh + 1
    out_w = (w + 2 * pw - kw) // sw + 1
    rel_in = np.zeros((c_in, h, w), dtype=np.float64)
    leakage = 0.0
    for oc in range(k):
        for oi in range(out_h):
            for oj in range(out_w):
                r = float(rel_out[oc, oi, oj])
                if r == 0.0:
                    continue
                denom = 0.0
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            ii, jj = oi * sh + i - ph, oj * sw + j - pw
                            inside = 0 <= ii < h and 0 <= jj < w
                            xv = float(x[c, ii, jj]) if inside else 0.0
                            li = float(low[c]) if low is not None else 0.0
                            hi = float(high[c]) if high is not None else 0.0
                            denom += _rule_terms(rule, xv, float(weights[oc, c, i, j]),
                                                 li, hi)
                denom += epsilon * (1.0 if denom >= 0 else -1.0)
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            ii, jj = oi * sh + i - ph, oj * sw + j - pw
                            inside = 0 <= ii < h and 0 <= jj < w
                            xv = float(x[c, ii, jj]) if inside else 0.0
                            li = float(low[c]) if low is not None else 0.0
                            hi = float(high[c]) if high is not None else 0.0
                            num = _rule_terms(rule, xv, float(weights[oc, c, i, j]),
                                              li, hi)
                            share = num / denom * r
                            if inside:
                                rel_in[c, ii, jj] += share
                            else:
                                leakage += share
    return rel_in, leakage


def network_relevance_naive(model, trace, out_rel, rule_default, first_conv_rule,
                            epsilon, low=None, high=None):
    """Backward relevance through a whole model using only the naive per-layer
    functions above. Mirrors the propagation protocol independently."""
    first_conv = None
    for idx, layer in enumerate(model.layers):
        if layer.kind == "Conv2d":
            first_conv = idx
            break
    r = np.asarray(out_rel, dtype=np.float64)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        x = trace.inputs[idx]
        if layer.kind == "Linear":
            r = linear_relevance_naive(rule_default, x, layer.weights, r, epsilon)
        elif layer.kind == "Conv2d":
            g = layer.geom
            if idx == first_conv and first_conv_rule == "zbeta":
                r, _ = conv_relevance_naive(
                    "zbeta", x, layer.weights, r, (g.stride_h, g.stride_w),
                    (g.pad_h, g.pad_w), epsilon, low=low, high=high)
            else:
                r, _ = conv_relevance_naive(
                    rule_default, x, layer.weights, r, (g.stride_h, g.stride_w),
                    (g.pad_h, g.pad_w), epsilon)
        elif layer.kind == "ReLU":
            pass
        elif layer.kind == "MaxPool2d":
            flat = np.zeros(x.size, dtype=np.float64)
            _, switches = maxpool_naive(x, layer.window, layer.stride)
            for pos, rv in zip(switches.ravel(), r.ravel()):
                flat[pos] += float(rv)
            r = flat.reshape(x.shape)
        elif layer.kind == "AvgPool2d":
            acc = np.zeros(x.shape, dtype=np.float64)
            c_in = x.shape[0]
            out_h, out_w = r.shape[1], r.shape[2]
            for c in range(c_in):
                for oi in range(out_h):
                    for oj in range(out_w):
                        share = float(r[c, oi, oj]) / (layer.window ** 2)
                        for i in range(layer.window):
                            for j in range(layer.window):
                                acc[c, oi * layer.stride + i,
                                    oj * layer.stride + j] += share
            r = acc
        elif layer.kind == "Flatten":
            r = r.reshape(x.shape)
    return r


def forward_naive(model, x):
    """Float64 forward pass built only from the naive layer functions."""
    x = np.asarray(x, dtype=np.float64)
    for layer in model.layers:
        if layer.kind == "Conv2d":
            g = layer.geom
            x = conv2d_naive(x, layer.weights, layer.bias,
                             (g.stride_h, g.stride_w), (g.pad_h, g.pad_w))
        elif layer.kind == "Linear":
            x = fc_naive(x, layer.weights, layer.bias)
        elif layer.kind == "ReLU":
            x = np.where(x > 0, x, 0.0)
        elif layer.kind == "MaxPool2d":
            x, _ = maxpool_naive(x, layer.window, layer.stride)
        elif layer.kind == "AvgPool2d":
            x = avgpool_naive(x, layer.window, layer.stride)
        elif layer.kind == "Flatten":
            x = x.reshape(-1)
    return x
