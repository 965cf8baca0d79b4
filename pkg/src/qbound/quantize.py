"""Post-training weight quantizers and cross-layer equalization.

Three quantizers share the per-tensor step size eta = max|w| / (2^n - 1):

* floor:    w -> floor(w / eta) * eta
* round:    w -> round(w / eta) * eta, ties away from zero
* adaround: w -> (floor(w / eta) + h) * eta with h in {0, 1} learned per
  weight by minimizing the layer's output MSE on a calibration batch
  (plus a pull of the soft offsets toward 0.5), then binarized.

Biases are never quantized: the certified bounds assume both networks
share them, and their memory footprint is marginal next to the weights.

All arithmetic is float64 and grid membership is kept exact against
floating-point drift: floor/round decisions are corrected against the
actual representable grid products k * eta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import infer
from .model import (
    Activation,
    Conv2d,
    Dense,
    NetworkSpec,
    validate,
    weight_tensor_names,
)
from .tensor import as_array

# Quotients w/eta land within a few ulps of their exact value; anything
# this close to an integer (or half-integer) is treated as exactly on it.
_GRID_RTOL = 64 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class AdaRoundParams:
    calib_count: int = 256
    steps: int = 15
    learning_rate: float = 1e-3
    lam: float = 0.01


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    mode: str = "round"  # floor | round | adaround
    adaround: AdaRoundParams = field(default_factory=AdaRoundParams)
    seed: int = 0

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if self.mode not in ("floor", "round", "adaround"):
            raise ValueError(f"unknown quantization mode {self.mode!r}")
        if self.mode == "adaround":
            p = self.adaround
            if min(p.calib_count, p.steps) < 1 or min(p.learning_rate, p.lam) <= 0:
                raise ValueError("adaround parameters must be positive")


def step_size(w, bits: int) -> float:
    """eta = max|w| / (2^bits - 1); zero only for an all-zero tensor."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    a = as_array(w)
    wmax = float(np.abs(a).max()) if a.size else 0.0
    return wmax / (2.0 ** bits - 1.0)


def _floor_indices(a, eta):
    """Grid indices k with k*eta <= a < (k+1)*eta, where values already on
    the grid (up to quotient round-off) keep their own index."""
    q = a / eta
    near = np.round(q)
    snap = np.abs(q - near) <= _GRID_RTOL * np.maximum(1.0, np.abs(q))
    k = np.where(snap, near, np.floor(q))
    # correct stragglers against the representable products
    k = k + (~snap & ((k + 1.0) * eta <= a))
    k = k - (~snap & (k * eta > a))
    return k, q, snap


def quantize_floor(w, eta: float) -> np.ndarray:
    """Snap down to the eta grid; error in [0, eta).

    Values already on the grid pass through bit-identically, so the map
    is exactly idempotent.
    """
    a = as_array(w)
    if eta == 0.0:
        return a.copy()
    k, _, snap = _floor_indices(a, eta)
    return np.where(snap, a, k * eta)


def quantize_round(w, eta: float) -> np.ndarray:
    """Snap to the nearest eta grid point; exact half-way ties go away
    from zero.  Error in [-eta/2, eta/2]; on-grid values pass through
    bit-identically."""
    a = as_array(w)
    if eta == 0.0:
        return a.copy()
    q = a / eta
    near = np.round(q)
    noise = _GRID_RTOL * np.maximum(1.0, np.abs(q))
    snap = np.abs(q - near) <= noise
    k = np.floor(q)
    frac = q - k
    # quotients within rounding noise of .5 are true ties: away from zero
    tie = np.abs(frac - 0.5) <= noise
    up = np.where(tie, a > 0.0, frac > 0.5)
    return np.where(snap, a, (k + up) * eta)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _logit(p):
    return np.log(p / (1.0 - p))


def _calib_matrix(layer, calib_x):
    """Per-group design matrices A_g so the layer output is A_g @ W_g.T."""
    x = as_array(calib_x)
    if isinstance(layer, Dense):
        if x.ndim != 2 or x.shape[1] != layer.in_dim:
            raise ValueError("calibration inputs do not fit the layer")
        return [x], 1
    if isinstance(layer, Conv2d):
        cols = infer.im2col(
            x, layer.kernel, layer.stride, layer.padding, layer.groups
        )
        return cols, layer.groups
    raise ValueError(f"adaround supports dense and conv layers, not {layer!r}")


def adaround_layer(layer, w, calib_x, cfg: QuantConfig):
    """Learn per-weight rounding offsets on a calibration batch.

    Minimizes MSE(full-precision output, quantized output) plus
    lam * sum((sigmoid(alpha) - 0.5)^2) with Adam for cfg.adaround.steps
    steps, binarizes the offsets, and keeps plain floor quantization if
    it calibrates better (so the result is never worse than floor).

    Returns (quantized weights, binary offsets).
    """
    w = as_array(w)
    if calib_x is None or len(calib_x) == 0:
        raise ValueError("adaround needs a non-empty calibration set")
    eta = step_size(w, cfg.bits)
    if eta == 0.0:
        return w.copy(), np.zeros(w.shape)

    p = cfg.adaround
    mats, groups = _calib_matrix(layer, calib_x)
    og = w.shape[0] // groups
    wmats = [
        w[g * og : (g + 1) * og].reshape(og, -1) for g in range(groups)
    ]
    k = [_floor_indices(m, eta)[0] for m in wmats]
    rest = [np.clip(m / eta - kk, 1e-4, 1.0 - 1e-4) for m, kk in zip(wmats, k)]
    alpha = [_logit(r) for r in rest]
    fp_out = [a @ m.T for a, m in zip(mats, wmats)]
    n_out = sum(o.size for o in fp_out)

    # Adam on the offset logits
    m1 = [np.zeros_like(a) for a in alpha]
    m2 = [np.zeros_like(a) for a in alpha]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for t in range(1, p.steps + 1):
        loss = 0.0
        grads = []
        for g in range(groups):
            s = _sigmoid(alpha[g])
            wq = (k[g] + s) * eta
            resid = mats[g] @ wq.T - fp_out[g]
            loss += float(np.sum(resid * resid)) / n_out
            loss += p.lam * float(np.sum((s - 0.5) ** 2))
            dwq = (2.0 / n_out) * (resid.T @ mats[g])
            dalpha = (dwq * eta + 2.0 * p.lam * (s - 0.5)) * s * (1.0 - s)
            grads.append(dalpha)
        if not math.isfinite(loss):
            raise FloatingPointError("adaround loss diverged")
        for g in range(groups):
            m1[g] = beta1 * m1[g] + (1 - beta1) * grads[g]
            m2[g] = beta2 * m2[g] + (1 - beta2) * grads[g] ** 2
            mhat = m1[g] / (1 - beta1 ** t)
            vhat = m2[g] / (1 - beta2 ** t)
            alpha[g] -= p.learning_rate * mhat / (np.sqrt(vhat) + eps)

    def _calib_mse(wq_mats):
        err = 0.0
        for g in range(groups):
            resid = mats[g] @ wq_mats[g].T - fp_out[g]
            err += float(np.sum(resid * resid))
        return err / n_out

    offsets = [(_sigmoid(a) >= 0.5).astype(np.float64) for a in alpha]
    rounded = [(kk + h) * eta for kk, h in zip(k, offsets)]
    floored = [kk * eta for kk in k]
    if _calib_mse(rounded) > _calib_mse(floored):
        rounded = floored
        offsets = [np.zeros_like(h) for h in offsets]

    wq = np.concatenate([m.reshape((og,) + w.shape[1:]) for m in rounded])
    h = np.concatenate([m.reshape((og,) + w.shape[1:]) for m in offsets])
    return wq, h


# ---------------------------------------------------------------------------
# Cross-layer equalization


def cle_equalize_pair(w1, b1, w2, activation: str = "relu"):
    """Rescale an adjacent layer pair without changing its function.

    Per channel i: s_i = sqrt(r2_i / r1_i) with r1_i = max|row i of w1|
    and r2_i = max|column i of w2|; rows of w1 (and b1) scale by s_i,
    columns of w2 by 1/s_i.  The composition is unchanged for positively
    homogeneous activations, so anything but relu/identity is rejected.
    Channels with a zero range on either side are skipped (s_i = 1).

    Works on dense matrices (out, in) and conv weights
    (out, in/groups, p, p) with groups == 1 on both sides.

    Returns (w1', b1', w2', s).
    """
    if activation not in ("relu", "identity"):
        raise ValueError(
            f"{activation} is not positively homogeneous; equalization "
            "would change the function"
        )
    w1 = as_array(w1)
    w2 = as_array(w2)
    r1 = np.abs(w1).reshape(w1.shape[0], -1).max(axis=1)
    if w2.ndim == 2:
        r2 = np.abs(w2).max(axis=0)
    elif w2.ndim == 4:
        r2 = np.abs(w2).reshape(w2.shape[0], w2.shape[1], -1).max(axis=(0, 2))
    else:
        raise ValueError("second weight must be dense or conv-shaped")
    if r1.shape != r2.shape:
        raise ValueError(
            f"channel counts disagree: {r1.shape[0]} out vs {r2.shape[0]} in"
        )
    live = (r1 > 0) & (r2 > 0)
    s = np.ones_like(r1)
    s[live] = np.sqrt(r2[live] / r1[live])
    w1s = w1 * s.reshape((-1,) + (1,) * (w1.ndim - 1))
    b1s = None if b1 is None else as_array(b1) * s
    if w2.ndim == 2:
        w2s = w2 / s[None, :]
    else:
        w2s = w2 / s[None, :, None, None]
    return w1s, b1s, w2s, s


def cle_network(spec: NetworkSpec, weights):
    """Equalize every dense/conv pair separated by a single relu.

    Pairs are processed left to right; junctions with any other
    activation (or grouped convs) are left alone.  Returns a new weight
    dict; biases move with their rows, so the network function is
    preserved.
    """
    out = {k: np.asarray(v, dtype=np.float64).copy() for k, v in weights.items()}
    layers = spec.layers
    for i in range(len(layers) - 2):
        first, mid, second = layers[i], layers[i + 1], layers[i + 2]
        if not (isinstance(mid, Activation) and mid.fn == "relu"):
            continue
        if isinstance(first, Dense) and isinstance(second, Dense):
            w1s, b1s, w2s, _ = cle_equalize_pair(
                out[first.weight],
                out[first.bias] if first.bias else None,
                out[second.weight],
            )
            out[first.weight] = w1s
            if first.bias:
                out[first.bias] = b1s
            out[second.weight] = w2s
        elif (
            isinstance(first, Conv2d)
            and isinstance(second, Conv2d)
            and first.groups == 1
            and second.groups == 1
        ):
            w1s, _, w2s, _ = cle_equalize_pair(
                out[first.weight], None, out[second.weight]
            )
            out[first.weight] = w1s
            out[second.weight] = w2s
    return out


# ---------------------------------------------------------------------------
# Whole-network quantization


def quantize_network(spec: NetworkSpec, weights, cfg: QuantConfig,
                     calib_inputs=None):
    """Quantize every weight tensor; biases are copied bit-identically.

    For adaround, calibration inputs (batch shaped like the network
    input) are required; each layer calibrates against its own
    full-precision input activations.  Returns
    (new_weights, dtheta_inf, per-tensor eta dict).
    """
    violations = validate(spec, weights)
    if violations:
        raise ValueError("invalid spec: " + "; ".join(violations))

    new_weights = dict(weights)
    etas: dict[str, float] = {}
    names = set(weight_tensor_names(spec))

    taps = None
    if cfg.mode == "adaround":
        if calib_inputs is None:
            raise ValueError("adaround needs calibration inputs")
        calib = as_array(calib_inputs)[: cfg.adaround.calib_count]
        if calib.shape[0] == 0:
            raise ValueError("adaround needs a non-empty calibration set")
        taps = infer.forward_taps(spec, weights, calib)

    dtheta = 0.0
    for _, layer in spec.weight_layers():
        for conv_or_layer, name in _quantizable_tensors(layer):
            w = as_array(weights[name])
            eta = step_size(w, cfg.bits)
            etas[name] = eta
            if cfg.mode == "floor":
                wq = quantize_floor(w, eta)
            elif cfg.mode == "round":
                wq = quantize_round(w, eta)
            else:
                wq, _ = adaround_layer(conv_or_layer, w, taps[name], cfg)
            new_weights[name] = wq
            if name in names and w.size:
                dtheta = max(dtheta, float(np.abs(w - wq).max()))
    return new_weights, dtheta, etas


def _quantizable_tensors(layer):
    """(applying layer, tensor name) pairs for a parameterized layer."""
    if isinstance(layer, Dense):
        return [(layer, layer.weight)]
    if isinstance(layer, Conv2d):
        return [(layer, layer.weight)]
    convs = [layer.conv1, layer.conv2]
    if hasattr(layer, "conv3"):
        convs.append(layer.conv3)
    if layer.shortcut is not None:
        convs.append(layer.shortcut)
    return [(c, c.weight) for c in convs]
