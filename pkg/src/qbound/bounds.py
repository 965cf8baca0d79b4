"""Worst-case output-deviation bounds for weight-quantized networks.

Five certified bounds on sup_x ||f_theta(x) - f_theta'(x)||_inf over the
input box [-D, D]^N0, all of the form C * ||theta - theta'||_inf:

* bound_max_norm   C = (D+1) * N * L^2 * r_max^(L-1)          (prior art)
* bound_path_norm  C = 2 * max(D,1) * L * N^2 * r_max^(L-1)   (prior art,
                   certifies the l1 output norm, which dominates l-inf)
* bound_mean_norm  C = max(D,1) * sum(N_{l-1}) * r_mean^(L-1) (biases
                   allowed but shared between the two networks)
* bound_no_bias    C = D * sum(N_{l-1}) * r_hat^(L-1)         (bias-free)
* bound_conv       C = D * sum(p_l^2 c_{l-1}) * r_conv^(L-1)  (bias-free,
                   purely convolutional; widths count only the nonzero
                   row entries of the implicit conv matrices)

r_mean is the (L-1)-th root of the largest product of consecutive layer
norms that skips one layer and may drop a prefix; r_conv (= r_hat) keeps
the full leave-one-out products only, so r_conv <= r_mean always.

Everything is computed as sums of log10 terms: r^(L-1) overflows float64
by hundreds of decades on realistic depths.  Linear values are
reconstructed only below 1e300.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import (
    Bottleneck,
    Conv2d,
    Dense,
    NetworkSpec,
    ResBlock,
    network_has_bias,
    trace_shapes,
)
from .norms import (
    NormProfile,
    _output_bound_from_rs,
    block_stage_norms,
    conv_norm_implicit,
    dense_norm,
)

LINEAR_LOG10_MAX = 300.0

FLAG_HYPOTHESIS_R = "r_max < 1: prior-bound hypothesis violated"
FLAG_L1 = "certifies the l1 output norm"
FLAG_INEXACT = "contains bounded-not-exact stage norms"


class PreconditionError(ValueError):
    """The profile does not satisfy the bound's hypotheses."""


@dataclass(frozen=True)
class BoundValue:
    """A bound in log10 space plus its linear value when representable."""

    log10: float
    flags: tuple[str, ...] = ()

    @property
    def linear(self) -> Optional[float]:
        if self.log10 == -math.inf:
            return 0.0
        if self.log10 < LINEAR_LOG10_MAX:
            return 10.0 ** self.log10
        return None


def _log10(x: float) -> float:
    if x < 0:
        raise ValueError("negative factor in a bound product")
    return math.log10(x) if x > 0 else -math.inf


def _logs(rs) -> list[float]:
    return [_log10(r) for r in rs]


def r_max(profile: NormProfile) -> float:
    return max(profile.rs)


def _r_mean_log10_pow(rlogs) -> float:
    """max over (l, i) of sum_{j=i..L, j != l} log10 r_j.

    The i range is 1..l-1; for l = 1 the candidate is the full suffix
    product from layer 2 on (the l = 1 term of the layerwise telescoping
    carries exactly that product).  This is (L-1) * log10(r_mean).
    """
    L = len(rlogs)
    if L <= 1:
        return 0.0
    suffix = [0.0] * (L + 1)  # suffix[i] = sum of rlogs[i:]
    for i in range(L - 1, -1, -1):
        suffix[i] = suffix[i + 1] + rlogs[i]
    best = suffix[1]  # l = 1 convention: prod_{j=2..L}
    for l in range(2, L + 1):
        for i in range(1, l):
            best = max(best, suffix[i - 1] - rlogs[l - 1])
    return best


def _r_loo_log10_pow(rlogs) -> float:
    """max over l of sum_{k != l} log10 r_k; this is (L-1)*log10(r_conv)."""
    L = len(rlogs)
    if L <= 1:
        return 0.0
    total = sum(rlogs)
    if -math.inf in rlogs:
        # dropping one zero still leaves the others; enumerate directly
        return max(
            sum(v for k, v in enumerate(rlogs) if k != l) for l in range(L)
        )
    return max(total - v for v in rlogs)


def r_mean(profile: NormProfile) -> float:
    """Geometric-mean-like norm summary; 1.0 at depth 1 by convention."""
    L = profile.depth
    if L <= 1:
        return 1.0
    return 10.0 ** (_r_mean_log10_pow(_logs(profile.rs)) / (L - 1))


def r_conv(profile: NormProfile) -> float:
    """Leave-one-out norm summary for bias-free profiles; never exceeds
    r_mean (its candidate products are a subset)."""
    if profile.has_bias:
        raise PreconditionError("r_conv needs a profile built without bias")
    L = profile.depth
    if L <= 1:
        return 1.0
    return 10.0 ** (_r_loo_log10_pow(_logs(profile.rs)) / (L - 1))


def _base_flags(profile: NormProfile) -> tuple[str, ...]:
    return () if all(s.exact for s in profile.stages) else (FLAG_INEXACT,)


def bound_max_norm(profile: NormProfile, dtheta: float) -> BoundValue:
    """(D+1) * N * L^2 * r_max^(L-1) * dtheta.

    Stated for r_max >= 1; still computed otherwise, with a flag, so
    ratio curves remain plottable across regimes.
    """
    L, rmax = profile.depth, r_max(profile)
    flags = _base_flags(profile)
    if rmax < 1.0:
        flags = flags + (FLAG_HYPOTHESIS_R,)
    value = (
        _log10(profile.domain_d + 1.0)
        + _log10(profile.max_width)
        + 2.0 * _log10(L)
        + (L - 1) * _log10(rmax)
        + _log10(dtheta)
    )
    return BoundValue(value, flags)


def bound_path_norm(profile: NormProfile, dtheta: float) -> BoundValue:
    """2 * max(D,1) * L * N^2 * r_max^(L-1) * dtheta, certifying the l1
    output deviation (which dominates the l-inf one)."""
    L = profile.depth
    value = (
        _log10(2.0)
        + _log10(max(profile.domain_d, 1.0))
        + _log10(L)
        + 2.0 * _log10(profile.max_width)
        + (L - 1) * _log10(r_max(profile))
        + _log10(dtheta)
    )
    return BoundValue(value, _base_flags(profile) + (FLAG_L1,))


def bound_mean_norm(profile: NormProfile, dtheta: float) -> BoundValue:
    """max(D,1) * sum(N_{l-1}) * r_mean^(L-1) * dtheta.

    Valid with biases as long as both networks share them (bias-free
    networks satisfy that trivially).
    """
    value = (
        _log10(max(profile.domain_d, 1.0))
        + _log10(sum(profile.widths_in))
        + _r_mean_log10_pow(_logs(profile.rs))
        + _log10(dtheta)
    )
    return BoundValue(value, _base_flags(profile))


def bound_no_bias(profile: NormProfile, dtheta: float) -> BoundValue:
    """D * sum(N_{l-1}) * r_hat^(L-1) * dtheta for bias-free networks;
    r_hat is the leave-one-out summary (same formula as r_conv)."""
    if profile.has_bias:
        raise PreconditionError("bound_no_bias needs a bias-free profile")
    value = (
        _log10(profile.domain_d)
        + _log10(sum(profile.widths_in))
        + _r_loo_log10_pow(_logs(profile.rs))
        + _log10(dtheta)
    )
    return BoundValue(value, _base_flags(profile))


def bound_conv(profile: NormProfile, dtheta: float) -> BoundValue:
    """D * sum of per-stage sparse widths * r_conv^(L-1) * dtheta for
    purely convolutional bias-free networks."""
    if profile.has_bias:
        raise PreconditionError("bound_conv needs a bias-free profile")
    if not profile.all_sparse:
        raise PreconditionError(
            "bound_conv needs every stage convolutional (dense stage present)"
        )
    sparse_sum = sum(s.sparse_width for s in profile.stages)
    value = (
        _log10(profile.domain_d)
        + _log10(sparse_sum)
        + _r_loo_log10_pow(_logs(profile.rs))
        + _log10(dtheta)
    )
    return BoundValue(value, _base_flags(profile))


def applicable_bound_name(profile: NormProfile) -> str:
    """Which of the sharpened bounds certifies this profile."""
    if profile.has_bias:
        return "bound_mean_norm"
    if profile.all_sparse:
        return "bound_conv"
    return "bound_no_bias"


def new_bound(profile: NormProfile, dtheta: float) -> BoundValue:
    """The applicable sharpened bound (see applicable_bound_name)."""
    name = applicable_bound_name(profile)
    return {
        "bound_mean_norm": bound_mean_norm,
        "bound_conv": bound_conv,
        "bound_no_bias": bound_no_bias,
    }[name](profile, dtheta)


# ---------------------------------------------------------------------------
# Layerwise decomposition (diagnostic, tighter than the width relaxation)


def layerwise_decomposition(spec: NetworkSpec, weights_a, weights_b,
                            x_norm: float):
    """Per-stage terms of the telescoping output-difference bound.

    term_l = (prod_{k>l} ||W_k||) * ||W_l - W'_l|| * prefix_l, where
    prefix_l bounds the second network's stage-(l-1) output norm.  Uses
    the exact per-stage difference norms instead of the N * dtheta
    relaxation, so sum(terms) <= bound_mean_norm on the same inputs.
    Requires both weight sets on the same architecture with identical
    biases.  Returns (terms, total).
    """
    shapes = trace_shapes(spec)
    has_bias = network_has_bias(spec)
    suffix_norms = []  # ||W_k|| of weights_a, bias-free
    prefix_norms = []  # ||W~'_k|| of weights_b (bias included when present)
    diff_norms = []  # ||W_k - W'_k||
    for layer, shape_in in zip(spec.layers, shapes):
        if isinstance(layer, (Dense, Conv2d)) and layer.bias is not None:
            if not np.array_equal(weights_a[layer.bias], weights_b[layer.bias]):
                raise PreconditionError(
                    "layerwise decomposition needs identical biases"
                )
        if isinstance(layer, Dense):
            wa, wb = weights_a[layer.weight], weights_b[layer.weight]
            bias = weights_b[layer.bias] if layer.bias is not None else None
            suffix_norms.append(dense_norm(wa))
            prefix_norms.append(dense_norm(wb, bias, include_bias=has_bias))
            diff_norms.append(dense_norm(np.asarray(wa) - np.asarray(wb)))
        elif isinstance(layer, Conv2d):
            wa, wb = weights_a[layer.weight], weights_b[layer.weight]
            bias = weights_b[layer.bias] if layer.bias is not None else None
            suffix_norms.append(conv_norm_implicit(layer, wa, shape_in[1:]))
            prefix_norms.append(
                conv_norm_implicit(
                    layer, wb, shape_in[1:], bias=bias, include_bias=has_bias
                )
            )
            diff_norms.append(
                conv_norm_implicit(
                    layer, np.asarray(wa) - np.asarray(wb), shape_in[1:]
                )
            )
        elif isinstance(layer, (ResBlock, Bottleneck)):
            dw = {
                name: np.asarray(weights_a[name]) - np.asarray(weights_b[name])
                for name in _block_weight_names(layer)
            }
            suffix_norms.extend(
                s.r for s in block_stage_norms(layer, weights_a, shape_in)
            )
            prefix_norms.extend(
                s.r for s in block_stage_norms(layer, weights_b, shape_in)
            )
            # stage differences: the identity carries cancel, so no
            # +1 / max(1, .) floor here
            diff_norms.extend(_block_diff_norms(layer, dw, shape_in))
        else:
            continue

    L = len(suffix_norms)
    terms = []
    for l in range(1, L + 1):
        suffix = 1.0
        for k in range(l, L):
            suffix *= suffix_norms[k]
        if l == 1:
            prefix = x_norm
        elif has_bias:
            prefix = _output_bound_from_rs(
                tuple(prefix_norms[: l - 1]), max(x_norm, 1.0)
            )
        else:
            prefix = x_norm
            for k in range(l - 1):
                prefix *= prefix_norms[k]
        terms.append(suffix * diff_norms[l - 1] * prefix)
    return terms, float(sum(terms))


def _block_weight_names(layer):
    convs = [layer.conv1, layer.conv2]
    if isinstance(layer, Bottleneck):
        convs.append(layer.conv3)
    if layer.shortcut is not None:
        convs.append(layer.shortcut)
    return [c.weight for c in convs]


def _block_diff_norms(layer, diff_weights, in_shape):
    """Exact stage norms of V - V' (identity blocks cancel)."""
    hw = tuple(in_shape[1:])
    convs = [layer.conv1, layer.conv2]
    if isinstance(layer, Bottleneck):
        convs.append(layer.conv3)
    out = []
    cur = hw
    for c in convs:
        out.append(conv_norm_implicit(c, diff_weights[c.weight], cur))
        cur = (
            (cur[0] + 2 * c.padding - c.kernel) // c.stride + 1,
            (cur[1] + 2 * c.padding - c.kernel) // c.stride + 1,
        )
    if layer.shortcut is not None:
        out[-1] += conv_norm_implicit(
            layer.shortcut, diff_weights[layer.shortcut.weight], hw
        )
    return out


# ---------------------------------------------------------------------------
# Reports and ratios


@dataclass
class BoundReport:
    """Everything a comparison row needs, per (network pair, dtheta)."""

    bounds: dict[str, BoundValue]
    applicable: str
    dtheta_inf: float
    r_max: float
    r_mean: float
    r_conv: Optional[float]
    per_layer_terms: Optional[list[float]] = None
    decomposition_total: Optional[float] = None
    flags: tuple[str, ...] = ()

    @property
    def ratio_log10(self) -> Optional[float]:
        if self.dtheta_inf == 0.0:
            return None
        return (
            self.bounds["bound_max_norm"].log10
            - self.bounds[self.applicable].log10
        )


def build_report(profile: NormProfile, dtheta: float,
                 per_layer_terms=None) -> BoundReport:
    """Evaluate every applicable bound on a shared profile.

    per_layer_terms, when given, is the layerwise_decomposition output
    for the same weight pair (a strictly tighter diagnostic than the
    bounds themselves).
    """
    bounds = {
        "bound_max_norm": bound_max_norm(profile, dtheta),
        "bound_path_norm": bound_path_norm(profile, dtheta),
        "bound_mean_norm": bound_mean_norm(profile, dtheta),
    }
    rc = None
    if not profile.has_bias:
        bounds["bound_no_bias"] = bound_no_bias(profile, dtheta)
        rc = r_conv(profile)
        if profile.all_sparse:
            bounds["bound_conv"] = bound_conv(profile, dtheta)
    terms = None if per_layer_terms is None else list(per_layer_terms)
    return BoundReport(
        bounds=bounds,
        applicable=applicable_bound_name(profile),
        dtheta_inf=dtheta,
        r_max=r_max(profile),
        r_mean=r_mean(profile),
        r_conv=rc,
        per_layer_terms=terms,
        decomposition_total=None if terms is None else float(sum(terms)),
        flags=_base_flags(profile),
    )


def ratio_log10(report: BoundReport) -> float:
    """log10(prior max-norm bound) - log10(the applicable new bound).

    The dtheta factor cancels, but dtheta = 0 makes both bounds zero and
    the ratio meaningless, hence the error.
    """
    if report.dtheta_inf == 0.0:
        raise ValueError("ratio undefined at dtheta = 0 (both bounds vanish)")
    return (
        report.bounds["bound_max_norm"].log10
        - report.bounds[report.applicable].log10
    )


def conv_ratio_log10(depth: int, width_prev: float, rmax: float,
                     sparse_width_sum: float, rconv: float,
                     domain_d: float = 1.0) -> float:
    """Ratio of the prior max-norm bound to the conv bound from summary
    parameters alone (depth, dense width, r_max, sum of p^2*c, r_conv).

    Handy for reproducing published comparison tables where only these
    representative values are given; the dtheta factor cancels.
    """
    prev = (
        _log10(domain_d + 1.0)
        + _log10(width_prev)
        + 2.0 * _log10(depth)
        + (depth - 1) * _log10(rmax)
    )
    new = (
        _log10(domain_d)
        + _log10(sparse_width_sum)
        + (depth - 1) * _log10(rconv)
    )
    return prev - new
