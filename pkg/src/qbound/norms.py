"""Exact infinity operator norms for every layer kind.

Convolutions are handled through their implicit block-Toeplitz structure:
the norm is the largest absolute row sum of the (never materialized)
convolution matrix, found by scanning output positions and summing the
filter taps that land inside the zero-padded input.  Residual and
bottleneck blocks decompose into a short sequence of structured stage
matrices V1(,V2),V3 whose norms follow from the constituent conv norms:

* two-conv residual block:   ||V1|| = max(1, ||W1||),
                             ||V2|| = ||W2|| + 1            (identity shortcut)
                             ||V2|| <= ||W2|| + ||Ws||      (conv shortcut)
* bottleneck block:          ||V1|| = max(1, ||W1||),
                             ||V2|| = max(1, ||W2||),
                             ||V3|| = ||W3|| + 1  or  <= ||W3|| + ||Ws||.

The resulting NormProfile (per-stage norm, widths, sparse row support,
depth, domain) is the only thing the bound formulas consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import kernels
from .model import (
    AvgPool,
    Activation,
    Bottleneck,
    Conv2d,
    Dense,
    Flatten,
    NetworkSpec,
    ResBlock,
    network_has_bias,
    trace_shapes,
    validate,
)
from .tensor import DimensionError, as_array, opnorm_inf


class SizeCapError(ValueError):
    """Materialized matrix would exceed the configured element cap."""


@dataclass(frozen=True)
class StageNorm:
    """One linear stage of the staged network view.

    r           -- infinity operator norm of the stage matrix (upper bound
                   when exact=False, which only happens for block stages
                   with a non-identity shortcut)
    width_in    -- flattened input width N_{l-1} of the stage (bias-free)
    width_out   -- flattened output width N_l
    sparse_width-- max number of quantizable entries in any row of the
                   stage-difference matrix (set for conv and block stages;
                   None for dense stages)
    conv        -- (kernel, in-channels seen per output) for plain conv
                   stages, None otherwise
    """

    r: float
    width_in: int
    width_out: int
    sparse_width: Optional[int] = None
    conv: Optional[tuple[int, int]] = None
    exact: bool = True
    kind: str = "dense"


@dataclass(frozen=True)
class NormProfile:
    stages: tuple[StageNorm, ...]
    domain_d: float
    has_bias: bool

    @property
    def depth(self) -> int:
        return len(self.stages)

    @property
    def rs(self) -> tuple[float, ...]:
        return tuple(s.r for s in self.stages)

    @property
    def widths_in(self) -> tuple[int, ...]:
        return tuple(s.width_in for s in self.stages)

    @property
    def max_width(self) -> int:
        """Largest layer width including the output layer."""
        return max(max(self.widths_in), self.stages[-1].width_out)

    @property
    def all_sparse(self) -> bool:
        return all(s.sparse_width is not None for s in self.stages)


def dense_norm(w, bias=None, include_bias: bool = False) -> float:
    """Max absolute row sum, with |bias_i| added to row i when requested."""
    a = as_array(w)
    if a.ndim != 2:
        raise DimensionError("dense_norm needs a 2-D weight matrix")
    sums = np.abs(a).sum(axis=1)
    if include_bias and bias is not None:
        b = as_array(bias)
        if b.shape != (a.shape[0],):
            raise DimensionError(
                f"bias shape {b.shape} does not match {a.shape[0]} rows"
            )
        sums = sums + np.abs(b)
    return float(sums.max()) if sums.size else 0.0


def conv_norm_implicit(conv: Conv2d, weight, in_hw, bias=None,
                       include_bias: bool = False) -> float:
    """Infinity operator norm of the conv's implicit matrix.

    Equals opnorm_inf of the materialized block-Toeplitz matrix without
    building it.  Stride, padding, and groups (including depthwise) are
    honored; boundary rows with fewer in-bounds taps are scanned rather
    than assuming an interior row exists.  With include_bias the norm is
    taken on the bias-augmented matrix (|b_oc| joins every row of its
    channel).
    """
    if in_hw is None:
        raise ValueError("conv_norm_implicit needs the input spatial extents")
    w = as_array(weight)
    if w.shape != conv.weight_shape:
        raise DimensionError(
            f"conv weight shape {w.shape}, expected {conv.weight_shape}"
        )
    b = as_array(bias) if (include_bias and bias is not None) else None
    return kernels.conv_rowsum_max(
        w, tuple(in_hw), stride=conv.stride, pad=conv.padding,
        groups=conv.groups, bias=b,
    )


def toeplitz_matrix(conv: Conv2d, weight, in_hw, cap: int = 1 << 24) -> np.ndarray:
    """Materialize the conv as an explicit matrix (desk scale only).

    Rows are output positions (channel-major, then row-major spatial);
    columns are input positions in the same order, so the matrix acts on
    row-major flattened feature maps.  Raises SizeCapError past `cap`
    elements.
    """
    w = as_array(weight)
    h, wd = in_hw
    ho, wo = (h + 2 * conv.padding - conv.kernel) // conv.stride + 1, (
        wd + 2 * conv.padding - conv.kernel
    ) // conv.stride + 1
    rows = conv.out_ch * ho * wo
    cols = conv.in_ch * h * wd
    if rows * cols > cap:
        raise SizeCapError(f"materialized conv would be {rows}x{cols} > cap")
    mat = np.zeros((rows, cols))
    og = conv.out_ch // conv.groups
    for oc in range(conv.out_ch):
        g = oc // og
        for oy in range(ho):
            for ox in range(wo):
                row = (oc * ho + oy) * wo + ox
                for ky in range(conv.kernel):
                    iy = oy * conv.stride - conv.padding + ky
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(conv.kernel):
                        ix = ox * conv.stride - conv.padding + kx
                        if ix < 0 or ix >= wd:
                            continue
                        for ic in range(conv.group_in):
                            col = ((g * conv.group_in + ic) * h + iy) * wd + ix
                            mat[row, col] = w[oc, ic, ky, kx]
    return mat


# ---------------------------------------------------------------------------
# Residual / bottleneck blocks as staged matrices


@dataclass
class StagedBlock:
    """Explicit stage matrices for a block, with partial-activation sizes.

    Evaluating V_last @ act_head(... act_head(V1 @ f)) reproduces the
    block forward exactly; act_sizes[i] is how many leading components of
    stage i's output pass through the activation (the rest is the
    untouched shortcut carry).
    """

    vs: list[np.ndarray]
    act_sizes: list[int]
    activation: str = "relu"
    final_activation: bool = True


def residual_v_matrices(w1, w2, shortcut=None, activation="relu") -> StagedBlock:
    """Stage matrices for a two-conv residual block from explicit
    matrices: V1 stacks [W1; I], V2 concatenates [W2, Ws-or-I]."""
    w1 = as_array(w1)
    w2 = as_array(w2)
    n = w1.shape[1]
    eye = np.eye(n)
    sc = eye if shortcut is None else as_array(shortcut)
    v1 = np.vstack([w1, eye])
    v2 = np.hstack([w2, sc])
    return StagedBlock([v1, v2], [w1.shape[0]], activation, True)


def bottleneck_v_matrices(w1, w2, w3, shortcut=None, activation="relu",
                          final_activation=True) -> StagedBlock:
    """Stage matrices for a bottleneck block: V1 = [W1; I],
    V2 = [[W2, 0], [0, I]], V3 = [W3, Ws-or-I]."""
    w1, w2, w3 = as_array(w1), as_array(w2), as_array(w3)
    n = w1.shape[1]
    d1, d2 = w1.shape[0], w2.shape[0]
    eye = np.eye(n)
    sc = eye if shortcut is None else as_array(shortcut)
    v1 = np.vstack([w1, eye])
    v2 = np.zeros((d2 + n, d1 + n))
    v2[:d2, :d1] = w2
    v2[d2:, d1:] = eye
    v3 = np.hstack([w3, sc])
    return StagedBlock([v1, v2, v3], [d1, d2], activation, final_activation)


def staged_forward(block: StagedBlock, f: np.ndarray, act_fn) -> np.ndarray:
    """Evaluate the staged form on a flat input vector (or batch columns).

    act_fn(name, x) applies the named activation elementwise.
    """
    z = as_array(f)
    for v, k in zip(block.vs[:-1], block.act_sizes):
        z = v @ z
        z[:k] = act_fn(block.activation, z[:k])
    z = block.vs[-1] @ z
    if block.final_activation:
        z = act_fn(block.activation, z)
    return z


def materialize_block(block, weights, in_shape, cap: int = 1 << 24) -> StagedBlock:
    """Explicit stage matrices for a ResBlock/Bottleneck whose convs are
    materialized as Toeplitz matrices.  Desk-scale extents only."""
    hw = tuple(in_shape[1:])
    if isinstance(block, ResBlock):
        h1 = toeplitz_matrix(block.conv1, weights[block.conv1.weight], hw, cap)
        mid_hw = _out_hw(block.conv1, hw)
        h2 = toeplitz_matrix(block.conv2, weights[block.conv2.weight], mid_hw, cap)
        sc = None
        if block.shortcut is not None:
            sc = toeplitz_matrix(block.shortcut, weights[block.shortcut.weight], hw, cap)
        return residual_v_matrices(h1, h2, sc, block.activation)
    if isinstance(block, Bottleneck):
        h1 = toeplitz_matrix(block.conv1, weights[block.conv1.weight], hw, cap)
        hw1 = _out_hw(block.conv1, hw)
        h2 = toeplitz_matrix(block.conv2, weights[block.conv2.weight], hw1, cap)
        hw2 = _out_hw(block.conv2, hw1)
        h3 = toeplitz_matrix(block.conv3, weights[block.conv3.weight], hw2, cap)
        sc = None
        if block.shortcut is not None:
            sc = toeplitz_matrix(block.shortcut, weights[block.shortcut.weight], hw, cap)
        return bottleneck_v_matrices(
            h1, h2, h3, sc, block.activation, block.final_activation
        )
    raise ValueError(f"not a block layer: {block!r}")


def _out_hw(conv: Conv2d, hw):
    h, w = hw
    return (
        (h + 2 * conv.padding - conv.kernel) // conv.stride + 1,
        (w + 2 * conv.padding - conv.kernel) // conv.stride + 1,
    )


def _flat(shape) -> int:
    return int(np.prod(shape))


def _conv_sparse(conv: Conv2d) -> int:
    # max quantizable entries per row: p^2 taps per input channel the
    # output actually sees (depthwise sees exactly one)
    return conv.kernel * conv.kernel * conv.group_in


def block_stage_norms(block, weights, in_shape) -> list[StageNorm]:
    """Per-stage norms of a block's V matrices from its conv norms.

    Exact for the inner stages; the final stage with a non-identity
    shortcut gets the upper bound ||W_last|| + ||Ws|| and exact=False.
    """
    hw = tuple(in_shape[1:])
    n = _flat(in_shape)
    if isinstance(block, ResBlock):
        convs = [block.conv1, block.conv2]
    elif isinstance(block, Bottleneck):
        convs = [block.conv1, block.conv2, block.conv3]
    else:
        raise ValueError(f"not a block layer: {block!r}")

    norms, shapes = [], [in_shape]
    cur = hw
    for c in convs:
        norms.append(conv_norm_implicit(c, weights[c.weight], cur))
        cur = _out_hw(c, cur)
        shapes.append((c.out_ch,) + cur)
    out = _flat(shapes[-1])
    mids = [_flat(s) for s in shapes[1:-1]]

    if block.shortcut is None:
        sc_norm, sc_sparse, exact_last = 1.0, 0, True
    else:
        sc_norm = conv_norm_implicit(block.shortcut, weights[block.shortcut.weight], hw)
        sc_sparse = _conv_sparse(block.shortcut)
        exact_last = False

    stages = []
    widths = [n] + [m + n for m in mids]  # stage input widths
    for i, c in enumerate(convs[:-1]):
        stages.append(
            StageNorm(
                r=max(1.0, norms[i]),
                width_in=widths[i],
                width_out=widths[i + 1],
                sparse_width=_conv_sparse(c),
                kind="block",
            )
        )
    stages.append(
        StageNorm(
            r=norms[-1] + sc_norm,
            width_in=widths[-1],
            width_out=out,
            sparse_width=_conv_sparse(convs[-1]) + sc_sparse,
            exact=exact_last,
            kind="block",
        )
    )
    return stages


# ---------------------------------------------------------------------------
# Whole-network profiles


def profile_of(spec: NetworkSpec, weights) -> NormProfile:
    """One StageNorm per linear stage, in network order.

    Activations, flatten, and average pooling contribute no stage (they
    are 1-Lipschitz and map 0 to 0, so the layerwise analysis absorbs
    them).  A two-conv residual block contributes 2 stages and a
    bottleneck 3.  When the network has any bias, dense norms are
    computed on the bias-augmented matrix.
    """
    violations = validate(spec, weights)
    if violations:
        raise ValueError("invalid spec: " + "; ".join(violations))
    shapes = trace_shapes(spec)
    has_bias = network_has_bias(spec)
    stages: list[StageNorm] = []
    for layer, shape_in, shape_out in zip(spec.layers, shapes, shapes[1:]):
        if isinstance(layer, (Activation, Flatten, AvgPool)):
            continue
        if isinstance(layer, Dense):
            bias = weights[layer.bias] if layer.bias is not None else None
            r = dense_norm(weights[layer.weight], bias, include_bias=has_bias)
            stages.append(
                StageNorm(r=r, width_in=layer.in_dim, width_out=layer.out_dim)
            )
        elif isinstance(layer, Conv2d):
            bias = weights[layer.bias] if layer.bias is not None else None
            r = conv_norm_implicit(
                layer, weights[layer.weight], shape_in[1:],
                bias=bias, include_bias=has_bias,
            )
            stages.append(
                StageNorm(
                    r=r,
                    width_in=_flat(shape_in),
                    width_out=_flat(shape_out),
                    sparse_width=_conv_sparse(layer),
                    conv=(layer.kernel, layer.group_in),
                    kind="conv",
                )
            )
        elif isinstance(layer, (ResBlock, Bottleneck)):
            stages.extend(block_stage_norms(layer, weights, shape_in))
        else:
            raise ValueError(f"unsupported layer {layer!r}")
    return NormProfile(
        stages=tuple(stages), domain_d=spec.domain_d, has_bias=has_bias
    )


def merge_profiles(a: NormProfile, b: NormProfile) -> NormProfile:
    """Elementwise max of two structurally identical profiles.

    The bound formulas need a single per-stage norm dominating both
    parameter sets;
    this produces it from the per-network exact profiles.
    """
    if a.depth != b.depth or a.has_bias != b.has_bias:
        raise ValueError("profiles come from different architectures")
    stages = []
    for sa, sb in zip(a.stages, b.stages):
        if (sa.width_in, sa.width_out, sa.sparse_width) != (
            sb.width_in,
            sb.width_out,
            sb.sparse_width,
        ):
            raise ValueError("profiles come from different architectures")
        stages.append(
            replace(sa, r=max(sa.r, sb.r), exact=sa.exact and sb.exact)
        )
    return NormProfile(
        stages=tuple(stages),
        domain_d=max(a.domain_d, b.domain_d),
        has_bias=a.has_bias,
    )


def output_norm_bound(profile, x_norm: float) -> float:
    """Upper bound on the network's output infinity norm.

    max( max_{l=2..L} prod_{s=l}^{L} r_s , prod_{s=1}^{L} r_s * x_norm ),
    with the empty max treated as 1 (the L=1 convention).  For networks
    with biases, pass the norm of the bias-augmented input, i.e.
    max(||x||_inf, 1).
    """
    rs = profile.rs if isinstance(profile, NormProfile) else tuple(profile)
    return _output_bound_from_rs(rs, x_norm)


def _output_bound_from_rs(rs, x_norm: float) -> float:
    if not rs:
        return float(x_norm)
    best, suffix = 1.0 if len(rs) == 1 else -math.inf, 1.0
    for r in reversed(rs[1:]):
        suffix *= r
        best = max(best, suffix)
    return max(best, suffix * rs[0] * x_norm)
