"""Reference forward pass and empirical error/accuracy estimators.

The forward engine is the ground truth every certificate is checked
against: direct convolution honoring stride/padding/groups, residual and
bottleneck blocks with their shortcut additions, and the 1-Lipschitz
activations (relu, relu6, tanh, identity).

The empirical sup-norm estimator samples the input box uniformly (plus
optional adversarial sign-vector probes) and therefore reports a lower
bound on the true worst case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import (
    Activation,
    AvgPool,
    Bottleneck,
    Conv2d,
    Dataset,
    Dense,
    Flatten,
    NetworkSpec,
    ResBlock,
    trace_shapes,
)
from .norms import SizeCapError, toeplitz_matrix
from .tensor import as_array


def apply_activation(kind: str, x):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "relu6":
        return np.minimum(np.maximum(x, 0.0), 6.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def im2col(x, kernel: int, stride: int, padding: int, groups: int):
    """Per-group design matrices: list of (n*ho*wo, c_g*k*k) arrays such
    that cols[g] @ w[g].reshape(out_g, -1).T gives group g's output."""
    x = as_array(x)
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    cg = c // groups
    out = []
    for g in range(groups):
        block = win[:, g * cg : (g + 1) * cg]  # (n, cg, ho, wo, k, k)
        out.append(
            block.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cg * kernel * kernel)
        )
    return out


def _dense(x, w, b):
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def _conv(x, layer: Conv2d, w, b=None):
    out = kernels.conv2d_forward(
        x, w, stride=layer.stride, pad=layer.padding, groups=layer.groups
    )
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def _block_forward(layer, weights, x, taps=None):
    act = layer.activation
    h = _conv(x, layer.conv1, as_array(weights[layer.conv1.weight]))
    if taps is not None:
        taps[layer.conv1.weight] = x
    h = apply_activation(act, h)
    if taps is not None:
        taps[layer.conv2.weight] = h
    h = _conv(h, layer.conv2, as_array(weights[layer.conv2.weight]))
    if isinstance(layer, Bottleneck):
        h = apply_activation(act, h)
        if taps is not None:
            taps[layer.conv3.weight] = h
        h = _conv(h, layer.conv3, as_array(weights[layer.conv3.weight]))
    if layer.shortcut is None:
        sc = x
    else:
        if taps is not None:
            taps[layer.shortcut.weight] = x
        sc = _conv(x, layer.shortcut, as_array(weights[layer.shortcut.weight]))
    out = h + sc
    final = layer.final_activation if isinstance(layer, Bottleneck) else True
    return apply_activation(act, out) if final else out


def forward_batch(spec: NetworkSpec, weights, xs, taps=None) -> np.ndarray:
    """Run a batch (n, *input_shape) through the network."""
    x = as_array(xs)
    if x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(
            f"batch shaped {x.shape[1:]}, network expects {tuple(spec.input_shape)}"
        )
    for layer in spec.layers:
        if isinstance(layer, Dense):
            if taps is not None:
                taps[layer.weight] = x
            b = as_array(weights[layer.bias]) if layer.bias is not None else None
            x = _dense(x, as_array(weights[layer.weight]), b)
        elif isinstance(layer, Conv2d):
            if taps is not None:
                taps[layer.weight] = x
            b = as_array(weights[layer.bias]) if layer.bias is not None else None
            x = _conv(x, layer, as_array(weights[layer.weight]), b)
        elif isinstance(layer, Activation):
            x = apply_activation(layer.fn, x)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, AvgPool):
            n, c, h, w = x.shape
            k = layer.window
            x = x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        elif isinstance(layer, (ResBlock, Bottleneck)):
            x = _block_forward(layer, weights, x, taps)
        else:
            raise ValueError(f"unsupported layer {layer!r}")
    return x


def forward(spec: NetworkSpec, weights, x) -> np.ndarray:
    """Run a single input through the network."""
    out = forward_batch(spec, weights, as_array(x)[None])
    return out[0]


def forward_taps(spec: NetworkSpec, weights, xs):
    """Input activations feeding each weight tensor, keyed by name.

    Used as per-layer calibration data: every layer sees its full-
    precision input batch.
    """
    taps: dict[str, np.ndarray] = {}
    forward_batch(spec, weights, xs, taps=taps)
    return taps


@dataclass(frozen=True)
class Sampler:
    """Deterministic uniform sampler over the input box [-D, D]^shape.

    A fixed seed yields a fixed stream, and the first k samples of a
    larger count are exactly the samples of count k (nested streams),
    so estimates grow monotonically with count.
    """

    domain_d: float
    input_shape: tuple[int, ...]
    seed: int = 0
    count: int = 128

    def samples(self, count=None) -> np.ndarray:
        n = self.count if count is None else count
        rng = np.random.default_rng(self.seed)
        return rng.uniform(
            -self.domain_d, self.domain_d, size=(n,) + tuple(self.input_shape)
        )


def _adversarial_probes(spec: NetworkSpec, weights_a, weights_b, max_rows=64):
    """Sign-vector probes from the first parameterized layer's weight
    difference; exact maximizers for one-layer linear networks."""
    d = spec.domain_d
    first = None
    for layer in spec.layers:
        if isinstance(layer, (Dense, Conv2d, ResBlock, Bottleneck)):
            first = layer
            break
    if first is None:
        return None
    if isinstance(first, Dense):
        diff = as_array(weights_a[first.weight]) - as_array(weights_b[first.weight])
        rows = np.sign(diff[:max_rows])
        if not rows.size:
            return None
        return np.concatenate([rows, -rows]) * d
    if isinstance(first, Conv2d):
        try:
            mat = toeplitz_matrix(
                first,
                as_array(weights_a[first.weight])
                - as_array(weights_b[first.weight]),
                tuple(spec.input_shape[1:]),
                cap=1 << 20,
            )
        except SizeCapError:
            return None
        if not mat.size:
            return None
        row = np.sign(mat[np.abs(mat).sum(axis=1).argmax()])
        probe = row.reshape(spec.input_shape) * d
        return np.stack([probe, -probe])
    return None


def empirical_sup_error(spec: NetworkSpec, weights_a, weights_b,
                        sampler: Sampler, adversarial: bool = True):
    """Largest observed output deviation over the sample set.

    Returns (max deviation, index of the achieving input).  This is a
    lower bound on the true sup over the box; the adversarial probes
    (appended after the uniform samples) make it exact for one-layer
    linear networks.
    """
    xs = sampler.samples()
    if adversarial:
        probes = _adversarial_probes(spec, weights_a, weights_b)
        if probes is not None:
            xs = np.concatenate([xs, probes])
    ya = forward_batch(spec, weights_a, xs)
    yb = forward_batch(spec, weights_b, xs)
    dev = np.abs(ya - yb).reshape(len(xs), -1).max(axis=1)
    idx = int(dev.argmax())
    return float(dev[idx]), idx


def accuracy(spec: NetworkSpec, weights, dataset: Dataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    out = forward_batch(spec, weights, dataset.inputs)
    out = out.reshape(out.shape[0], -1)
    if dataset.labels.size and int(dataset.labels.max()) >= out.shape[1]:
        raise ValueError(
            f"label {int(dataset.labels.max())} exceeds output width {out.shape[1]}"
        )
    pred = out.argmax(axis=1)
    if dataset.count == 0:
        return 0.0
    return float(np.mean(pred == dataset.labels))
