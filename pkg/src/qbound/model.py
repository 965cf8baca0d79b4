"""Network description, validation, and bit-exact serialization.

On-disk format (all little-endian):

* ``model.json`` -- UTF-8 JSON manifest: version, input_shape, domain_D,
  layer list, and a tensor table mapping each tensor name to its byte
  offset/shape/dtype inside the blob.
* ``weights.bin`` -- the raw tensors (float32, row-major) concatenated at
  the table offsets, followed by a 4-byte CRC32 of everything before it.
* ``dataset.bin`` -- magic ``QBDS``, u32 count, u32 ndim + extents,
  u8 has_labels, then float32 inputs row-major and u16 labels if present.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

ACTIVATION_KINDS = ("relu", "relu6", "tanh", "identity")


class ManifestError(ValueError):
    """Malformed manifest, blob, or dataset file."""


class ValidationError(ValueError):
    """A spec failed validation; .violations lists the findings."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    weight: str
    bias: Optional[str] = None

    kind = "dense"


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    weight: str = ""
    bias: Optional[str] = None  # per-output-channel; never quantized

    kind = "conv2d"

    @property
    def group_in(self) -> int:
        return self.in_ch // self.groups

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.group_in, self.kernel, self.kernel)


@dataclass(frozen=True)
class Activation:
    fn: str

    kind = "activation"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class AvgPool:
    window: int

    kind = "avg_pool"


@dataclass(frozen=True)
class ResBlock:
    """Two-conv residual block: act(conv2(act(conv1(x))) + shortcut(x))."""

    conv1: Conv2d
    conv2: Conv2d
    shortcut: Optional[Conv2d] = None  # None means identity
    activation: str = "relu"

    kind = "res_block"


@dataclass(frozen=True)
class Bottleneck:
    """Three-conv residual block; final_activation=False gives the
    inverted-residual variant (no nonlinearity after the addition)."""

    conv1: Conv2d
    conv2: Conv2d
    conv3: Conv2d
    shortcut: Optional[Conv2d] = None
    final_activation: bool = True
    activation: str = "relu"

    kind = "bottleneck"


LayerSpec = Union[Dense, Conv2d, Activation, Flatten, AvgPool, ResBlock, Bottleneck]


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    domain_d: float = 1.0
    version: int = 1

    def weight_layers(self):
        """Yield (layer_index, layer) for every parameterized layer."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Dense, Conv2d, ResBlock, Bottleneck)):
                yield i, layer


def _conv_out_hw(conv: Conv2d, hw):
    h, w = hw
    ho = (h + 2 * conv.padding - conv.kernel) // conv.stride + 1
    wo = (w + 2 * conv.padding - conv.kernel) // conv.stride + 1
    return ho, wo


def _shape_after(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape of `layer` on input `shape`; raises ValueError on
    mismatch with a message naming the problem."""
    if isinstance(layer, Dense):
        if shape != (layer.in_dim,):
            raise ValueError(
                f"dense expects ({layer.in_dim},) input, got {shape}"
            )
        return (layer.out_dim,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ValueError(
                f"conv2d expects ({layer.in_ch}, h, w) input, got {shape}"
            )
        ho, wo = _conv_out_hw(layer, shape[1:])
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d output would be empty on input {shape}")
        return (layer.out_ch, ho, wo)
    if isinstance(layer, Activation):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, AvgPool):
        if len(shape) != 3:
            raise ValueError(f"avg_pool expects (c, h, w) input, got {shape}")
        c, h, w = shape
        if h % layer.window or w % layer.window:
            raise ValueError(
                f"avg_pool window {layer.window} does not divide {h}x{w}"
            )
        return (c, h // layer.window, w // layer.window)
    if isinstance(layer, ResBlock):
        mid = _shape_after(layer.conv1, shape)
        out = _shape_after(layer.conv2, mid)
        sc = shape if layer.shortcut is None else _shape_after(layer.shortcut, shape)
        if sc != out:
            raise ValueError(
                f"res_block shortcut output {sc} != main branch output {out}"
            )
        return out
    if isinstance(layer, Bottleneck):
        s1 = _shape_after(layer.conv1, shape)
        s2 = _shape_after(layer.conv2, s1)
        out = _shape_after(layer.conv3, s2)
        sc = shape if layer.shortcut is None else _shape_after(layer.shortcut, shape)
        if sc != out:
            raise ValueError(
                f"bottleneck shortcut output {sc} != main branch output {out}"
            )
        return out
    raise ValueError(f"unknown layer kind {layer!r}")


def trace_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Activation shape before each layer plus the final output shape."""
    shapes = [tuple(spec.input_shape)]
    for layer in spec.layers:
        shapes.append(_shape_after(layer, shapes[-1]))
    return shapes


def _check_conv(conv: Conv2d, where: str, out, in_block: bool = False):
    if conv.kernel < 1 or conv.stride < 1 or conv.padding < 0:
        out.append(f"{where}: bad kernel/stride/padding")
    if conv.groups < 1 or conv.in_ch % conv.groups or conv.out_ch % conv.groups:
        out.append(
            f"{where}: groups={conv.groups} must divide in_ch={conv.in_ch} "
            f"and out_ch={conv.out_ch}"
        )
    if not conv.weight:
        out.append(f"{where}: missing weight reference")
    if in_block and conv.bias is not None:
        out.append(f"{where}: convs inside blocks must be bias-free")


def validate(spec: NetworkSpec, weights=None) -> list[str]:
    """Check every layer invariant and the shape chain.

    Returns a list of human-readable violations (empty list means ok);
    each entry names the offending layer index.  When `weights` is given,
    tensor references are resolved and their shapes checked too.
    """
    violations: list[str] = []
    if spec.domain_d <= 0 or not math.isfinite(spec.domain_d):
        violations.append("domain_D must be positive and finite")
    if not spec.input_shape or any(e < 1 for e in spec.input_shape):
        violations.append("input_shape extents must be positive")

    for i, layer in enumerate(spec.layers):
        where = f"layer {i} ({layer.kind})"
        if isinstance(layer, Conv2d):
            _check_conv(layer, where, violations)
        elif isinstance(layer, Dense):
            if layer.in_dim < 1 or layer.out_dim < 1:
                violations.append(f"{where}: nonpositive dimensions")
            if not layer.weight:
                violations.append(f"{where}: missing weight reference")
        elif isinstance(layer, Activation):
            if layer.fn not in ACTIVATION_KINDS:
                violations.append(f"{where}: unknown activation {layer.fn!r}")
        elif isinstance(layer, AvgPool):
            if layer.window < 1:
                violations.append(f"{where}: window must be >= 1")
        elif isinstance(layer, ResBlock):
            for tag, c in (("conv1", layer.conv1), ("conv2", layer.conv2)):
                _check_conv(c, f"{where}.{tag}", violations, in_block=True)
            if layer.shortcut is not None:
                _check_conv(layer.shortcut, f"{where}.shortcut", violations,
                            in_block=True)
            if layer.activation not in ACTIVATION_KINDS:
                violations.append(f"{where}: unknown activation")
        elif isinstance(layer, Bottleneck):
            for tag, c in (
                ("conv1", layer.conv1),
                ("conv2", layer.conv2),
                ("conv3", layer.conv3),
            ):
                _check_conv(c, f"{where}.{tag}", violations, in_block=True)
            if layer.shortcut is not None:
                _check_conv(layer.shortcut, f"{where}.shortcut", violations,
                            in_block=True)
            if layer.activation not in ACTIVATION_KINDS:
                violations.append(f"{where}: unknown activation")

    if violations:
        return violations

    shape = tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        try:
            shape = _shape_after(layer, shape)
        except ValueError as exc:
            violations.append(f"layer {i} ({layer.kind}): {exc}")
            return violations

    if weights is not None:
        for i, layer in spec.weight_layers():
            where = f"layer {i} ({layer.kind})"
            for name, want in _expected_tensor_shapes(layer):
                if name not in weights:
                    violations.append(f"{where}: tensor {name!r} not found")
                elif tuple(np.shape(weights[name])) != want:
                    violations.append(
                        f"{where}: tensor {name!r} has shape "
                        f"{tuple(np.shape(weights[name]))}, expected {want}"
                    )
    return violations


def _expected_tensor_shapes(layer: LayerSpec):
    """(name, shape) pairs for every tensor a layer references."""
    if isinstance(layer, Dense):
        yield layer.weight, (layer.out_dim, layer.in_dim)
        if layer.bias is not None:
            yield layer.bias, (layer.out_dim,)
    elif isinstance(layer, Conv2d):
        yield layer.weight, layer.weight_shape
        if layer.bias is not None:
            yield layer.bias, (layer.out_ch,)
    elif isinstance(layer, ResBlock):
        convs = [layer.conv1, layer.conv2]
        if layer.shortcut is not None:
            convs.append(layer.shortcut)
        for c in convs:
            yield c.weight, c.weight_shape
    elif isinstance(layer, Bottleneck):
        convs = [layer.conv1, layer.conv2, layer.conv3]
        if layer.shortcut is not None:
            convs.append(layer.shortcut)
        for c in convs:
            yield c.weight, c.weight_shape


def weight_tensor_names(spec: NetworkSpec) -> list[str]:
    """Names of quantizable weight tensors (biases excluded), in layer order."""
    names = []
    for _, layer in spec.weight_layers():
        bias = layer.bias if isinstance(layer, (Dense, Conv2d)) else None
        for name, _ in _expected_tensor_shapes(layer):
            if name != bias:
                names.append(name)
    return names


def bias_tensor_names(spec: NetworkSpec) -> list[str]:
    return [
        layer.bias
        for _, layer in spec.weight_layers()
        if isinstance(layer, (Dense, Conv2d)) and layer.bias is not None
    ]


def network_has_bias(spec: NetworkSpec) -> bool:
    return any(
        isinstance(l, (Dense, Conv2d)) and l.bias is not None
        for l in spec.layers
    )


# ---------------------------------------------------------------------------
# JSON manifest <-> layer specs


def _conv_to_json(conv: Conv2d) -> dict:
    d = {
        "kind": "conv2d",
        "in_ch": conv.in_ch,
        "out_ch": conv.out_ch,
        "kernel": conv.kernel,
        "stride": conv.stride,
        "padding": conv.padding,
        "groups": conv.groups,
        "weight": conv.weight,
    }
    if conv.bias is not None:
        d["bias"] = conv.bias
    return d


def _layer_to_json(layer: LayerSpec) -> dict:
    if isinstance(layer, Dense):
        d = {
            "kind": "dense",
            "in": layer.in_dim,
            "out": layer.out_dim,
            "weight": layer.weight,
        }
        if layer.bias is not None:
            d["bias"] = layer.bias
        return d
    if isinstance(layer, Conv2d):
        return _conv_to_json(layer)
    if isinstance(layer, Activation):
        return {"kind": "activation", "fn": layer.fn}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    if isinstance(layer, AvgPool):
        return {"kind": "avg_pool", "window": layer.window}
    if isinstance(layer, ResBlock):
        return {
            "kind": "res_block",
            "conv1": _conv_to_json(layer.conv1),
            "conv2": _conv_to_json(layer.conv2),
            "shortcut": None if layer.shortcut is None else _conv_to_json(layer.shortcut),
            "activation": layer.activation,
        }
    if isinstance(layer, Bottleneck):
        return {
            "kind": "bottleneck",
            "conv1": _conv_to_json(layer.conv1),
            "conv2": _conv_to_json(layer.conv2),
            "conv3": _conv_to_json(layer.conv3),
            "shortcut": None if layer.shortcut is None else _conv_to_json(layer.shortcut),
            "final_activation": layer.final_activation,
            "activation": layer.activation,
        }
    raise ManifestError(f"cannot serialize layer {layer!r}")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ManifestError(f"{where}: missing field {key!r}")
    return d[key]


def _conv_from_json(d: dict, where: str) -> Conv2d:
    if d.get("kind") != "conv2d":
        raise ManifestError(f"{where}: expected a conv2d description")
    return Conv2d(
        in_ch=int(_require(d, "in_ch", where)),
        out_ch=int(_require(d, "out_ch", where)),
        kernel=int(_require(d, "kernel", where)),
        stride=int(d.get("stride", 1)),
        padding=int(d.get("padding", 0)),
        groups=int(d.get("groups", 1)),
        weight=str(_require(d, "weight", where)),
        bias=d.get("bias"),
    )


def _layer_from_json(d: dict, index: int) -> LayerSpec:
    where = f"layer {index}"
    kind = _require(d, "kind", where)
    if kind == "dense":
        return Dense(
            in_dim=int(_require(d, "in", where)),
            out_dim=int(_require(d, "out", where)),
            weight=str(_require(d, "weight", where)),
            bias=d.get("bias"),
        )
    if kind == "conv2d":
        return _conv_from_json(d, where)
    if kind == "activation":
        return Activation(fn=str(_require(d, "fn", where)))
    if kind == "flatten":
        return Flatten()
    if kind == "avg_pool":
        return AvgPool(window=int(_require(d, "window", where)))
    if kind == "res_block":
        sc = d.get("shortcut")
        return ResBlock(
            conv1=_conv_from_json(_require(d, "conv1", where), where),
            conv2=_conv_from_json(_require(d, "conv2", where), where),
            shortcut=None if sc is None else _conv_from_json(sc, where),
            activation=str(d.get("activation", "relu")),
        )
    if kind == "bottleneck":
        sc = d.get("shortcut")
        return Bottleneck(
            conv1=_conv_from_json(_require(d, "conv1", where), where),
            conv2=_conv_from_json(_require(d, "conv2", where), where),
            conv3=_conv_from_json(_require(d, "conv3", where), where),
            shortcut=None if sc is None else _conv_from_json(sc, where),
            final_activation=bool(d.get("final_activation", True)),
            activation=str(d.get("activation", "relu")),
        )
    raise ManifestError(f"{where}: unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# model.json + weights.bin


def save_model(spec: NetworkSpec, weights, manifest_path, blob_path,
               quantization: Optional[dict] = None) -> None:
    """Write the manifest and blob; float32 little-endian, CRC32-sealed."""
    table = {}
    offset = 0
    payload = bytearray()
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        table[name] = {
            "offset": offset,
            "shape": list(arr.shape),
            "dtype": "f32",
        }
        payload += arr.tobytes()
        offset += arr.nbytes
    manifest = {
        "version": spec.version,
        "input_shape": list(spec.input_shape),
        "domain_D": spec.domain_d,
        "layers": [_layer_to_json(l) for l in spec.layers],
        "tensors": table,
    }
    if quantization is not None:
        manifest["quantization"] = quantization
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(blob_path, "wb") as fh:
        fh.write(bytes(payload))
        fh.write(struct.pack("<I", crc))


def load_model(manifest_path, blob_path):
    """Load and validate a manifest+blob pair.

    Returns (spec, weights, quantization) where weights maps tensor names
    to float64 arrays and quantization is the optional metadata block.
    Raises ManifestError (parse/checksum trouble) or ValidationError.
    """
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc

    for key in ("version", "input_shape", "layers", "tensors"):
        _require(manifest, key, "manifest")

    layers = tuple(
        _layer_from_json(d, i) for i, d in enumerate(manifest["layers"])
    )
    spec = NetworkSpec(
        input_shape=tuple(int(e) for e in manifest["input_shape"]),
        layers=layers,
        domain_d=float(manifest.get("domain_D", 1.0)),
        version=int(manifest["version"]),
    )

    with open(blob_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ManifestError("blob too short to hold its checksum")
    payload, (crc_stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ManifestError("blob checksum mismatch")

    weights = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(int(e) for e in entry["shape"])
        offset = int(entry["offset"])
        if entry.get("dtype", "f32") != "f32":
            raise ManifestError(f"tensor {name!r}: unsupported dtype")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if offset < 0 or offset + nbytes > len(payload):
            raise ManifestError(f"tensor {name!r}: offset/extent outside blob")
        raw = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        weights[name] = raw.reshape(shape).astype(np.float64)

    violations = validate(spec, weights)
    if violations:
        raise ValidationError(violations)
    return spec, weights, manifest.get("quantization")


# ---------------------------------------------------------------------------
# dataset.bin

_DATASET_MAGIC = b"QBDS"


@dataclass
class Dataset:
    inputs: np.ndarray  # (count, *shape) float64
    labels: Optional[np.ndarray]  # (count,) int or None

    @property
    def count(self) -> int:
        return self.inputs.shape[0]


def save_dataset(path, inputs, labels=None) -> None:
    inputs = np.asarray(inputs, dtype="<f4")
    if inputs.ndim < 2:
        raise ManifestError("dataset inputs must be (count, *shape)")
    count = inputs.shape[0]
    shape = inputs.shape[1:]
    if labels is not None:
        labels = np.asarray(labels, dtype="<u2")
        if labels.shape != (count,):
            raise ManifestError("labels must be one u16 per sample")
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<I", count))
        fh.write(struct.pack("<I", len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape) if shape else b"")
        fh.write(struct.pack("<B", 1 if labels is not None else 0))
        fh.write(np.ascontiguousarray(inputs).tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(labels).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _DATASET_MAGIC:
        raise ManifestError("dataset magic mismatch (want QBDS)")
    pos = 4
    (count,) = struct.unpack_from("<I", raw, pos); pos += 4
    (ndim,) = struct.unpack_from("<I", raw, pos); pos += 4
    shape = struct.unpack_from(f"<{ndim}I", raw, pos); pos += 4 * ndim
    (has_labels,) = struct.unpack_from("<B", raw, pos); pos += 1
    n_vals = count * int(np.prod(shape, dtype=np.int64)) if ndim else count
    inputs = np.frombuffer(raw, dtype="<f4", count=n_vals, offset=pos)
    pos += n_vals * 4
    inputs = inputs.reshape((count,) + tuple(shape)).astype(np.float64)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u2", count=count, offset=pos).astype(np.int64)
    return Dataset(inputs=inputs, labels=labels)


# ---------------------------------------------------------------------------
# Built-in architectures

_BUILTIN_HIDDEN = {
    "mlp5": [1024, 512, 256, 128],
    "mlp7": [1024, 512, 256, 128, 64, 32],
    "mlp9": [1024, 512, 256, 128, 128, 64, 64, 32],
    "mlp11": [1024, 512, 512, 256, 256, 128, 128, 64, 64, 32],
}


def builtin_architecture(name: str, domain_d: float = 1.0) -> NetworkSpec:
    """One of the stock MNIST-sized MLPs: 784 in, 10 out, biased dense
    layers with ReLU between them.  Depth (dense-layer count) is the
    number in the name."""
    if name not in _BUILTIN_HIDDEN:
        raise ValueError(
            f"unknown architecture {name!r}; choose from {sorted(_BUILTIN_HIDDEN)}"
        )
    dims = [784] + _BUILTIN_HIDDEN[name] + [10]
    layers: list[LayerSpec] = []
    for i in range(len(dims) - 1):
        layers.append(
            Dense(dims[i], dims[i + 1], weight=f"w{i}", bias=f"b{i}")
        )
        if i < len(dims) - 2:
            layers.append(Activation("relu"))
    return NetworkSpec(
        input_shape=(784,), layers=tuple(layers), domain_d=domain_d
    )


def random_weights(spec: NetworkSpec, seed: int = 0, scale: float = 0.1):
    """Gaussian weights (and zero-mean small biases) for every tensor the
    spec references.  Deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    weights = {}
    for _, layer in spec.weight_layers():
        for name, shape in _expected_tensor_shapes(layer):
            weights[name] = rng.normal(0.0, scale, size=shape)
    return weights


def zero_weights(spec: NetworkSpec):
    return {
        name: np.zeros(shape)
        for _, layer in spec.weight_layers()
        for name, shape in _expected_tensor_shapes(layer)
    }
