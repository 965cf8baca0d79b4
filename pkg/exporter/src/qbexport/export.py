"""Convert torch checkpoints into the qbound manifest/blob formats.

Supports sequential models built from Linear, Conv2d, BatchNorm1d/2d,
ReLU/ReLU6/Tanh, Flatten, and AvgPool2d, plus the two standard residual
shapes (two-conv basic blocks and inverted-residual bottlenecks),
identified structurally so no torchvision import is needed.

BatchNorm is never emitted: it is either folded into the preceding
linear layer (W' = g/sqrt(var+eps) * W, b' = beta + (b - mu) *
g/sqrt(var+eps), exact for inference) or stripped (dropped outright,
the accuracy-after-retraining practice; this changes the function
unless the statistics are neutral).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .formats import write_dataset, write_model


class ExportError(ValueError):
    """A module or dataset cannot be mapped onto the target format."""


@dataclass
class ExportConfig:
    checkpoint: str
    input_shape: tuple[int, ...]
    bn_handling: str = "fold"  # fold | strip
    out_dir: str = "."
    domain_d: float = 1.0
    entry: Optional[str] = None  # attribute/key path into the checkpoint
    dataset_count: Optional[int] = None

    def __post_init__(self):
        if self.bn_handling not in ("fold", "strip"):
            raise ExportError(f"unknown bn_handling {self.bn_handling!r}")


def _np(t) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64)


class _Converter:
    def __init__(self, bn_handling: str):
        self.bn = bn_handling
        self.layers: list[dict] = []
        self.weights: dict[str, np.ndarray] = {}
        self.counter = 0

    def _name(self, prefix: str) -> str:
        self.counter += 1
        return f"{prefix}{self.counter - 1}"

    def _store(self, prefix, arr) -> str:
        name = self._name(prefix)
        self.weights[name] = arr
        return name

    # -- leaf emitters ---------------------------------------------------

    def _emit_linear(self, mod: nn.Linear):
        entry = {
            "kind": "dense",
            "in": mod.in_features,
            "out": mod.out_features,
            "weight": self._store("w", _np(mod.weight)),
        }
        if mod.bias is not None:
            entry["bias"] = self._store("b", _np(mod.bias))
        self.layers.append(entry)

    def _emit_conv(self, mod: nn.Conv2d, in_block: bool = False):
        k = _square(mod.kernel_size, "kernel")
        s = _square(mod.stride, "stride")
        p = _square(mod.padding, "padding", allow_zero=True)
        if _square(mod.dilation, "dilation") != 1:
            raise ExportError("dilated convolutions are not supported")
        entry = {
            "kind": "conv2d",
            "in_ch": mod.in_channels,
            "out_ch": mod.out_channels,
            "kernel": k,
            "stride": s,
            "padding": p,
            "groups": mod.groups,
            "weight": self._store("w", _np(mod.weight)),
        }
        if mod.bias is not None:
            if in_block:
                raise ExportError(
                    "convs inside residual blocks must be bias-free; "
                    "strip their BatchNorm instead of folding"
                )
            entry["bias"] = self._store("b", _np(mod.bias))
        self.layers.append(entry)
        return entry

    def _fold_bn_into_last(self, bn):
        if not self.layers or self.layers[-1]["kind"] not in ("dense", "conv2d"):
            raise ExportError(
                f"cannot fold {type(bn).__name__}: no dense/conv layer "
                "immediately before it"
            )
        if bn.running_mean is None or bn.running_var is None:
            raise ExportError("BN folding needs running statistics")
        gamma = _np(bn.weight) if bn.weight is not None else np.ones(bn.num_features)
        beta = _np(bn.bias) if bn.bias is not None else np.zeros(bn.num_features)
        mu, var = _np(bn.running_mean), _np(bn.running_var)
        scale = gamma / np.sqrt(var + bn.eps)

        entry = self.layers[-1]
        w = self.weights[entry["weight"]]
        out_dim = w.shape[0]
        if out_dim != bn.num_features:
            raise ExportError("BN feature count does not match the layer")
        self.weights[entry["weight"]] = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
        old_bias = self.weights.get(entry.get("bias"), np.zeros(out_dim))
        new_bias = beta + (old_bias - mu) * scale
        if "bias" in entry:
            self.weights[entry["bias"]] = new_bias
        else:
            entry["bias"] = self._store("b", new_bias)

    def _emit_activation(self, fn: str):
        self.layers.append({"kind": "activation", "fn": fn})

    # -- block emitters ---------------------------------------------------

    def _convert_block_conv(self, mod, bn) -> dict:
        """Conv destined for a block slot: bias-free, BN folded/stripped."""
        sub = _Converter(self.bn)
        sub._emit_conv(mod, in_block=mod.bias is not None)
        if bn is not None:
            if self.bn == "fold":
                sub._fold_bn_into_last(bn)
                if "bias" in sub.layers[-1]:
                    bias = sub.weights[sub.layers[-1]["bias"]]
                    if np.abs(bias).max() > 1e-12:
                        raise ExportError(
                            "folding this block's BatchNorm produces a "
                            "nonzero conv bias, which blocks cannot carry; "
                            "use bn_handling='strip'"
                        )
                    del sub.weights[sub.layers[-1]["bias"]]
                    del sub.layers[-1]["bias"]
        entry = sub.layers[-1]
        entry["weight"] = self._store("w", sub.weights[entry["weight"]])
        return entry

    def _emit_basic_block(self, mod):
        shortcut = None
        if getattr(mod, "downsample", None) is not None:
            parts = list(mod.downsample.children()) or [mod.downsample]
            conv = parts[0]
            bn = parts[1] if len(parts) > 1 and _is_bn(parts[1]) else None
            if not isinstance(conv, nn.Conv2d):
                raise ExportError("unsupported downsample branch in block")
            shortcut = self._convert_block_conv(conv, bn)
        self.layers.append(
            {
                "kind": "res_block",
                "conv1": self._convert_block_conv(mod.conv1, getattr(mod, "bn1", None)),
                "conv2": self._convert_block_conv(mod.conv2, getattr(mod, "bn2", None)),
                "shortcut": shortcut,
                "activation": "relu",
            }
        )

    def _emit_inverted_residual(self, mod):
        convs, bns = [], []
        for sub in _flatten_children(mod.conv):
            if isinstance(sub, nn.Conv2d):
                convs.append(sub)
                bns.append(None)
            elif _is_bn(sub):
                if not convs:
                    raise ExportError("BN before any conv in inverted residual")
                bns[len(convs) - 1] = sub
            elif isinstance(sub, (nn.ReLU6, nn.ReLU)):
                continue
            elif isinstance(sub, (nn.Identity, nn.Dropout)):
                continue
            else:
                raise ExportError(
                    f"unsupported module {type(sub).__name__} inside inverted residual"
                )
        if not mod.use_res_connect:
            # no shortcut: just a conv chain, emit inline
            for i, (conv, bn) in enumerate(zip(convs, bns)):
                self._emit_conv(conv)
                if bn is not None:
                    self._handle_bn(bn)
                if i < len(convs) - 1:
                    self._emit_activation("relu6")
            return
        if len(convs) != 3:
            raise ExportError(
                "residual inverted bottlenecks need expand/depthwise/project convs"
            )
        self.layers.append(
            {
                "kind": "bottleneck",
                "conv1": self._convert_block_conv(convs[0], bns[0]),
                "conv2": self._convert_block_conv(convs[1], bns[1]),
                "conv3": self._convert_block_conv(convs[2], bns[2]),
                "shortcut": None,
                "final_activation": False,
                "activation": "relu6",
            }
        )

    def _handle_bn(self, mod):
        if self.bn == "fold":
            self._fold_bn_into_last(mod)
        # strip: drop it

    # -- walker -----------------------------------------------------------

    def convert(self, module: nn.Module):
        if isinstance(module, nn.Linear):
            self._emit_linear(module)
        elif isinstance(module, nn.Conv2d):
            self._emit_conv(module)
        elif _is_bn(module):
            self._handle_bn(module)
        elif isinstance(module, nn.ReLU):
            self._emit_activation("relu")
        elif isinstance(module, nn.ReLU6):
            self._emit_activation("relu6")
        elif isinstance(module, nn.Tanh):
            self._emit_activation("tanh")
        elif isinstance(module, (nn.Identity, nn.Dropout)):
            pass
        elif isinstance(module, nn.Flatten):
            if module.start_dim != 1 or module.end_dim != -1:
                raise ExportError("only whole-feature flatten is supported")
            self.layers.append({"kind": "flatten"})
        elif isinstance(module, nn.AvgPool2d):
            k = _square(module.kernel_size, "pool window")
            stride = module.stride if module.stride is not None else k
            if _square(stride, "pool stride") != k or _square(
                module.padding, "pool padding", allow_zero=True
            ) != 0:
                raise ExportError(
                    "only non-overlapping unpadded average pooling is supported"
                )
            self.layers.append({"kind": "avg_pool", "window": k})
        elif _looks_like_basic_block(module):
            self._emit_basic_block(module)
        elif _looks_like_inverted_residual(module):
            self._emit_inverted_residual(module)
        elif isinstance(module, nn.Sequential) or _is_container(module):
            for child in module.children():
                self.convert(child)
        else:
            raise ExportError(
                f"unsupported layer kind: {type(module).__name__}"
            )


def _square(v, what, allow_zero=False):
    if isinstance(v, (tuple, list)):
        if len(set(v)) != 1:
            raise ExportError(f"non-square {what} {v} is not supported")
        v = v[0]
    v = int(v)
    if v < (0 if allow_zero else 1):
        raise ExportError(f"bad {what} {v}")
    return v


def _is_bn(m) -> bool:
    return isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d))


def _is_container(m) -> bool:
    return len(list(m.children())) > 0 and len(list(m.parameters(recurse=False))) == 0


def _looks_like_basic_block(m) -> bool:
    return (
        isinstance(getattr(m, "conv1", None), nn.Conv2d)
        and isinstance(getattr(m, "conv2", None), nn.Conv2d)
        and not hasattr(m, "conv3")
        and not hasattr(m, "use_res_connect")
    )


def _looks_like_inverted_residual(m) -> bool:
    return hasattr(m, "use_res_connect") and isinstance(
        getattr(m, "conv", None), nn.Module
    )


def _flatten_children(m):
    for child in m.children():
        if isinstance(child, nn.Sequential) or _is_container(child):
            yield from _flatten_children(child)
        else:
            yield child


def load_checkpoint(path, entry: Optional[str] = None) -> nn.Module:
    obj = torch.load(path, map_location="cpu", weights_only=False)
    if entry:
        for key in entry.split("."):
            obj = obj[key] if isinstance(obj, dict) else getattr(obj, key)
    if not isinstance(obj, nn.Module):
        raise ExportError(
            "checkpoint does not contain a torch module (state_dicts need "
            "the original model class; save the full module instead)"
        )
    return obj


def convert_module(module: nn.Module, bn_handling: str = "fold"):
    """Map a torch module onto (layer list, weight dict)."""
    conv = _Converter(bn_handling)
    conv.convert(module)
    if not conv.layers:
        raise ExportError("checkpoint contains no exportable layers")
    return conv.layers, conv.weights


def export_model(cfg: ExportConfig):
    """Write model.json + weights.bin for a checkpointed module.

    Returns (manifest_path, blob_path).
    """
    module = load_checkpoint(cfg.checkpoint, cfg.entry)
    module.eval()
    layers, weights = convert_module(module, cfg.bn_handling)
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = os.path.join(cfg.out_dir, "model.json")
    blob = os.path.join(cfg.out_dir, "weights.bin")
    write_model(manifest, blob, cfg.input_shape, layers, weights, cfg.domain_d)
    return manifest, blob


def export_dataset(source, count: int, out_path,
                   duplicate_channels: bool = False) -> None:
    """Write the first `count` samples of a dataset as dataset.bin.

    `source` is anything indexable yielding (input, label) pairs or bare
    inputs; labels are preserved when present.  Grayscale stays single
    channel unless duplicate_channels replicates it to three.
    """
    if count < 0 or count > len(source):
        raise ExportError(
            f"count {count} outside the source size {len(source)}"
        )
    inputs, labels = [], []
    have_labels = None
    for i in range(count):
        item = source[i]
        if isinstance(item, (tuple, list)) and len(item) == 2:
            x, y = item
            if have_labels is False:
                raise ExportError("mixed labeled/unlabeled samples")
            have_labels = True
            labels.append(int(y))
        else:
            if have_labels:
                raise ExportError("mixed labeled/unlabeled samples")
            have_labels = False
            x = item
        x = np.asarray(x.detach().cpu().numpy() if torch.is_tensor(x) else x,
                       dtype=np.float32)
        if inputs and x.shape != inputs[0].shape:
            raise ExportError(
                f"sample {i} has shape {x.shape}, expected {inputs[0].shape}"
            )
        inputs.append(x)

    if count == 0:
        shape = np.asarray(
            source[0][0] if isinstance(source[0], (tuple, list)) else source[0]
        ).shape if len(source) else (1,)
        batch = np.zeros((0,) + tuple(shape), dtype=np.float32)
        write_dataset(out_path, batch, None)
        return

    batch = np.stack(inputs)
    if duplicate_channels:
        if batch.ndim != 4 or batch.shape[1] != 1:
            raise ExportError("channel duplication needs (n, 1, h, w) inputs")
        batch = np.repeat(batch, 3, axis=1)
    write_dataset(
        out_path, batch, np.asarray(labels) if have_labels else None
    )
