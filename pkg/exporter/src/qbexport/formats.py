"""Writers for the qbound on-disk formats.

Implemented against the documented format contract (not the qbound
package) so this tool only depends on torch and numpy:

* model.json -- UTF-8 JSON: version, input_shape, domain_D, layers,
  tensor table {name: {offset, shape, dtype}} into the blob.
* weights.bin -- float32 little-endian tensors, row-major, concatenated
  at sorted-name offsets, then a little-endian CRC32 of the payload.
* dataset.bin -- magic QBDS, u32 count, u32 ndim + extents, u8
  has_labels, f32 inputs row-major, u16 labels when present.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np


def write_model(manifest_path, blob_path, input_shape, layers, weights,
                domain_d: float = 1.0) -> None:
    table = {}
    payload = bytearray()
    offset = 0
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype="<f4")
        table[name] = {"offset": offset, "shape": list(arr.shape), "dtype": "f32"}
        payload += arr.tobytes()
        offset += arr.nbytes
    manifest = {
        "version": 1,
        "input_shape": [int(e) for e in input_shape],
        "domain_D": float(domain_d),
        "layers": layers,
        "tensors": table,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(blob_path, "wb") as fh:
        fh.write(bytes(payload))
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF))


def write_dataset(path, inputs, labels=None) -> None:
    inputs = np.ascontiguousarray(inputs, dtype="<f4")
    if inputs.ndim < 2:
        raise ValueError("dataset inputs must be (count, *shape)")
    count, shape = inputs.shape[0], inputs.shape[1:]
    if labels is not None:
        labels = np.ascontiguousarray(labels, dtype="<u2")
        if labels.shape != (count,):
            raise ValueError("labels must be one u16 per sample")
    with open(path, "wb") as fh:
        fh.write(b"QBDS")
        fh.write(struct.pack("<I", count))
        fh.write(struct.pack("<I", len(shape)))
        if shape:
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(struct.pack("<B", 1 if labels is not None else 0))
        fh.write(inputs.tobytes())
        if labels is not None:
            fh.write(labels.tobytes())
