"""Standalone writers for the bundle and text-embedding file formats.

Deliberately independent of the pipeline package: the exporter talks to it
only through the documented byte layouts.

Bundle layout (little-endian): magic "EADB" | u16 version=1 | u32 header
length | UTF-8 JSON header {image_id, h_p, w_p, H, W, d, layers, has_label,
label, has_mask} | per layer: N*d float32 features then (N+1)^2 float32
attention | optional H*W mask bytes.

Text table layout: magic "EATX" | u16 version=1 | u32 header length |
JSON {d_t, prompts: [...]} | one d_t float32 unit vector per prompt.
"""

from __future__ import annotations

import json
import struct

import numpy as np

BUNDLE_MAGIC = b"EADB"
BUNDLE_VERSION = 1
TABLE_MAGIC = b"EATX"
TABLE_VERSION = 1


def write_bundle_file(
    path,
    image_id: str,
    grid: tuple[int, int],
    image_size: tuple[int, int],
    layers: list[int],
    features: dict[int, np.ndarray],
    attention: dict[int, np.ndarray],
    label: int | None = None,
    mask: np.ndarray | None = None,
) -> None:
    h_p, w_p = grid
    n = h_p * w_p
    d = int(features[layers[0]].shape[1])
    for layer in layers:
        if features[layer].shape != (n, d):
            raise ValueError(f"features at layer {layer} have shape {features[layer].shape}")
        if attention[layer].shape != (n + 1, n + 1):
            raise ValueError(f"attention at layer {layer} has shape {attention[layer].shape}")
    header = {
        "image_id": image_id,
        "h_p": h_p,
        "w_p": w_p,
        "H": int(image_size[0]),
        "W": int(image_size[1]),
        "d": d,
        "layers": [int(l) for l in layers],
        "has_label": label is not None,
        "label": int(label) if label is not None else 0,
        "has_mask": mask is not None,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<H", BUNDLE_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for layer in layers:
            fh.write(np.ascontiguousarray(features[layer], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(attention[layer], dtype="<f4").tobytes())
        if mask is not None:
            if mask.shape != tuple(image_size):
                raise ValueError(f"mask shape {mask.shape} != image size {image_size}")
            fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def write_text_table_file(path, table: dict[str, np.ndarray]) -> None:
    if not table:
        raise ValueError("embedding table must not be empty")
    prompts = list(table)
    d_t = int(np.asarray(table[prompts[0]]).shape[0])
    header = json.dumps(
        {"d_t": d_t, "prompts": prompts}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<H", TABLE_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in prompts:
            vec = np.asarray(table[name], dtype=np.float64)
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > 1e-5:
                raise ValueError(f"embedding for {name!r} is not unit-norm (|v|={norm})")
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
