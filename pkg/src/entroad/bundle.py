"""Serialized per-image feature bundles.

A bundle packages everything the pipeline needs for one image: per-layer
patch features, per-layer head-averaged attention (row/column 0 is the
global token), an optional image label and an optional pixel mask.

File layout (all integers little-endian):

    magic "EADB" (4 bytes)
    version          u16 = 1
    header length    u32
    header           UTF-8 JSON: {image_id, h_p, w_p, H, W, d,
                                  layers: [ids], has_label, label, has_mask}
    per layer, in header order:
        features     N*d float32, row-major
        attention    (N+1)*(N+1) float32, row-major
    mask (optional)  H*W bytes, each 0 or 1
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"EADB"
VERSION = 1

# Exporters guarantee attention row sums to 1 within this tolerance; rows
# drifting further (up to the reader tolerance) are re-normalized on read.
ROW_SUM_WRITE_TOL = 1e-4
ROW_SUM_READ_TOL = 1e-3


@dataclass
class FeatureBundle:
    """One image's per-layer patch features and attention maps."""

    image_id: str
    grid: tuple[int, int]            # (h_p, w_p), N = h_p * w_p
    image_size: tuple[int, int]      # (H, W) in pixels
    layers: list[int]
    features: dict[int, np.ndarray]  # layer id -> (N, d) float32
    attention: dict[int, np.ndarray]  # layer id -> (N+1, N+1) float32
    label: Optional[int] = None
    mask: Optional[np.ndarray] = None  # (H, W) uint8 in {0, 1}

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def d(self) -> int:
        return self.features[self.layers[0]].shape[1]

    def validate(self) -> None:
        validate_bundle(self)


def validate_bundle(bundle: FeatureBundle) -> None:
    """Check every documented bundle invariant, raising DataError on failure."""
    h_p, w_p = bundle.grid
    height, width = bundle.image_size
    if h_p < 1 or w_p < 1:
        raise DataError(f"bundle {bundle.image_id}: grid must be positive, got {bundle.grid}")
    n = h_p * w_p
    if not bundle.layers:
        raise DataError(f"bundle {bundle.image_id}: empty layer list")
    if set(bundle.layers) != set(bundle.features) or set(bundle.layers) != set(bundle.attention):
        raise DataError(f"bundle {bundle.image_id}: layer ids do not match tensor maps")

    d = None
    for layer in bundle.layers:
        z = bundle.features[layer]
        a = bundle.attention[layer]
        if z.ndim != 2 or z.shape[0] != n:
            raise DataError(
                f"bundle {bundle.image_id}: features at layer {layer} have shape "
                f"{z.shape}, expected ({n}, d)"
            )
        if d is None:
            d = z.shape[1]
        elif z.shape[1] != d:
            raise DataError(f"bundle {bundle.image_id}: inconsistent feature dim at layer {layer}")
        if a.shape != (n + 1, n + 1):
            raise DataError(
                f"bundle {bundle.image_id}: attention at layer {layer} has shape "
                f"{a.shape}, expected ({n + 1}, {n + 1})"
            )
        if not np.isfinite(z).all() or not np.isfinite(a).all():
            raise DataError(f"bundle {bundle.image_id}: non-finite tensor at layer {layer}")
        if (a < 0).any():
            raise DataError(f"bundle {bundle.image_id}: negative attention at layer {layer}")
        row_err = np.abs(a.sum(axis=1) - 1.0).max()
        if row_err > ROW_SUM_WRITE_TOL:
            raise DataError(
                f"bundle {bundle.image_id}: attention rows at layer {layer} deviate from "
                f"sum 1 by {row_err:.2e} (> {ROW_SUM_WRITE_TOL:g})"
            )

    if bundle.label is not None and bundle.label not in (0, 1):
        raise DataError(f"bundle {bundle.image_id}: label must be 0 or 1")
    if bundle.mask is not None:
        if bundle.mask.shape != (height, width):
            raise DataError(
                f"bundle {bundle.image_id}: mask shape {bundle.mask.shape} != image size "
                f"({height}, {width})"
            )
        if not np.isin(bundle.mask, (0, 1)).all():
            raise DataError(f"bundle {bundle.image_id}: mask values must be 0 or 1")


def _write_array_f32(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def _read_array_f32(fh: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    count = int(np.prod(shape))
    buf = _read_exact(fh, 4 * count, what)
    return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()


def write_bundle(bundle: FeatureBundle, path) -> None:
    """Serialize a validated bundle to the binary bundle format."""
    validate_bundle(bundle)
    header = {
        "image_id": bundle.image_id,
        "h_p": bundle.grid[0],
        "w_p": bundle.grid[1],
        "H": bundle.image_size[0],
        "W": bundle.image_size[1],
        "d": bundle.d,
        "layers": list(bundle.layers),
        "has_label": bundle.label is not None,
        "label": int(bundle.label) if bundle.label is not None else 0,
        "has_mask": bundle.mask is not None,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for layer in bundle.layers:
            _write_array_f32(fh, bundle.features[layer])
            _write_array_f32(fh, bundle.attention[layer])
        if bundle.mask is not None:
            fh.write(np.ascontiguousarray(bundle.mask, dtype=np.uint8).tobytes())


def read_bundle(path) -> FeatureBundle:
    """Read a bundle file, re-normalizing mildly drifted attention rows.

    Rows whose sum deviates from 1 by more than the write tolerance but at
    most the read tolerance are divided by their sum; larger deviations are
    treated as corruption.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt header: {exc}") from exc

        h_p, w_p = int(header["h_p"]), int(header["w_p"])
        height, width = int(header["H"]), int(header["W"])
        d = int(header["d"])
        layers = [int(x) for x in header["layers"]]
        n = h_p * w_p

        features: dict[int, np.ndarray] = {}
        attention: dict[int, np.ndarray] = {}
        for layer in layers:
            features[layer] = _read_array_f32(fh, (n, d), f"features layer {layer}")
            att = _read_array_f32(fh, (n + 1, n + 1), f"attention layer {layer}")
            sums = att.sum(axis=1)
            dev = np.abs(sums - 1.0)
            worst = dev.max()
            if worst > ROW_SUM_READ_TOL:
                raise FormatError(
                    f"{path}: attention row sums at layer {layer} deviate by "
                    f"{worst:.2e} (> {ROW_SUM_READ_TOL:g})"
                )
            drifted = dev > ROW_SUM_WRITE_TOL
            if drifted.any():
                att[drifted] /= sums[drifted, None]
            attention[layer] = att

        mask = None
        if header["has_mask"]:
            buf = _read_exact(fh, height * width, "mask")
            mask = np.frombuffer(buf, dtype=np.uint8).reshape(height, width).copy()

    bundle = FeatureBundle(
        image_id=str(header["image_id"]),
        grid=(h_p, w_p),
        image_size=(height, width),
        layers=layers,
        features=features,
        attention=attention,
        label=int(header["label"]) if header["has_label"] else None,
        mask=mask,
    )
    validate_bundle(bundle)
    return bundle


def bundles_equal(a: FeatureBundle, b: FeatureBundle) -> bool:
    """Bitwise equality of two bundles (used by round-trip checks)."""
    if (a.image_id, a.grid, a.image_size, a.layers, a.label) != (
        b.image_id,
        b.grid,
        b.image_size,
        b.layers,
        b.label,
    ):
        return False
    for layer in a.layers:
        if not np.array_equal(a.features[layer], b.features[layer]):
            return False
        if not np.array_equal(a.attention[layer], b.attention[layer]):
            return False
    if (a.mask is None) != (b.mask is None):
        return False
    if a.mask is not None and not np.array_equal(a.mask, b.mask):
        return False
    return True
