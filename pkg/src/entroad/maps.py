"""Grid-to-pixel map utilities: bilinear upsampling, mask pooling, PNG dumps."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import DataError


def bilinear_resize(grid: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Resize a 2-D map with half-pixel-centered bilinear interpolation.

    Output values are convex combinations of input values, so the input
    range is preserved.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise DataError(f"expected a 2-D map, got shape {grid.shape}")
    h_in, w_in = grid.shape
    h_out, w_out = out_shape

    def _axis_coords(n_out: int, n_in: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = _axis_coords(h_out, h_in)
    x0, x1, wx = _axis_coords(w_out, w_in)
    top = grid[y0][:, x0] * (1 - wx)[None, :] + grid[y0][:, x1] * wx[None, :]
    bot = grid[y1][:, x0] * (1 - wx)[None, :] + grid[y1][:, x1] * wx[None, :]
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def pool_mask_to_grid(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Max-pool a pixel mask to the patch grid: a patch is anomalous if any
    covered pixel is."""
    mask = np.asarray(mask)
    h_p, w_p = grid
    height, width = mask.shape
    row_edges = (np.arange(h_p + 1) * height) // h_p
    col_edges = (np.arange(w_p + 1) * width) // w_p
    out = np.zeros((h_p, w_p), dtype=np.float64)
    for i in range(h_p):
        rows = mask[row_edges[i]:row_edges[i + 1]]
        for j in range(w_p):
            out[i, j] = rows[:, col_edges[j]:col_edges[j + 1]].max(initial=0)
    return out


def save_heatmap_png(values: np.ndarray, path) -> None:
    """Write a 2-D array in [0, 1] as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L")
    img.save(path, format="PNG")
