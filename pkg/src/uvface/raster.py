"""Shared triangle rasterization and bilinear sampling primitives.

Continuous pixel coordinates put pixel ``(row r, col c)`` over the square
``[c, c+1) x [r, r+1)`` with its center at ``(c + 0.5, r + 0.5)``.
"""

from __future__ import annotations

import numpy as np

BARY_TOL = 1e-9


def bbox_pixel_pairs(pts: np.ndarray, tris: np.ndarray, height: int, width: int, centers: bool = True):
    """Enumerate ``(triangle, row, col)`` for pixels under each triangle's bounding box.

    ``pts`` are 2D vertex positions in continuous pixel coordinates. With
    ``centers`` only pixels whose center lies in the box are listed, otherwise
    every pixel the box touches. Returns three int arrays of equal length.
    """
    tri_pts = pts[tris]  # F x 3 x 2
    if centers:
        lo = np.ceil(tri_pts.min(axis=1) - 0.5)
        hi = np.floor(tri_pts.max(axis=1) - 0.5)
    else:
        lo = np.floor(tri_pts.min(axis=1))
        hi = np.floor(tri_pts.max(axis=1))
    bound = float(max(width, height) + 1)
    lo = np.clip(lo, -1.0, bound).astype(np.int64)
    hi = np.clip(hi, -2.0, bound).astype(np.int64)
    lo[:, 0] = np.clip(lo[:, 0], 0, width)
    lo[:, 1] = np.clip(lo[:, 1], 0, height)
    hi[:, 0] = np.clip(hi[:, 0], -1, width - 1)
    hi[:, 1] = np.clip(hi[:, 1], -1, height - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    tri_idx = np.repeat(np.arange(len(tris), dtype=np.int64), counts)
    offsets = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_rep = nx[tri_idx]
    cols = lo[tri_idx, 0] + offsets % nx_rep
    rows = lo[tri_idx, 1] + offsets // nx_rep
    return tri_idx, rows, cols


def barycentric(tri_pts: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Barycentric weights of points ``(px, py)`` w.r.t. per-point triangles ``tri_pts`` (N x 3 x 2).

    Degenerate triangles yield NaN weights.
    """
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    v0 = b - a
    v1 = c - a
    den = v0[:, 0] * v1[:, 1] - v1[:, 0] * v0[:, 1]
    dx = px - a[:, 0]
    dy = py - a[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        w1 = (dx * v1[:, 1] - v1[:, 0] * dy) / den
        w2 = (v0[:, 0] * dy - dx * v0[:, 1]) / den
        w0 = 1.0 - w1 - w2
    return np.stack([w0, w1, w2], axis=1)


def cover_pixel_centers(pts: np.ndarray, tris: np.ndarray, height: int, width: int):
    """All (triangle, pixel) pairs where the pixel center falls inside the triangle.

    Returns ``(tri_idx, rows, cols, bary)`` with barycentric weights clipped to
    be non-negative and renormalized to sum to one.
    """
    tri_idx, rows, cols = bbox_pixel_pairs(pts, tris, height, width)
    if len(tri_idx) == 0:
        return tri_idx, rows, cols, np.zeros((0, 3))
    bary = barycentric(pts[tris[tri_idx]], cols + 0.5, rows + 0.5)
    inside = np.all(bary >= -BARY_TOL, axis=1)
    tri_idx, rows, cols, bary = tri_idx[inside], rows[inside], cols[inside], bary[inside]
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    return tri_idx, rows, cols, bary


def bilinear_footprint_ok(x: np.ndarray, y: np.ndarray, width: int, height: int) -> np.ndarray:
    """True where bilinear sampling at ``(x, y)`` needs only in-image pixels."""
    return (x >= 0.5) & (x <= width - 0.5) & (y >= 0.5) & (y <= height - 0.5)


def bilinear_sample(pixels: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample an ``H x W x C`` array at continuous coords, clamping at the border.

    Returns an ``N x C`` array.
    """
    h, w = pixels.shape[:2]
    sx = np.clip(np.asarray(x, dtype=np.float64) - 0.5, 0.0, w - 1)
    sy = np.clip(np.asarray(y, dtype=np.float64) - 0.5, 0.0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(sy).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[:, None]
    top = pixels[y0, x0] * (1.0 - fx) + pixels[y0, x1] * fx
    bottom = pixels[y1, x0] * (1.0 - fx) + pixels[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy
