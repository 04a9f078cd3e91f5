"""Geometry images, self-occlusion masks and texture lifting into UV space.

UV pixel ``(row i, col j)`` samples the chart at ``u = (j + 0.5) / W``,
``v = (i + 0.5) / H``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from PIL import Image

from .datamodel import ImageBuffer
from .errors import FormatError, ResolutionError
from .geometry import AnnotatedFaceModel, ProjectionMatrix, depth_of, project
from .raster import BARY_TOL, bbox_pixel_pairs, bilinear_footprint_ok, bilinear_sample, cover_pixel_centers

DEFAULT_UV_RESOLUTION = (256, 256)
MIN_UV_RESOLUTION = 8
DEFAULT_EPS_FRACTION = 1e-3


class MaskState(IntEnum):
    """Per-pixel occlusion state; values double as the PNG codes."""

    INVALID_UV = 0
    OUT_OF_IMAGE = 64
    SELF_OCCLUDED = 128
    VISIBLE = 255


@dataclass(frozen=True, eq=False)
class GeometryImage:
    model: AnnotatedFaceModel
    positions: np.ndarray  # H x W x 3
    valid: np.ndarray  # H x W bool
    triangle: np.ndarray  # H x W int, -1 where invalid
    bary: np.ndarray  # H x W x 3

    @property
    def resolution(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass(frozen=True, eq=False)
class OcclusionMask:
    states: np.ndarray  # H x W uint8 holding MaskState codes
    depth_buffer: np.ndarray | None = None  # image-resolution min-depth over G samples

    @property
    def resolution(self) -> tuple[int, int]:
        return self.states.shape

    @property
    def visible(self) -> np.ndarray:
        return self.states == MaskState.VISIBLE

    def save(self, path: str | os.PathLike) -> None:
        Image.fromarray(self.states.astype(np.uint8)).save(path, format="PNG")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "OcclusionMask":
        with Image.open(path) as im:
            states = np.asarray(im.convert("L"), dtype=np.uint8).copy()
        if not np.isin(states, [s.value for s in MaskState]).all():
            raise FormatError(f"{path}: unknown occlusion state codes")
        return cls(states)


@dataclass(frozen=True, eq=False)
class LiftedTexture:
    values: np.ndarray  # H x W x C in [0, 1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def as_image(self) -> ImageBuffer:
        return ImageBuffer(self.values)

    def save(self, path: str | os.PathLike) -> None:
        self.as_image().save(path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LiftedTexture":
        return cls(ImageBuffer.load(path).pixels)


def rasterize_geometry_image(
    model: AnnotatedFaceModel, res: tuple[int, int] = DEFAULT_UV_RESOLUTION
) -> GeometryImage:
    """Rasterize the model's UV chart; each covered pixel stores its surface point.

    Where UV triangles overlap the lowest triangle index wins.
    """
    height, width = res
    if height < MIN_UV_RESOLUTION or width < MIN_UV_RESOLUTION:
        raise ResolutionError(f"UV resolution must be at least {MIN_UV_RESOLUTION}x{MIN_UV_RESOLUTION}, got {height}x{width}")
    uv_px = model.uv * np.array([width, height], dtype=np.float64)
    tri_idx, rows, cols, bary = cover_pixel_centers(uv_px, model.triangles, height, width)
    pix = rows * width + cols
    order = np.lexsort((tri_idx, pix))
    pix_sorted = pix[order]
    first = order[np.r_[True, pix_sorted[1:] != pix_sorted[:-1]]] if len(order) else order

    triangle = np.full(height * width, -1, dtype=np.int64)
    weights = np.zeros((height * width, 3))
    triangle[pix[first]] = tri_idx[first]
    weights[pix[first]] = bary[first]
    valid = triangle >= 0
    positions = np.zeros((height * width, 3))
    corners = model.vertices[model.triangles[triangle[valid]]]  # N x 3 x 3
    positions[valid] = np.einsum("nk,nkd->nd", weights[valid], corners)
    return GeometryImage(
        model=model,
        positions=positions.reshape(height, width, 3),
        valid=valid.reshape(height, width),
        triangle=triangle.reshape(height, width),
        bary=weights.reshape(height, width, 3),
    )


def _triangle_planes(vxy: np.ndarray, vdepth: np.ndarray, tris: np.ndarray):
    """Per-triangle affine coefficients ``[w1 | w2 | depth]`` as functions of ``(x, y, 1)``.

    Returns ``(coef F x 9, ok F)``; ``ok`` is False for triangles with
    (near) zero projected area.
    """
    p0, p1, p2 = vxy[tris[:, 0]], vxy[tris[:, 1]], vxy[tris[:, 2]]
    e1, e2 = p1 - p0, p2 - p0
    den = e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]
    scale = np.maximum(np.abs(e1).max(axis=1), np.abs(e2).max(axis=1))
    ok = np.abs(den) > 1e-12 * np.maximum(scale, 1e-300) ** 2
    den = np.where(ok, den, 1.0)
    a1, b1 = e2[:, 1] / den, -e2[:, 0] / den
    a2, b2 = -e1[:, 1] / den, e1[:, 0] / den
    c1 = -(a1 * p0[:, 0] + b1 * p0[:, 1])
    c2 = -(a2 * p0[:, 0] + b2 * p0[:, 1])
    d0, d1, d2 = vdepth[tris[:, 0]], vdepth[tris[:, 1]], vdepth[tris[:, 2]]
    da, db = d1 - d0, d2 - d0
    coef = np.stack(
        [a1, b1, c1, a2, b2, c2, a1 * da + a2 * db, b1 * da + b2 * db, d0 + c1 * da + c2 * db], axis=1
    )
    return coef, ok


def _surface_depth_at(model: AnnotatedFaceModel, p: ProjectionMatrix, xy: np.ndarray, depth: np.ndarray,
                      pix: np.ndarray, width: int, height: int, eps: float) -> np.ndarray:
    """Nearest mesh depth along the viewing ray through each sample (``inf`` if none).

    Samples are bucketed by image pixel and sorted by depth, so each triangle
    is only tested against samples in the pixels under its bounding box that
    lie more than ``eps`` behind the triangle's nearest vertex.
    """
    n = len(xy)
    nearest = np.full(n, np.inf)
    if n == 0:
        return nearest
    vxy = project(p, model.vertices)
    vdepth = depth_of(p, model.vertices)
    coef, ok = _triangle_planes(vxy, vdepth, model.triangles)
    tris = model.triangles[ok]
    coef = coef[ok]
    tri_near = vdepth[tris].min(axis=1)

    lo_d, hi_d = float(depth.min()), float(depth.max())
    span = max(hi_d - lo_d, 1e-300)

    def key(pixel, d):
        # Sample depths map into [0.25, 0.75] of their pixel's unit interval;
        # thresholds outside the sample range clip to the band's margins.
        return pixel + 0.25 + 0.5 * np.clip((d - lo_d) / span, -0.4, 1.4)

    order = np.lexsort((depth, pix))
    sorted_keys = key(pix[order], depth[order])
    counts = np.bincount(pix, minlength=width * height)
    ends = np.cumsum(counts)

    tri_idx, rows, cols = bbox_pixel_pairs(vxy, tris, height, width, centers=False)
    pair_pix = rows * width + cols
    keep = counts[pair_pix] > 0
    tri_idx, pair_pix = tri_idx[keep], pair_pix[keep]
    first = np.searchsorted(sorted_keys, key(pair_pix, tri_near[tri_idx] + eps), side="right")
    per_pair = np.maximum(ends[pair_pix] - first, 0)
    total = int(per_pair.sum())
    if total == 0:
        return nearest
    tri_rep = np.repeat(tri_idx, per_pair)
    offset = np.arange(total) - np.repeat(np.cumsum(per_pair) - per_pair, per_pair)
    sample = order[np.repeat(first, per_pair) + offset]

    c = coef[tri_rep]
    x, y = xy[sample, 0], xy[sample, 1]
    w1 = c[:, 0] * x + c[:, 1] * y + c[:, 2]
    w2 = c[:, 3] * x + c[:, 4] * y + c[:, 5]
    inside = (w1 >= -BARY_TOL) & (w2 >= -BARY_TOL) & (w1 + w2 <= 1.0 + BARY_TOL)
    d = c[inside, 6] * x[inside] + c[inside, 7] * y[inside] + c[inside, 8]
    np.minimum.at(nearest, sample[inside], d)
    return nearest


def zbuffer_visibility(
    g: GeometryImage,
    p: ProjectionMatrix,
    image_size: tuple[int, int],
    eps: float | None = None,
) -> OcclusionMask:
    """Classify every UV pixel as visible, self-occluded, out of image or invalid.

    ``image_size`` is ``(width, height)``. A sample is visible when it projects
    inside the image with an in-image bilinear footprint and no mesh surface
    lies more than ``eps`` in front of it along its viewing ray. ``eps``
    defaults to 1e-3 of the samples' depth range.
    """
    width, height = image_size
    pos = g.positions[g.valid]
    xy = project(p, pos)
    depth = depth_of(p, pos)
    if eps is None:
        span = float(depth.max() - depth.min()) if len(depth) else 0.0
        eps = max(DEFAULT_EPS_FRACTION * span, 1e-9 * (1.0 + float(np.abs(depth).max(initial=0.0))))
    if eps <= 0:
        raise ValueError("eps must be positive")

    x, y = xy[:, 0], xy[:, 1]
    in_bounds = (x >= 0) & (x < width) & (y >= 0) & (y < height)
    pix = (np.floor(y[in_bounds]).astype(np.int64) * width + np.floor(x[in_bounds]).astype(np.int64))

    buffer = np.full(width * height, np.inf)
    np.minimum.at(buffer, pix, depth[in_bounds])

    surface = np.full(len(pos), np.inf)
    surface[in_bounds] = _surface_depth_at(g.model, p, xy[in_bounds], depth[in_bounds], pix, width, height, eps)
    # The sample's own surface point bounds the ray depth even if edge tests miss it.
    front = np.minimum(surface, depth)

    sampled = in_bounds & bilinear_footprint_ok(x, y, width, height)
    state = np.full(len(pos), MaskState.OUT_OF_IMAGE, dtype=np.uint8)
    visible = sampled & (depth <= front + eps)
    state[sampled] = MaskState.SELF_OCCLUDED
    state[visible] = MaskState.VISIBLE

    states = np.full(g.resolution, MaskState.INVALID_UV, dtype=np.uint8)
    states[g.valid] = state
    return OcclusionMask(states, buffer.reshape(height, width))


def lift_texture(img: ImageBuffer, p: ProjectionMatrix, g: GeometryImage, z: OcclusionMask) -> LiftedTexture:
    """Sample the image at the projection of every visible UV pixel; others are 0."""
    if z.resolution != g.resolution:
        raise ValueError(f"mask resolution {z.resolution} != geometry image resolution {g.resolution}")
    visible = z.visible & g.valid
    values = np.zeros(g.resolution + (img.channels,))
    xy = project(p, g.positions[visible])
    ok = bilinear_footprint_ok(xy[:, 0], xy[:, 1], img.width, img.height)
    samples = np.zeros((len(xy), img.channels))
    samples[ok] = bilinear_sample(img.pixels, xy[ok, 0], xy[ok, 1])
    values[visible] = np.clip(samples, 0.0, 1.0)
    return LiftedTexture(values)
