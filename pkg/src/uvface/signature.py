"""Patch layouts, per-patch occlusion encoding and pose-robust signatures.

A signature holds one L2-normalized feature row per patch; patches with too
little visible texture keep an all-zero row and a cleared usable flag.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import DimensionError, FormatError, LayoutError
from .lifting import LiftedTexture, MaskState, OcclusionMask

FEATURE_DIM = 1024
DEFAULT_THRESHOLD = 0.5
DPRFS_OVERLAP = 0.25

MAGIC = b"URSG"
VERSION = 1
_HEADER = struct.Struct("<4sHBHHf")


class Preset(IntEnum):
    PRFS_64 = 0
    DPRFS_8 = 1
    CUSTOM = 2


PRESET_PATCHES = {Preset.PRFS_64: 64, Preset.DPRFS_8: 8}


@dataclass(frozen=True)
class PatchLayout:
    preset: Preset
    texture_size: tuple[int, int]  # H, W
    patches: tuple[tuple[int, int, int, int], ...]  # x, y, w, h

    def __post_init__(self):
        height, width = self.texture_size
        for x, y, w, h in self.patches:
            if w < 1 or h < 1 or x < 0 or y < 0 or x + w > width or y + h > height:
                raise LayoutError(f"patch {(x, y, w, h)} exceeds texture {height}x{width}")

    def __len__(self) -> int:
        return len(self.patches)

    def slices(self, i: int) -> tuple[slice, slice]:
        x, y, w, h = self.patches[i]
        return slice(y, y + h), slice(x, x + w)


def _overlapping_spans(extent: int, count: int, overlap: float) -> list[tuple[int, int]]:
    # Largest size (a multiple of 4) such that `count` windows overlapping by
    # `overlap` of their size fit in `extent`; the group is centered.
    denom = count - (count - 1) * overlap
    size = 4 * int(extent / denom // 4)
    stride = int(round(size * (1.0 - overlap)))
    start = (extent - (stride * (count - 1) + size)) // 2
    return [(start + k * stride, size) for k in range(count)]


def make_layout(preset: Preset | str, texture_size: tuple[int, int], patches=None) -> PatchLayout:
    """Patch rectangles for a preset.

    PRFS_64 is an 8x8 grid of non-overlapping tiles. DPRFS_8 is 2 rows by 4
    columns of equal rectangles whose neighbors overlap by 25% of their size.
    CUSTOM takes explicit ``patches``.
    """
    preset = Preset[preset] if isinstance(preset, str) else Preset(preset)
    height, width = texture_size
    if preset is Preset.CUSTOM:
        if not patches:
            raise LayoutError("custom layout needs explicit patches")
        return PatchLayout(preset, (height, width), tuple(tuple(int(v) for v in p) for p in patches))
    if height % 8 or width % 8:
        raise LayoutError(f"texture size {height}x{width} is not divisible by 8")
    if preset is Preset.PRFS_64:
        pw, ph = width // 8, height // 8
        rects = [(c * pw, r * ph, pw, ph) for r in range(8) for c in range(8)]
    else:
        cols = _overlapping_spans(width, 4, DPRFS_OVERLAP)
        rows = _overlapping_spans(height, 2, DPRFS_OVERLAP)
        rects = [(x, y, w, h) for y, h in rows for x, w in cols]
    return PatchLayout(preset, (height, width), tuple(rects))


@dataclass(frozen=True, eq=False)
class OcclusionEncoding:
    fractions: np.ndarray  # K, visible-pixel fraction per patch
    flags: np.ndarray  # K bool, patch usable
    threshold: float


def encode_occlusion(z: OcclusionMask, layout: PatchLayout, threshold: float = DEFAULT_THRESHOLD) -> OcclusionEncoding:
    if z.resolution != layout.texture_size:
        raise LayoutError(f"mask resolution {z.resolution} != layout texture size {layout.texture_size}")
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    visible = z.states == MaskState.VISIBLE
    counts = np.array([np.count_nonzero(visible[layout.slices(i)]) for i in range(len(layout))])
    areas = np.array([w * h for _, _, w, h in layout.patches])
    fractions = counts / areas
    return OcclusionEncoding(fractions, fractions >= threshold, float(threshold))


class FeatureExtractor(Protocol):
    name: str
    dim: int

    def __call__(self, pixels: np.ndarray, mask: np.ndarray) -> np.ndarray: ...


def default_descriptor(pixels: np.ndarray, mask: np.ndarray, dim: int = FEATURE_DIM,
                       cells: int = 4, bins: int = 8) -> np.ndarray:
    """Masked histogram of gradient orientations, zero-padded to ``dim``.

    Gradients come from ``np.gradient`` on the gray patch. A pixel contributes
    only if it and its in-patch 4-neighbors are unmasked. Orientations in
    ``[0, 2*pi)`` are split linearly between the two nearest of ``bins``
    centers (at multiples of ``2*pi/bins``), weighted by gradient magnitude,
    and pooled over a ``cells x cells`` grid. The histogram is L2-normalized;
    a patch without gradient energy maps to the one-hot vector ``e_0``.
    """
    gray = np.asarray(pixels, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    h, w = gray.shape
    if h < 1 or w < 1:
        raise ValueError("empty patch")
    mask = np.asarray(mask, dtype=bool)

    gy = np.gradient(gray, axis=0) if h > 1 else np.zeros_like(gray)
    gx = np.gradient(gray, axis=1) if w > 1 else np.zeros_like(gray)
    ok = mask.copy()
    ok[1:, :] &= mask[:-1, :]
    ok[:-1, :] &= mask[1:, :]
    ok[:, 1:] &= mask[:, :-1]
    ok[:, :-1] &= mask[:, 1:]

    mag = np.hypot(gx, gy) * ok
    t = np.mod(np.arctan2(gy, gx), 2 * np.pi) / (2 * np.pi / bins)
    lo = np.floor(t)
    frac = t - lo
    b0 = lo.astype(np.int64) % bins
    b1 = (b0 + 1) % bins
    cell = (np.arange(h)[:, None] * cells // h) * cells + (np.arange(w)[None, :] * cells // w)
    n = cells * cells * bins
    hist = np.bincount((cell * bins + b0).ravel(), (mag * (1.0 - frac)).ravel(), minlength=n)
    hist += np.bincount((cell * bins + b1).ravel(), (mag * frac).ravel(), minlength=n)

    out = np.zeros(dim)
    norm = np.linalg.norm(hist)
    if norm == 0.0:
        out[0] = 1.0
        return out
    k = min(n, dim)
    out[:k] = hist[:k] / norm
    return out


class GradientHistogramExtractor:
    """The built-in stand-in for trained per-patch features."""

    name = "gradient-histogram"

    def __init__(self, dim: int = FEATURE_DIM):
        self.dim = dim

    def __call__(self, pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return default_descriptor(pixels, mask, dim=self.dim)


@dataclass(frozen=True, eq=False)
class Signature:
    preset: Preset
    features: np.ndarray  # K x D float32
    fractions: np.ndarray  # K float32
    flags: np.ndarray  # K bool
    threshold: float
    subject_hint: str | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        fr = np.asarray(self.fractions, dtype=np.float32).reshape(-1)
        fl = np.asarray(self.flags, dtype=bool).reshape(-1)
        if feats.ndim != 2 or len(fr) != feats.shape[0] or len(fl) != feats.shape[0]:
            raise ValueError("features, fractions and flags disagree on patch count")
        object.__setattr__(self, "preset", Preset(self.preset))
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "fractions", fr)
        object.__setattr__(self, "flags", fl)
        object.__setattr__(self, "threshold", float(np.float32(self.threshold)))

    @property
    def K(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    @property
    def encoding(self) -> OcclusionEncoding:
        return OcclusionEncoding(self.fractions, self.flags, self.threshold)

    def same_content(self, other: "Signature") -> bool:
        return (
            self.preset == other.preset
            and self.threshold == other.threshold
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.fractions, other.fractions)
            and np.array_equal(self.flags, other.flags)
        )

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, VERSION, int(self.preset), self.K, self.D, self.threshold)
        return b"".join([
            header,
            self.fractions.astype("<f4").tobytes(),
            self.flags.astype(np.uint8).tobytes(),
            self.features.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Signature":
        if len(data) < _HEADER.size:
            raise FormatError("truncated signature header")
        magic, version, preset, k, d, threshold = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad signature magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported signature version {version}")
        expected = _HEADER.size + 4 * k + k + 4 * k * d
        if len(data) != expected:
            raise FormatError(f"signature payload is {len(data)} bytes, expected {expected}")
        off = _HEADER.size
        fractions = np.frombuffer(data, "<f4", k, off)
        off += 4 * k
        flags = np.frombuffer(data, np.uint8, k, off)
        off += k
        features = np.frombuffer(data, "<f4", k * d, off).reshape(k, d)
        try:
            preset = Preset(preset)
        except ValueError:
            raise FormatError(f"unknown preset code {preset}") from None
        return cls(preset, features.astype(np.float32), fractions.astype(np.float32), flags.astype(bool), threshold)

    def save(self, path: str | os.PathLike) -> None:
        """Write atomically (temp file + rename)."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Signature":
        return cls.from_bytes(Path(path).read_bytes())


def extract_signature(
    t: LiftedTexture,
    z: OcclusionMask,
    layout: PatchLayout,
    extractor: FeatureExtractor | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> Signature:
    """Run the extractor on every usable patch and L2-normalize its output."""
    if extractor is None:
        extractor = GradientHistogramExtractor()
    if t.resolution != z.resolution or t.resolution != layout.texture_size:
        raise LayoutError(
            f"texture {t.resolution}, mask {z.resolution} and layout {layout.texture_size} disagree"
        )
    dim = FEATURE_DIM if layout.preset in PRESET_PATCHES else extractor.dim
    if extractor.dim != dim:
        raise DimensionError(f"extractor {extractor.name!r} has dim {extractor.dim}, preset needs {dim}")
    enc = encode_occlusion(z, layout, threshold)
    visible = z.visible
    features = np.zeros((len(layout), dim), dtype=np.float32)
    for i in np.flatnonzero(enc.flags):
        rows, cols = layout.slices(i)
        vec = np.asarray(extractor(t.values[rows, cols], visible[rows, cols]), dtype=np.float64)
        if vec.shape != (dim,):
            raise DimensionError(f"extractor returned shape {vec.shape}, expected ({dim},)")
        norm = np.linalg.norm(vec)
        if not math.isfinite(norm) or norm == 0.0:
            raise ValueError(f"extractor returned a zero or non-finite vector for patch {i}")
        features[i] = vec / norm
    return Signature(layout.preset, features, enc.fractions, enc.flags, threshold)

