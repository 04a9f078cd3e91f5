"""File-backed records, sigsets, run configuration and image buffers.

Records only ever hold strings (usually file paths); pixel data, meshes and
signatures stay on disk until a stage needs them.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, ConfigParseError, FormatError
from .raster import bilinear_sample

log = logging.getLogger(__name__)

# Stage names accepted in ``pipelines.modules``. Detection, landmarking and
# reconstruction are served by file-based providers.
PIPELINE_STAGES = (
    "detection",
    "landmarks",
    "reconstruction",
    "pose",
    "lifting",
    "signature",
    "matching",
    "evaluation",
)
DEFAULT_MODULES = ("landmarks", "reconstruction", "pose", "lifting", "signature", "matching", "evaluation")
METRICS = ("rank1", "cmc")

SIGSET_HEADER = ("id", "subject", "path")


class DataRecord(Mapping[str, str]):
    """Ordered, immutable string-to-string record."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, str] | Iterable[tuple[str, str]] = ()):
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        data: dict[str, str] = {}
        for key, value in items:
            if not isinstance(key, str) or not isinstance(value, str):
                raise TypeError(f"record keys and values must be str, got {key!r}: {value!r}")
            if key in data:
                raise ValueError(f"duplicate key {key!r}")
            data[key] = value
        self._entries = data

    def __getitem__(self, key: str) -> str:
        return self._entries[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, DataRecord):
            return list(self._entries.items()) == list(other._entries.items())
        return NotImplemented

    def __hash__(self) -> int:
        return hash(tuple(self._entries.items()))

    def __repr__(self) -> str:
        return f"DataRecord({self._entries!r})"

    def with_entries(self, **updates: str) -> "DataRecord":
        """Copy with keys added or replaced; new keys are appended in order."""
        merged = dict(self._entries)
        merged.update(updates)
        return DataRecord(merged)


def read_data_list(path: str | os.PathLike) -> list[DataRecord]:
    """Parse a CSV data list whose first line holds the key tags."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty data list (missing header line)") from None
        if len(set(header)) != len(header):
            raise FormatError(f"{path}: duplicate tags in header {header}")
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}"
                )
            records.append(DataRecord(zip(header, row)))
    return records


def write_data_list(
    records: Sequence[Mapping[str, str]],
    path: str | os.PathLike,
    header: Sequence[str] | None = None,
) -> None:
    """Write records as CSV. ``header`` is only needed for an empty list."""
    if records:
        keys = list(records[0].keys())
        for i, rec in enumerate(records):
            if list(rec.keys()) != keys:
                raise ValueError(f"record {i} has keys {list(rec.keys())}, expected {keys}")
        if header is not None and list(header) != keys:
            raise ValueError(f"header {list(header)} does not match record keys {keys}")
    elif header is None:
        raise ValueError("cannot write an empty data list without an explicit header")
    else:
        keys = list(header)
    for rec in records:
        for value in rec.values():
            if "\n" in value or "\r" in value:
                raise ValueError(f"embedded newline in value {value!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(keys)
    for rec in records:
        writer.writerow([rec[k] for k in keys])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


@dataclass(frozen=True)
class SigsetEntry:
    entry_id: str
    subject: str
    path: str


@dataclass(frozen=True)
class Sigset:
    name: str
    entries: tuple[SigsetEntry, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.entry_id in seen:
                raise FormatError(f"sigset {self.name!r}: duplicate entry id {e.entry_id!r}")
            if not e.path:
                raise FormatError(f"sigset {self.name!r}: empty path for entry {e.entry_id!r}")
            seen.add(e.entry_id)

    def __len__(self) -> int:
        return len(self.entries)

    def records(self) -> list[DataRecord]:
        return [
            DataRecord({"id": e.entry_id, "subject": e.subject, "path": e.path})
            for e in self.entries
        ]


def read_sigset(path: str | os.PathLike) -> Sigset:
    """Load a sigset CSV (columns ``id,subject,path``; extra columns ignored).

    Relative image paths are resolved against the sigset's directory.
    """
    path = Path(path)
    records = read_data_list(path)
    entries = []
    for rec in records:
        missing = [k for k in SIGSET_HEADER if k not in rec]
        if missing:
            raise FormatError(f"{path}: sigset is missing columns {missing}")
        img = rec["path"]
        if img and not os.path.isabs(img):
            img = os.path.normpath(path.parent / img)
        entries.append(SigsetEntry(rec["id"], rec["subject"], img))
    return Sigset(path.stem, tuple(entries))


def write_sigset(sigset: Sigset, path: str | os.PathLike, relative_to: str | os.PathLike | None = None) -> None:
    rows = []
    for e in sigset.entries:
        p = e.path
        if relative_to is not None:
            p = os.path.relpath(p, relative_to)
        rows.append(DataRecord({"id": e.entry_id, "subject": e.subject, "path": p}))
    write_data_list(rows, path, header=SIGSET_HEADER)


@dataclass(frozen=True)
class PipelineConfig:
    dataset_name: str
    dataset_path: str
    galleries: tuple[str, ...]
    probes: tuple[str, ...]
    signatures_dir: str
    results_dir: str
    modules: tuple[str, ...]
    model_paths: Mapping[str, str] = field(default_factory=dict)
    metric: str = "rank1"
    options: Mapping[str, object] = field(default_factory=dict)
    base_dir: str = "."

    def resolve(self, p: str) -> str:
        """Resolve a config-relative path."""
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))


def _require(obj: Mapping, key: str, where: str):
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{where}: expected an object")
    if key not in obj:
        raise ConfigError(f"missing required attribute {where}.{key}")
    return obj[key]


def _str_list(value, where: str) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{where}: expected a list of paths")
    return tuple(value)


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> PipelineConfig:
    """Parse a JSON run configuration with ``dataset``/``input``/``output``/``pipelines`` groups."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in ("dataset", "input", "output", "pipelines"):
        if key not in raw:
            raise ConfigError(f"missing required attribute {key}")
    for key in sorted(set(raw) - {"dataset", "input", "output", "pipelines", "evaluation"}):
        log.warning("ignoring unknown config attribute %r", key)

    dataset, inp, out, pipes = raw["dataset"], raw["input"], raw["output"], raw["pipelines"]
    name = _require(dataset, "name", "dataset")
    dpath = _require(dataset, "path", "dataset")
    galleries = _str_list(_require(inp, "galleries", "input"), "input.galleries")
    probes = _str_list(_require(inp, "probes", "input"), "input.probes")
    sig_dir = _require(out, "signatures_dir", "output")
    res_dir = _require(out, "results_dir", "output")
    for label, value in (("output.signatures_dir", sig_dir), ("output.results_dir", res_dir)):
        if not isinstance(value, str) or not value:
            raise ConfigError(f"{label} must be a nonempty string")

    modules = _str_list(pipes.get("modules", list(DEFAULT_MODULES)) if isinstance(pipes, Mapping) else None,
                        "pipelines.modules")
    unknown = [m for m in modules if m not in PIPELINE_STAGES]
    if unknown:
        raise ConfigError(f"unregistered pipeline module(s): {', '.join(unknown)}")
    model_paths = pipes.get("model_paths", {})
    if not isinstance(model_paths, Mapping) or not all(isinstance(v, str) for v in model_paths.values()):
        raise ConfigError("pipelines.model_paths must map names to path strings")

    evaluation = raw.get("evaluation", {})
    if not isinstance(evaluation, Mapping):
        raise ConfigError("evaluation must be an object")
    metric = evaluation.get("metric", "rank1")
    if metric not in METRICS:
        raise ConfigError(f"evaluation.metric must be one of {METRICS}, got {metric!r}")
    options = evaluation.get("options", {})
    if not isinstance(options, Mapping):
        raise ConfigError("evaluation.options must be an object")

    return PipelineConfig(
        dataset_name=str(name),
        dataset_path=str(dpath),
        galleries=galleries,
        probes=probes,
        signatures_dir=sig_dir,
        results_dir=res_dir,
        modules=modules,
        model_paths=dict(model_paths),
        metric=metric,
        options=dict(options),
        base_dir=str(base_dir),
    )


def load_config(path: str | os.PathLike) -> PipelineConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


@dataclass(frozen=True)
class ImageBuffer:
    """``H x W x C`` float image with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected H x W x {{1,3}} pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(px)):
            raise ValueError("image has non-finite pixels")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ImageBuffer":
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
        return cls(arr)

    def to_uint8(self) -> np.ndarray:
        arr = np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)
        return arr[:, :, 0] if self.channels == 1 else arr

    def save(self, path: str | os.PathLike) -> None:
        Image.fromarray(self.to_uint8()).save(path, format="PNG")


def resize_bilinear(img: ImageBuffer, width: int, height: int) -> ImageBuffer:
    if (width, height) == (img.width, img.height):
        return img
    xs = (np.arange(width) + 0.5) * (img.width / width)
    ys = (np.arange(height) + 0.5) * (img.height / height)
    gx, gy = np.meshgrid(xs, ys)
    out = bilinear_sample(img.pixels, gx.ravel(), gy.ravel())
    return ImageBuffer(out.reshape(height, width, img.channels))


def normalize_resolution(img: ImageBuffer, lo: int = 50, hi: int = 1000) -> ImageBuffer:
    """Upsample so the short side reaches ``lo`` or downsample so the long side is ``hi``.

    When both bounds cannot hold (extreme aspect ratios) the ``hi`` cap wins.
    """
    w, h = img.width, img.height
    short, long_ = min(w, h), max(w, h)
    if short < lo and long_ * lo / short <= hi:
        scale, pinned, target = lo / short, short, lo
    elif long_ > hi or short < lo:
        scale, pinned, target = hi / long_, long_, hi
    else:
        return img
    new_w = target if w == pinned else max(1, int(round(w * scale)))
    new_h = target if h == pinned else max(1, int(round(h * scale)))
    return resize_bilinear(img, new_w, new_h)
