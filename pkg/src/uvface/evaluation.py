"""Closed-set identification metrics and report writers."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import DataRecord, write_data_list
from .errors import EvaluationError

log = logging.getLogger(__name__)

GRID_PITCHES = (30, 0, -30)
GRID_YAWS = (-90, -60, -30, 0, 30, 60, 90)
GALLERY_CELL = (0, 0)


@dataclass(frozen=True)
class ProbeResult:
    probe_id: str
    true_label: str
    ranked_labels: tuple[str, ...]

    def rank_of_truth(self) -> int | None:
        """1-based rank of the first correct label, or None if absent."""
        try:
            return self.ranked_labels.index(self.true_label) + 1
        except ValueError:
            return None


def closed_set(results: Sequence[ProbeResult], gallery_labels) -> list[ProbeResult]:
    """Drop probes whose subject is not enrolled in the gallery."""
    labels = set(gallery_labels)
    kept = [r for r in results if r.true_label in labels]
    if len(kept) != len(results):
        log.warning("rejected %d probe(s) whose subject is absent from the gallery", len(results) - len(kept))
    return kept


def rank1(results: Sequence[ProbeResult]) -> float:
    """Percentage of probes whose top-ranked label is correct."""
    if not results:
        raise EvaluationError("rank-1 accuracy needs at least one probe")
    for r in results:
        if not r.ranked_labels:
            raise EvaluationError(f"probe {r.probe_id!r} has an empty ranking")
    hits = sum(r.ranked_labels[0] == r.true_label for r in results)
    return 100.0 * hits / len(results)


def cmc(results: Sequence[ProbeResult], max_rank: int | None = None) -> list[float]:
    """Cumulative match curve; element ``r - 1`` is the accuracy at rank ``r``."""
    if not results:
        raise EvaluationError("CMC needs at least one probe")
    gallery_size = max(len(r.ranked_labels) for r in results)
    if max_rank is None:
        max_rank = gallery_size
    elif max_rank > gallery_size:
        log.warning("max_rank %d exceeds gallery size %d; clamping", max_rank, gallery_size)
        max_rank = gallery_size
    hits = np.zeros(max_rank + 1, dtype=np.int64)
    for r in results:
        k = r.rank_of_truth()
        if k is not None and k <= max_rank:
            hits[k] += 1
    return [100.0 * c / len(results) for c in np.cumsum(hits)[1:]]


@dataclass(frozen=True)
class IdentificationResult:
    probes: tuple[ProbeResult, ...]
    rank1_accuracy: float
    cmc: tuple[float, ...]
    excluded: int = 0

    @classmethod
    def from_probes(cls, probes: Sequence[ProbeResult], max_rank: int | None = None, excluded: int = 0):
        return cls(tuple(probes), rank1(probes), tuple(cmc(probes, max_rank)), excluded)


def split_average(accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    if len(accuracies) == 0:
        raise EvaluationError("split_average needs at least one value")
    arr = np.asarray(accuracies, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def pose_index(pitch: int, yaw: int) -> int:
    """1-based pose number: column-major over the yaw x pitch grid."""
    return GRID_YAWS.index(yaw) * len(GRID_PITCHES) + GRID_PITCHES.index(pitch) + 1


@dataclass(frozen=True)
class PoseGridReport:
    cells: tuple[tuple[float | None, ...], ...]  # rows: pitch +30, 0, -30; cols: yaw -90..+90

    def value(self, pitch: int, yaw: int) -> float | None:
        return self.cells[GRID_PITCHES.index(pitch)][GRID_YAWS.index(yaw)]

    def to_text(self, decimals: int = 0) -> str:
        head = ["pitch\\yaw"] + [f"{y:+d}" for y in GRID_YAWS]
        lines = [head]
        for pitch, row in zip(GRID_PITCHES, self.cells):
            lines.append([f"{pitch:+d}"] + ["-" if v is None else f"{v:.{decimals}f}" for v in row])
        widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
        return "\n".join(" ".join(c.rjust(w) for c, w in zip(line, widths)) for line in lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "pitches": list(GRID_PITCHES),
            "yaws": list(GRID_YAWS),
            "cells": [[v for v in row] for row in self.cells],
        }


def pose_grid(values: Mapping[tuple[int, int], float]) -> PoseGridReport:
    """Lay per-pose rank-1 values out as pitch rows (+30 top) by yaw columns (-90 left)."""
    rows = []
    for pitch in GRID_PITCHES:
        row = []
        for yaw in GRID_YAWS:
            if (pitch, yaw) == GALLERY_CELL:
                row.append(None)
                continue
            if (pitch, yaw) not in values:
                raise EvaluationError(f"missing pose cell ({pitch:+d},{yaw:+d})")
            v = float(values[(pitch, yaw)])
            if not (0.0 <= v <= 100.0) or math.isnan(v):
                raise EvaluationError(f"pose cell ({pitch:+d},{yaw:+d}) value {v} outside [0, 100]")
            row.append(v)
        rows.append(tuple(row))
    return PoseGridReport(tuple(rows))


def write_rankings(path: str | os.PathLike, results: Sequence[ProbeResult], top: int | None = None) -> None:
    """Per-probe ranking CSV: probe id, true label, rank of truth, ranked labels."""
    records = []
    for r in results:
        ranked = r.ranked_labels if top is None else r.ranked_labels[:top]
        rank = r.rank_of_truth()
        records.append(DataRecord({
            "probe_id": r.probe_id,
            "true_label": r.true_label,
            "rank": "" if rank is None else str(rank),
            "ranking": " ".join(ranked),
        }))
    write_data_list(records, path, header=("probe_id", "true_label", "rank", "ranking"))


def write_summary(
    path: str | os.PathLike,
    rank1_value: float,
    cmc_values: Sequence[float],
    splits: Sequence[float] = (),
    extra: Mapping | None = None,
) -> dict:
    summary = {"rank1": rank1_value, "cmc": list(cmc_values)}
    if splits:
        mean, std = split_average(splits)
        summary["splits"] = {"mean": mean, "std": std, "values": list(splits)}
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
