"""Occlusion-aware signature comparison, templates and gallery ranking."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NoOverlapError, ShapeMismatchError
from .signature import Signature


@dataclass(frozen=True)
class MatchScore:
    value: float
    mutually_visible: int


@dataclass(frozen=True, eq=False)
class Template(Signature):
    source_counts: np.ndarray | None = None

    def __post_init__(self):
        super().__post_init__()
        counts = np.zeros(self.K, dtype=np.int64) if self.source_counts is None else np.asarray(self.source_counts, dtype=np.int64)
        object.__setattr__(self, "source_counts", counts)


def _check_compatible(a: Signature, b: Signature) -> None:
    if a.preset != b.preset or a.features.shape != b.features.shape:
        raise ShapeMismatchError(
            f"cannot compare {a.preset.name} {a.features.shape} with {b.preset.name} {b.features.shape}"
        )


def match_signatures(a: Signature, b: Signature) -> MatchScore:
    """Mean per-patch cosine similarity over patches usable in both signatures."""
    _check_compatible(a, b)
    both = a.flags & b.flags
    n = int(np.count_nonzero(both))
    if n == 0:
        raise NoOverlapError("signatures share no mutually usable patch")
    fa = a.features[both].astype(np.float64)
    fb = b.features[both].astype(np.float64)
    dots = (fa * fb).sum(axis=1)
    norms = np.sqrt((fa * fa).sum(axis=1)) * np.sqrt((fb * fb).sum(axis=1))
    cos = np.clip(dots / norms, -1.0, 1.0)
    return MatchScore(float(np.clip(cos.mean(), -1.0, 1.0)), n)


def aggregate_template(sigs: Sequence[Signature]) -> Template:
    """Average signatures patch by patch, weighting usable rows by visible fraction."""
    if not sigs:
        raise ValueError("cannot build a template from zero signatures")
    first = sigs[0]
    for s in sigs[1:]:
        _check_compatible(first, s)
    flags = np.stack([s.flags for s in sigs])  # N x K
    fractions = np.stack([s.fractions for s in sigs]).astype(np.float64)
    weights = np.where(flags, fractions, 0.0)
    feats = np.stack([s.features for s in sigs]).astype(np.float64)  # N x K x D
    summed = np.einsum("nk,nkd->kd", weights, feats)
    counts = flags.sum(axis=0)

    norms = np.linalg.norm(summed, axis=1)
    rows = np.zeros_like(summed)
    ok = norms > 0
    rows[ok] = summed[ok] / norms[ok, None]
    # Zero weights (all contributors at fraction 0) or exact cancellation: fall back to the first contributor.
    for k in np.flatnonzero((counts > 0) & ~ok):
        rows[k] = feats[int(np.argmax(flags[:, k])), k]

    with np.errstate(invalid="ignore", divide="ignore"):
        mean_fraction = np.where(counts > 0, (fractions * flags).sum(axis=0) / np.maximum(counts, 1), 0.0)
    return Template(
        first.preset,
        rows,
        mean_fraction,
        counts > 0,
        first.threshold,
        first.subject_hint,
        source_counts=counts,
    )


@dataclass(frozen=True)
class Candidate:
    label: str
    position: int
    score: MatchScore | None  # None when the pair shares no usable patch

    @property
    def matched(self) -> bool:
        return self.score is not None


def identify(probe: Signature, gallery: Sequence[tuple[str, Signature]]) -> list[Candidate]:
    """Rank gallery entries by descending score.

    Ties keep gallery order; entries without a mutually usable patch go last.
    """
    if not gallery:
        raise ValueError("gallery is empty")
    scored = []
    for pos, (label, sig) in enumerate(gallery):
        try:
            score = match_signatures(probe, sig)
        except NoOverlapError:
            score = None
        scored.append(Candidate(label, pos, score))
    return sorted(scored, key=lambda c: (c.score is None, -c.score.value if c.score else 0.0, c.position))


def write_score_matrix(
    path: str | os.PathLike,
    probe_ids: Sequence[str],
    gallery_labels: Sequence[str],
    scores: Sequence[Sequence[float | None]],
) -> None:
    """CSV with one row per probe; ``NA`` marks pairs without overlap."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["probe_id", *gallery_labels])
    for pid, row in zip(probe_ids, scores):
        writer.writerow([pid, *("NA" if s is None else f"{np.float32(s):.6f}" for s in row)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_score_matrix(path: str | os.PathLike):
    """Inverse of :func:`write_score_matrix`: ``(probe_ids, gallery_labels, scores)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["probe_id"]:
        raise ValueError(f"{path}: not a score matrix (missing probe_id header)")
    labels = rows[0][1:]
    probe_ids, scores = [], []
    for line, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(labels) + 1:
            raise ValueError(f"{path}:{line}: expected {len(labels) + 1} fields")
        probe_ids.append(row[0])
        scores.append([None if v == "NA" else float(v) for v in row[1:]])
    return probe_ids, labels, scores


def rank_from_scores(labels: Sequence[str], row: Sequence[float | None]) -> list[str]:
    """Gallery labels ordered as :func:`identify` would order them."""
    order = sorted(range(len(labels)), key=lambda i: (row[i] is None, -(row[i] or 0.0), i))
    return [labels[i] for i in order]
