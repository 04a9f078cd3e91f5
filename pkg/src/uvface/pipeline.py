"""Batch enrollment, matching and evaluation driven by a :class:`PipelineConfig`.

Landmarks and meshes are injected through files. For an image ``dir/x.png``
the landmark provider looks for (in order) a ``landmarks`` record entry,
``dir/x.lmk``, then ``<model_paths.landmarks>/x.lmk``; the mesh provider for a
``mesh`` entry, ``dir/x.obj``, then ``<model_paths.reconstruction>/x.obj``
and ``<model_paths.reconstruction>/<subject>.obj``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .datamodel import (
    DataRecord,
    ImageBuffer,
    PipelineConfig,
    normalize_resolution,
    read_sigset,
    write_data_list,
)
from .errors import NoOverlapError
from .geometry import AnnotatedFaceModel, estimate_pose, refine_pose_lm
from .lifting import DEFAULT_UV_RESOLUTION, lift_texture, rasterize_geometry_image, zbuffer_visibility
from .matching import aggregate_template, identify, match_signatures, write_score_matrix
from .signature import DEFAULT_THRESHOLD, Preset, Signature, extract_signature, make_layout
from .synth import load_landmarks

log = logging.getLogger(__name__)

POSE_NAME = re.compile(r"p([+-]?\d+)_y([+-]?\d+)")


@dataclass(frozen=True)
class EnrollSettings:
    preset: Preset = Preset.PRFS_64
    threshold: float = DEFAULT_THRESHOLD
    uv_resolution: tuple[int, int] = DEFAULT_UV_RESOLUTION
    lam: float | None = None
    lm_iters: int = 100
    resolution_lo: int = 50
    resolution_hi: int = 1000
    landmark_dir: str | None = None
    mesh_dir: str | None = None

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "EnrollSettings":
        opts = config.options
        model_paths = config.model_paths
        lam = opts.get("lambda")
        return cls(
            preset=Preset[str(opts.get("preset", "PRFS_64"))],
            threshold=float(opts.get("threshold", DEFAULT_THRESHOLD)),
            uv_resolution=tuple(int(v) for v in opts.get("uv_resolution", DEFAULT_UV_RESOLUTION)),
            lam=None if lam is None else float(lam),
            lm_iters=int(opts.get("lm_iters", 100)) if "pose" in config.modules else 0,
            resolution_lo=int(opts.get("resolution_lo", 50)),
            resolution_hi=int(opts.get("resolution_hi", 1000)),
            landmark_dir=config.resolve(model_paths["landmarks"]) if "landmarks" in model_paths else None,
            mesh_dir=config.resolve(model_paths["reconstruction"]) if "reconstruction" in model_paths else None,
        )


def _first_existing(candidates) -> Path:
    tried = []
    for c in candidates:
        if c is None:
            continue
        tried.append(str(c))
        if Path(c).is_file():
            return Path(c)
    raise FileNotFoundError(f"no provider file found (tried {', '.join(tried) or 'nothing'})")


def landmark_path(record: DataRecord, settings: EnrollSettings) -> Path:
    img = Path(record["path"])
    return _first_existing([
        record.get("landmarks"),
        img.with_suffix(".lmk"),
        Path(settings.landmark_dir) / f"{img.stem}.lmk" if settings.landmark_dir else None,
    ])


def mesh_path(record: DataRecord, settings: EnrollSettings) -> Path:
    img = Path(record["path"])
    d = Path(settings.mesh_dir) if settings.mesh_dir else None
    return _first_existing([
        record.get("mesh"),
        img.with_suffix(".obj"),
        d / f"{img.stem}.obj" if d else None,
        d / f"{record['subject']}.obj" if d and "subject" in record else None,
    ])


@lru_cache(maxsize=32)
def _geometry(path: str, mtime_ns: int, res: tuple[int, int]):
    model = AnnotatedFaceModel.load(path)
    return model, rasterize_geometry_image(model, res)


def enroll_image(record: DataRecord, settings: EnrollSettings):
    """Full enrollment of one image: returns ``(signature, timings_ms)``."""
    timings = {}
    t0 = time.perf_counter()
    img = ImageBuffer.load(record["path"])
    lmk = load_landmarks(landmark_path(record, settings))
    norm = normalize_resolution(img, settings.resolution_lo, settings.resolution_hi)
    if (norm.width, norm.height) != (img.width, img.height):
        lmk = lmk * np.array([norm.width / img.width, norm.height / img.height])
    mpath = mesh_path(record, settings)
    model, g = _geometry(str(mpath), mpath.stat().st_mtime_ns, settings.uv_resolution)
    t1 = time.perf_counter()
    timings["load"] = (t1 - t0) * 1e3

    p, _ = estimate_pose(lmk, model.landmarks3d, settings.lam)
    if settings.lm_iters > 0:
        p, _ = refine_pose_lm(p, lmk, model.landmarks3d, settings.lam, max_iters=settings.lm_iters)
    t2 = time.perf_counter()
    timings["pose"] = (t2 - t1) * 1e3

    z = zbuffer_visibility(g, p, (norm.width, norm.height))
    tex = lift_texture(norm, p, g, z)
    t3 = time.perf_counter()
    timings["lifting"] = (t3 - t2) * 1e3

    layout = make_layout(settings.preset, settings.uv_resolution)
    sig = extract_signature(tex, z, layout, threshold=settings.threshold)
    timings["signature"] = (time.perf_counter() - t3) * 1e3
    return sig, timings


@dataclass
class RecordOutcome:
    sigset: str
    entry_id: str
    subject: str
    path: str
    status: str  # "enrolled" or "failed"
    reason: str = ""
    signature_path: str = ""
    timings: dict = field(default_factory=dict)


def _enroll_task(args) -> RecordOutcome:
    sigset_name, record, settings, out_path = args
    outcome = RecordOutcome(sigset_name, record["id"], record["subject"], record["path"], "failed")
    try:
        sig, timings = enroll_image(record, settings)
        t = time.perf_counter()
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        sig.save(out_path)
        timings["write"] = (time.perf_counter() - t) * 1e3
        outcome.status, outcome.signature_path, outcome.timings = "enrolled", str(out_path), timings
    except Exception as exc:  # per-record isolation: never abort the batch
        outcome.reason = f"{type(exc).__name__}: {exc}"
        Path(out_path).unlink(missing_ok=True)
    return outcome


def _rel(path: str, start: Path) -> str:
    # Lists under results_dir store paths relative to it, like sigset CSVs.
    return os.path.relpath(path, start) if path else ""


def worker_count(config: PipelineConfig) -> int:
    env = os.environ.get("UR_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, int(config.options.get("workers", 1)))


def _parse_pose(name: str):
    m = POSE_NAME.search(name)
    return (int(m.group(1)), int(m.group(2))) if m else None


def run_pipeline(config: PipelineConfig, config_text: str) -> tuple[dict, int]:
    """Enroll every sigset entry, score probes against galleries, write reports.

    Returns ``(manifest, n_failed)``.
    """
    settings = EnrollSettings.from_config(config)
    sig_root = Path(config.resolve(config.signatures_dir))
    res_root = Path(config.resolve(config.results_dir))
    sig_root.mkdir(parents=True, exist_ok=True)
    res_root.mkdir(parents=True, exist_ok=True)

    galleries = [read_sigset(config.resolve(p)) for p in config.galleries]
    probes = [read_sigset(config.resolve(p)) for p in config.probes]
    tasks, seen = [], set()
    for sigset in galleries + probes:
        for rec in sigset.records():
            key = (sigset.name, rec["id"])
            if key in seen:
                continue
            seen.add(key)
            tasks.append((sigset.name, rec, settings, sig_root / sigset.name / f"{rec['id']}.sig"))

    t0 = time.perf_counter()
    workers = min(worker_count(config), max(1, len(tasks)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_enroll_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        outcomes = [_enroll_task(t) for t in tasks]
    enroll_ms = (time.perf_counter() - t0) * 1e3
    failed = [o for o in outcomes if o.status == "failed"]
    for o in failed:
        log.error("event=enroll_failed sigset=%s id=%s reason=%r", o.sigset, o.entry_id, o.reason)
    log.info("event=enrolled ok=%d failed=%d workers=%d ms=%.0f", len(outcomes) - len(failed), len(failed), workers, enroll_ms)

    by_set: dict[str, list[RecordOutcome]] = {}
    for o in outcomes:
        by_set.setdefault(o.sigset, []).append(o)
    for name, outs in by_set.items():
        write_data_list(
            [DataRecord({"id": o.entry_id, "subject": o.subject, "path": _rel(o.path, res_root),
                         "signature_path": _rel(o.signature_path, res_root), "status": o.status}) for o in outs],
            res_root / f"{name}.csv",
        )

    t1 = time.perf_counter()
    summary = _evaluate(config, galleries, probes, by_set, res_root) if "matching" in config.modules else {}
    eval_ms = (time.perf_counter() - t1) * 1e3

    manifest = {
        "config_hash": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "records": [
            {
                "sigset": o.sigset,
                "id": o.entry_id,
                "status": "enrolled" if o.status == "enrolled" else f"failed({o.reason})",
                "signature_path": o.signature_path,
                "timings_ms": {k: round(v, 3) for k, v in o.timings.items()},
            }
            for o in outcomes
        ],
        "outputs": {"signatures_dir": str(sig_root), "results_dir": str(res_root), **summary.get("outputs", {})},
        "timings_ms": {"enrollment": round(enroll_ms, 3), "evaluation": round(eval_ms, 3)},
        "failed": len(failed),
    }
    manifest_path = res_root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest, len(failed)


def _load_enrolled(outs: list[RecordOutcome]) -> list[tuple[RecordOutcome, Signature]]:
    return [(o, Signature.load(o.signature_path)) for o in outs if o.status == "enrolled"]


def _evaluate(config, galleries, probes, by_set, res_root: Path) -> dict:
    opts = config.options
    gallery_entries = []
    for g in galleries:
        gallery_entries.extend(_load_enrolled(by_set.get(g.name, [])))
    if not gallery_entries:
        log.error("event=no_gallery message='no gallery signature enrolled; skipping matching'")
        return {}
    if opts.get("templates", False):
        subjects: dict[str, list[Signature]] = {}
        for o, s in gallery_entries:
            subjects.setdefault(o.subject, []).append(s)
        gallery = [(label, aggregate_template(sigs)) for label, sigs in subjects.items()]
    else:
        gallery = [(o.subject, s) for o, s in gallery_entries]
    labels = [label for label, _ in gallery]
    max_rank = opts.get("max_rank")
    max_rank = None if max_rank is None else min(int(max_rank), len(gallery))

    outputs, per_set, all_results, pose_values = {}, {}, [], {}
    for probe_set in probes:
        outs = by_set.get(probe_set.name, [])
        entries = _load_enrolled(outs)
        not_enrolled = len(outs) - len(entries)
        results, matrix = [], []
        for o, sig in entries:
            ranked = identify(sig, gallery)
            results.append(ev.ProbeResult(o.entry_id, o.subject, tuple(c.label for c in ranked)))
            row = []
            for _, gsig in gallery:
                try:
                    row.append(match_signatures(sig, gsig).value)
                except NoOverlapError:
                    row.append(None)
            matrix.append(row)
        scores_path = res_root / f"scores_{probe_set.name}.csv"
        write_score_matrix(scores_path, [o.entry_id for o, _ in entries], labels, matrix)
        kept = ev.closed_set(results, labels)
        if not kept:
            log.error("event=empty_probe_set sigset=%s", probe_set.name)
            continue
        res = ev.IdentificationResult.from_probes(kept, max_rank, excluded=not_enrolled + len(results) - len(kept))
        if res.excluded:
            log.warning("event=probes_excluded sigset=%s count=%d", probe_set.name, res.excluded)
        rankings_path = res_root / f"rankings_{probe_set.name}.csv"
        ev.write_rankings(rankings_path, kept, top=max_rank)
        per_set[probe_set.name] = {"rank1": res.rank1_accuracy, "cmc": list(res.cmc), "excluded": res.excluded,
                                   "probes": len(kept)}
        outputs[f"scores_{probe_set.name}"] = str(scores_path)
        outputs[f"rankings_{probe_set.name}"] = str(rankings_path)
        all_results.extend(kept)
        pose = _parse_pose(probe_set.name)
        if pose is not None:
            pose_values[pose] = res.rank1_accuracy
        log.info("event=probe_set sigset=%s rank1=%.2f probes=%d", probe_set.name, res.rank1_accuracy, len(kept))

    extra = {"per_sigset": per_set}
    if opts.get("pose_grid", False):
        grid = ev.pose_grid(pose_values)
        grid_path = res_root / "pose_grid.txt"
        grid_path.write_text(grid.to_text(), encoding="utf-8")
        outputs["pose_grid"] = str(grid_path)
        extra["pose_grid"] = grid.to_dict()
    summary_path = res_root / "summary.json"
    if all_results:
        ev.write_summary(
            summary_path,
            ev.rank1(all_results),
            ev.cmc(all_results, max_rank),
            splits=[v["rank1"] for v in per_set.values()],
            extra=extra,
        )
        outputs["summary"] = str(summary_path)
    return {"outputs": outputs, "per_sigset": per_set}
