"""Command-line entry point: ``uvface run|synth|match|eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .datamodel import load_config, read_sigset
from .errors import ConfigError, EvaluationError, NoOverlapError, ShapeMismatchError, UVFaceError
from .matching import match_signatures, read_score_matrix, rank_from_scores
from .signature import Signature

log = logging.getLogger("uvface")

EXIT_CONFIG = 101
MAX_FAILURE_EXIT = 100
EXIT_NO_OVERLAP = 2
EXIT_SHAPE_MISMATCH = 3


def cmd_run(args) -> int:
    from .pipeline import run_pipeline

    try:
        text = Path(args.config).read_text(encoding="utf-8")
        config = load_config(args.config)
    except (OSError, ConfigError) as exc:
        log.error("event=config_error message=%r", str(exc))
        return EXIT_CONFIG
    _, failed = run_pipeline(config, text)
    return min(failed, MAX_FAILURE_EXIT)


def cmd_synth(args) -> int:
    from .synth import build_pose_grid_dataset

    if args.n < 2:
        log.error("event=usage_error message='--n must be at least 2'")
        return 1
    pairs = build_pose_grid_dataset(args.n, args.out, seed=args.seed, image_size=(args.size, args.size))
    for gallery, probe in pairs:
        print(f"{gallery}\t{probe}")
    print(Path(args.out) / "config.json")
    return 0


def cmd_match(args) -> int:
    try:
        a, b = Signature.load(args.a), Signature.load(args.b)
        score = match_signatures(a, b)
    except NoOverlapError:
        print("NA")
        return EXIT_NO_OVERLAP
    except ShapeMismatchError as exc:
        log.error("event=shape_mismatch message=%r", str(exc))
        return EXIT_SHAPE_MISMATCH
    except (OSError, UVFaceError) as exc:
        log.error("event=read_error message=%r", str(exc))
        return 1
    print(f"{score.value:.6f}")
    return 0


def cmd_eval(args) -> int:
    try:
        probe_ids, labels, scores = read_score_matrix(args.scores)
        gallery = read_sigset(args.gallery)
        probes = read_sigset(args.probes)
    except (OSError, ValueError, UVFaceError) as exc:
        log.error("event=read_error message=%r", str(exc))
        return 1
    truth = {e.entry_id: e.subject for e in probes.entries}
    results = []
    for pid, row in zip(probe_ids, scores):
        if pid not in truth:
            log.warning("event=unknown_probe id=%s", pid)
            continue
        results.append(ev.ProbeResult(pid, truth[pid], tuple(rank_from_scores(labels, row))))
    results = ev.closed_set(results, [e.subject for e in gallery.entries])
    try:
        summary = {"rank1": ev.rank1(results), "cmc": ev.cmc(results, args.max_rank)}
    except EvaluationError as exc:
        log.error("event=evaluation_error message=%r", str(exc))
        return 1
    mean, std = ev.split_average([summary["rank1"]])
    summary["splits"] = {"mean": mean, "std": std}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uvface", description="3D-aided pose-invariant face recognition")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="enroll, match and evaluate from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="generate the synthetic pose-grid dataset")
    p.add_argument("--n", type=int, required=True, help="number of identities")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128, help="image side in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", help="score two signature files")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="rank-1 and CMC from a score matrix")
    p.add_argument("--scores", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--probes", required=True)
    p.add_argument("--max-rank", type=int, default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
    )
    return args.func(args)
