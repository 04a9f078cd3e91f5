import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from uvface.cli import EXIT_CONFIG, EXIT_NO_OVERLAP, EXIT_SHAPE_MISMATCH, main
from uvface.datamodel import read_data_list
from uvface.signature import Preset, Signature
from uvface.synth import build_pose_grid_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    build_pose_grid_dataset(2, root, seed=1, image_size=(64, 64))
    return root


def copy_dataset(src: Path, dst: Path) -> Path:
    shutil.copytree(src, dst)
    return dst / "config.json"


def manifest_without_timings(results: Path) -> list:
    data = json.loads((results / "manifest.json").read_text())
    return [{k: v for k, v in r.items() if k != "timings_ms"} for r in data["records"]]


def sig_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.sig"))}


class TestRun:
    def test_end_to_end_and_rerun(self, dataset, tmp_path, monkeypatch):
        monkeypatch.delenv("UR_WORKERS", raising=False)
        config = copy_dataset(dataset, tmp_path / "d")
        root = config.parent
        assert main(["run", str(config)]) == 0

        manifest = json.loads((root / "results" / "manifest.json").read_text())
        assert len(manifest["records"]) == 42
        assert all(r["status"] == "enrolled" and Path(r["signature_path"]).is_file() for r in manifest["records"])
        assert len(manifest["config_hash"]) == 64
        assert set(manifest["records"][0]["timings_ms"]) == {"load", "pose", "lifting", "signature", "write"}
        assert (root / "results" / "pose_grid.txt").read_text().count("\n") == 4
        summary = json.loads((root / "results" / "summary.json").read_text())
        assert summary["rank1"] == summary["cmc"][0]
        assert set(summary["splits"]) == {"mean", "std", "values"}

        enrolled = read_data_list(root / "results" / "gallery.csv")
        assert all(r["signature_path"].endswith(".sig") for r in enrolled)

        first = sig_bytes(root / "signatures")
        assert len(first) == 42
        assert main(["run", str(config)]) == 0
        assert sig_bytes(root / "signatures") == first

    def test_worker_count_does_not_change_results(self, dataset, tmp_path, monkeypatch):
        a = copy_dataset(dataset, tmp_path / "a")
        b = copy_dataset(dataset, tmp_path / "b")
        monkeypatch.setenv("UR_WORKERS", "1")
        assert main(["run", str(a)]) == 0
        monkeypatch.setenv("UR_WORKERS", "2")
        assert main(["run", str(b)]) == 0
        strip = lambda recs, root: [{k: str(v).replace(str(root), "") for k, v in r.items()} for r in recs]
        assert strip(manifest_without_timings(a.parent / "results"), a.parent) == strip(
            manifest_without_timings(b.parent / "results"), b.parent
        )
        assert sig_bytes(a.parent / "signatures") == sig_bytes(b.parent / "signatures")

    def test_unreadable_image_is_isolated(self, dataset, tmp_path, monkeypatch):
        monkeypatch.delenv("UR_WORKERS", raising=False)
        config = copy_dataset(dataset, tmp_path / "d")
        root = config.parent
        victim = root / "images" / "s001_p+30_y-60.png"
        victim.write_bytes(b"not a png")
        stale = root / "signatures" / "probe_p+30_y-60" / "s001_p+30_y-60.sig"
        stale.parent.mkdir(parents=True)
        stale.write_bytes(b"stale")
        assert main(["run", str(config)]) == 1
        manifest = json.loads((root / "results" / "manifest.json").read_text())
        failed = [r for r in manifest["records"] if r["status"] != "enrolled"]
        assert [r["id"] for r in failed] == ["s001_p+30_y-60"]
        assert failed[0]["status"].startswith("failed(")
        assert not stale.exists()
        assert len(sig_bytes(root / "signatures")) == 41
        assert not list((root / "signatures").rglob("*.tmp"))

    def test_config_errors_abort(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", str(bad)]) == EXIT_CONFIG
        assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def _sig(preset, k, flags):
    feats = np.zeros((k, 1024))
    feats[np.arange(k), np.arange(k)] = flags
    return Signature(preset, feats, flags * 1.0, flags.astype(bool), 0.5)


class TestMatch:
    def test_self(self, tmp_path, capsys):
        _sig(Preset.PRFS_64, 64, np.ones(64)).save(tmp_path / "a.sig")
        assert main(["match", str(tmp_path / "a.sig"), str(tmp_path / "a.sig")]) == 0
        assert capsys.readouterr().out.strip() == "1.000000"

    def test_preset_mismatch(self, tmp_path, capsys):
        _sig(Preset.PRFS_64, 64, np.ones(64)).save(tmp_path / "a.sig")
        _sig(Preset.DPRFS_8, 8, np.ones(8)).save(tmp_path / "b.sig")
        assert main(["match", str(tmp_path / "a.sig"), str(tmp_path / "b.sig")]) == EXIT_SHAPE_MISMATCH
        assert capsys.readouterr().out == ""

    def test_disjoint(self, tmp_path, capsys):
        half = np.arange(8) < 4
        _sig(Preset.DPRFS_8, 8, half).save(tmp_path / "a.sig")
        _sig(Preset.DPRFS_8, 8, ~half).save(tmp_path / "b.sig")
        assert main(["match", str(tmp_path / "a.sig"), str(tmp_path / "b.sig")]) == EXIT_NO_OVERLAP
        assert capsys.readouterr().out.strip() == "NA"


class TestEvalAndSynth:
    def test_synth_then_eval(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("UR_WORKERS", raising=False)
        out = tmp_path / "syn"
        assert main(["synth", "--n", "2", "--seed", "4", "--out", str(out), "--size", "64"]) == 0
        printed = capsys.readouterr().out.splitlines()
        assert len(printed) == 21 and printed[-1].endswith("config.json")
        assert main(["run", str(out / "config.json")]) == 0
        capsys.readouterr()
        code = main([
            "eval",
            "--scores", str(out / "results" / "scores_probe_p+0_y+30.csv"),
            "--gallery", str(out / "sigsets" / "gallery.csv"),
            "--probes", str(out / "sigsets" / "probe_p+0_y+30.csv"),
        ])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        per_set = json.loads((out / "results" / "summary.json").read_text())["per_sigset"]["probe_p+0_y+30"]
        assert summary["rank1"] == per_set["rank1"]
        assert summary["cmc"] == per_set["cmc"]

    def test_synth_needs_two(self, tmp_path):
        assert main(["synth", "--n", "1", "--out", str(tmp_path / "x")]) != 0
        assert not (tmp_path / "x").exists()
