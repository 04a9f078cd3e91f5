import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uvface.errors import EvaluationError
from uvface.evaluation import (
    GRID_PITCHES,
    GRID_YAWS,
    IdentificationResult,
    ProbeResult,
    closed_set,
    cmc,
    pose_grid,
    pose_index,
    rank1,
    split_average,
    write_summary,
)

LABELS = tuple(f"s{i}" for i in range(10))

# Ten per-split Rank-1 values for a VGG-Face baseline, and their average.
VGG_SPLITS = (74.44, 74.26, 70.68, 73.96, 69.60, 72.64, 72.91, 70.03, 72.25, 71.78)
VGG_AVERAGE = 72.25


def probe(truth, ranking, pid="p"):
    return ProbeResult(pid, truth, tuple(ranking))


def random_results(rng, n=100):
    out = []
    for i in range(n):
        order = list(rng.permutation(LABELS))
        out.append(probe(str(rng.choice(LABELS)), order, f"p{i}"))
    return out


rankings = st.lists(
    st.tuples(st.sampled_from(LABELS), st.permutations(LABELS)), min_size=1, max_size=40
).map(lambda xs: [probe(t, r, f"p{i}") for i, (t, r) in enumerate(xs)])


class TestRank1:
    def test_self_identification(self):
        assert rank1([probe(s, (s,) + tuple(x for x in LABELS if x != s)) for s in LABELS]) == 100.0

    def test_rotated_rankings(self):
        res = [probe(s, LABELS[i + 1 :] + LABELS[: i + 1]) for i, s in enumerate(LABELS)]
        assert rank1(res) == 0.0

    def test_three_corrupted_of_twenty(self):
        labels = [f"s{i}" for i in range(20)]
        res = []
        for i, s in enumerate(labels):
            others = [x for x in labels if x != s]
            res.append(probe(s, others[:1] + [s] + others[1:] if i < 3 else [s] + others))
        assert rank1(res) == 85.0

    def test_empty(self):
        with pytest.raises(EvaluationError):
            rank1([])

    def test_empty_ranking(self):
        with pytest.raises(EvaluationError):
            rank1([probe("a", ())])


class TestCMC:
    def test_perfect(self):
        res = [probe(s, (s,) + tuple(x for x in LABELS if x != s)) for s in LABELS]
        assert cmc(res) == [100.0] * 10

    def test_always_rank_two(self):
        res = [probe(s, (LABELS[(i + 1) % 10], s)) for i, s in enumerate(LABELS)]
        assert cmc(res) == [0.0, 100.0]

    def test_counting_oracle(self, rng):
        res = random_results(rng)
        got = cmc(res, 10)
        for r in range(1, 11):
            hits = sum(1 for p in res if p.true_label in p.ranked_labels[:r])
            assert got[r - 1] == pytest.approx(100.0 * hits / len(res))

    def test_clamps_with_warning(self, rng, caplog):
        with caplog.at_level(logging.WARNING):
            assert len(cmc(random_results(rng, 5), 50)) == 10
        assert "clamp" in caplog.text

    @given(rankings)
    def test_rank1_is_first_cmc_entry(self, res):
        curve = cmc(res)
        assert rank1(res) == curve[0]
        assert all(a <= b for a, b in zip(curve, curve[1:]))
        assert curve[-1] == 100.0
        result = IdentificationResult.from_probes(res)
        assert result.rank1_accuracy == result.cmc[0]

    @given(rankings, st.randoms(use_true_random=False))
    def test_rank1_order_invariant(self, res, rnd):
        shuffled = list(res)
        rnd.shuffle(shuffled)
        assert rank1(shuffled) == rank1(res)


def test_closed_set_drops_unknown_subjects(caplog):
    res = [probe("s1", LABELS), probe("stranger", LABELS)]
    with caplog.at_level(logging.WARNING):
        assert closed_set(res, LABELS) == res[:1]
    assert "1 probe" in caplog.text


class TestSplitAverage:
    def test_constant(self):
        mean, std = split_average([78.16] * 10)
        assert mean == pytest.approx(78.16) and std == pytest.approx(0.0, abs=1e-12)

    def test_vgg_row(self):
        mean, _ = split_average(VGG_SPLITS)
        assert abs(mean - VGG_AVERAGE) <= 0.01

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=30))
    def test_two_pass_oracle(self, values):
        mean, std = split_average(values)
        m = sum(values) / len(values)
        s = (sum((v - m) ** 2 for v in values) / len(values)) ** 0.5
        assert mean == pytest.approx(m, abs=1e-9)
        assert std == pytest.approx(s, abs=1e-6)
        assert min(values) - 1e-9 <= mean <= max(values) + 1e-9

    def test_empty(self):
        with pytest.raises(EvaluationError):
            split_average([])


def full_cells(value=100.0):
    return {(p, y): value for p in GRID_PITCHES for y in GRID_YAWS if (p, y) != (0, 0)}


class TestPoseGrid:
    def test_all_hundred(self):
        report = pose_grid(full_cells())
        lines = report.to_text().splitlines()
        assert len(lines) == 4
        assert lines[2].split() == ["+0", "100", "100", "100", "-", "100", "100", "100"]
        assert report.value(0, 0) is None

    def test_missing_cell(self):
        cells = full_cells()
        del cells[(-30, 90)]
        with pytest.raises(EvaluationError, match=r"\(-30,\+90\)"):
            pose_grid(cells)

    def test_bottom_left_cell(self):
        cells = full_cells(50.0)
        cells[(-30, -90)] = 7.0
        report = pose_grid(cells)
        assert report.cells[-1][0] == 7.0
        assert report.to_text().splitlines()[-1].split()[1] == "7"

    def test_pose_numbering(self):
        assert pose_index(-30, -90) == 3
        assert pose_index(0, 0) == 11
        assert pose_index(30, -90) == 1

    def test_out_of_range_value(self):
        cells = full_cells()
        cells[(30, 30)] = 101.0
        with pytest.raises(EvaluationError):
            pose_grid(cells)


def test_summary_json(tmp_path):
    write_summary(tmp_path / "s.json", 90.0, [90.0, 100.0], splits=[80.0, 100.0])
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["rank1"] == 90.0 and data["cmc"] == [90.0, 100.0]
    assert data["splits"]["mean"] == 90.0 and data["splits"]["std"] == 10.0


def test_vgg_average_against_numpy():
    assert np.mean(VGG_SPLITS) == pytest.approx(split_average(VGG_SPLITS)[0])
