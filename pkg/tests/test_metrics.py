import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cosalign.metrics import CSV_HEADER, ConfusionMatrix, MetricsLog, miou, read_metrics_csv


def hand_matrix():
    return ConfusionMatrix(2).accumulate(np.array([1, 1, 2, 2]), np.array([1, 2, 2, 2]))


class TestConfusionMatrix:
    def test_perfect_is_diagonal(self):
        y = np.array([[1, 2], [3, 3]])
        cm = ConfusionMatrix(3).accumulate(y, y)
        assert not (cm.counts - np.diag(np.diag(cm.counts))).any()

    def test_ignore_only(self):
        cm = ConfusionMatrix(3).accumulate(np.ones((2, 2), int), np.zeros((2, 2), int))
        assert cm.total == 0

    def test_hand_count(self):
        np.testing.assert_array_equal(hand_matrix().counts, [[1, 0], [1, 2]])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.array([3]), np.array([1]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.ones(3, int), np.ones(4, int))

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_order_independent(self, seed):
        rng = np.random.default_rng(seed)
        pairs = [(rng.integers(1, 4, 10), rng.integers(0, 4, 10)) for _ in range(4)]
        a, b = ConfusionMatrix(3), ConfusionMatrix(3)
        for p, g in pairs:
            a.accumulate(p, g)
        for p, g in reversed(pairs):
            b.accumulate(p, g)
        np.testing.assert_array_equal(a.counts, b.counts)
        merged = ConfusionMatrix(3)
        for p, g in pairs:
            merged.merge(ConfusionMatrix(3).accumulate(p, g))
        np.testing.assert_array_equal(merged.counts, a.counts)


class TestMiou:
    def test_perfect(self):
        y = np.array([1, 2, 3])
        per_class, mean = miou(ConfusionMatrix(3).accumulate(y, y))
        assert per_class == [1.0, 1.0, 1.0] and mean == 1.0

    def test_hand_values(self):
        per_class, mean = miou(hand_matrix())
        assert per_class == pytest.approx([1 / 2, 2 / 3])
        assert mean == pytest.approx(7 / 12)

    def test_subset(self):
        assert miou(hand_matrix(), [1])[1] == pytest.approx(0.5)

    def test_empty_subset(self):
        with pytest.raises(ValueError):
            miou(hand_matrix(), [])

    def test_empty_matrix(self):
        with pytest.raises(ValueError):
            miou(ConfusionMatrix(2))

    def test_zero_union_excluded(self):
        cm = ConfusionMatrix(3).accumulate(np.array([1, 2]), np.array([1, 2]))
        per_class, mean = miou(cm)
        assert math.isnan(per_class[2]) and mean == 1.0

    @given(st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariant_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        pred, gt = rng.integers(1, 5, 40), rng.integers(0, 5, 40)
        gt[0] = 1
        perm = rng.permutation(40)
        a = miou(ConfusionMatrix(4).accumulate(pred, gt))
        b = miou(ConfusionMatrix(4).accumulate(pred[perm], gt[perm]))
        assert a[1] == b[1]
        assert all(0.0 <= v <= 1.0 for v in a[0] if not math.isnan(v))


class TestMetricsLog:
    def test_csv_and_jsonl(self, tmp_path):
        log = MetricsLog(tmp_path / "m.csv", tmp_path / "m.jsonl")
        log.append(0, [0.5, float("nan")], 0.5, {"seg": float("nan"), "cos": float("nan"), "adv": float("nan")})
        log.append(10, [0.25, 0.75], 0.5, {"seg": 1.5, "cos": 0.25, "adv": 0.0})
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == CSV_HEADER == "iter,miou,loss_seg,loss_cos,loss_adv"
        assert lines[2] == "10,0.500000,1.500000,0.250000,0.000000"
        records = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert records[0]["iou"] == [0.5, None]
        assert read_metrics_csv(tmp_path / "m.csv")[1]["loss_seg"] == 1.5

    def test_keep_until(self, tmp_path):
        log = MetricsLog(tmp_path / "m.csv", tmp_path / "m.jsonl")
        for it in (0, 5, 10):
            log.append(it, [1.0], 1.0, {"seg": 1.0, "cos": 0.0, "adv": 0.0})
        resumed = MetricsLog(tmp_path / "m.csv", tmp_path / "m.jsonl", keep_until=5)
        assert [r.split(",")[0] for r in resumed.rows] == ["0", "5"]
        assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 2

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n")
        with pytest.raises(ValueError):
            read_metrics_csv(tmp_path / "m.csv")
