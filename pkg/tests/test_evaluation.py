import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charprop.boxes import BBox
from charprop.evaluation import recall, recall_curves, write_curves_csv
from charprop.inference import Proposal


def P(x, y, w, h, s):
    return Proposal(BBox(x, y, w, h), s, 1)


# Five images; the IoU of every proposal with its nearest truth is noted.
FIXTURE_TRUTHS = {
    "img1": [BBox(0, 0, 10, 10), BBox(20, 0, 10, 10)],
    "img2": [BBox(0, 0, 10, 10)],
    "img3": [BBox(0, 0, 20, 10)],
    "img4": [BBox(0, 0, 10, 10), BBox(50, 50, 10, 20)],
    "img5": [BBox(10, 10, 10, 10)],
}
FIXTURE_PROPOSALS = {
    "img1": [P(0, 0, 10, 10, 0.9), P(25, 0, 10, 10, 0.8)],  # 1, 1/3
    "img2": [P(5, 0, 10, 10, 0.5), P(1, 0, 10, 10, 0.4)],  # 1/3, 90/110
    "img4": [P(0, 0, 10, 8, 0.7), P(50, 50, 10, 10, 0.6)],  # 0.8, exactly 0.5
    "img5": [P(12, 12, 8, 8, 0.9), P(10, 10, 10, 10, 0.1)],  # 0.64, 1
}


class TestFixture:
    @pytest.mark.parametrize(
        "thr,top_n,matched",
        [
            (0.5, None, 4),
            (0.5, 1, 3),
            (0.7, None, 4),
            (0.7, 1, 2),
            (0.3, None, 6),
            (0.9, None, 2),
        ],
    )
    def test_hand_computed(self, thr, top_n, matched):
        res = recall(FIXTURE_PROPOSALS, FIXTURE_TRUTHS, thr, top_n)
        assert (res.matched, res.total) == (matched, 7)
        assert res.recall == matched / 7

    def test_threshold_is_strict(self):
        truths = {"a": [BBox(50, 50, 10, 20)]}
        assert recall({"a": [P(50, 50, 10, 10, 1)]}, truths, 0.5).matched == 0
        assert recall({"a": [P(50, 50, 10, 10, 1)]}, truths, 0.49).matched == 1


class TestRecall:
    def test_identical(self):
        truths = {"a": [BBox(0, 0, 5, 5), BBox(9, 9, 3, 4)]}
        props = {"a": [P(*b, 0.5) for b in truths["a"]]}
        assert recall(props, truths, 0.99).recall == 1.0

    def test_empty_proposals(self):
        assert recall({}, {"a": [BBox(0, 0, 5, 5)]}).recall == 0.0

    def test_two_thirds(self):
        truths = {"a": [BBox(0, 0, 10, 10), BBox(30, 0, 10, 10)], "b": [BBox(0, 0, 10, 10)]}
        props = {"a": [P(0, 0, 10, 10, 1)], "b": [P(0, 0, 10, 10, 1)]}
        assert recall(props, truths).recall == pytest.approx(2 / 3)

    def test_duplicates_count_once(self):
        truths = {"a": [BBox(0, 0, 10, 10), BBox(30, 0, 10, 10)]}
        props = {"a": [P(0, 0, 10, 10, 1)] * 5}
        assert recall(props, truths).matched == 1

    def test_one_proposal_can_match_many(self):
        truths = {"a": [BBox(0, 0, 10, 10), BBox(0, 0, 10, 11)]}
        assert recall({"a": [P(0, 0, 10, 10, 1)]}, truths).matched == 2

    def test_ranking_uses_score_not_order(self):
        truths = {"a": [BBox(0, 0, 10, 10)]}
        props = {"a": [P(50, 50, 5, 5, 0.1), P(0, 0, 10, 10, 0.9)]}
        assert recall(props, truths, 0.5, 1).matched == 1

    def test_zero_truths(self):
        with pytest.raises(ValueError):
            recall({}, {"a": []})

    def test_unknown_image(self):
        with pytest.raises(KeyError):
            recall({"zzz": [P(0, 0, 1, 1, 1)]}, {"a": [BBox(0, 0, 1, 1)]})

    def test_any_overlap_at_zero_threshold(self):
        truths = {"a": [BBox(0, 0, 10, 10)]}
        assert recall({"a": [P(9.9, 9.9, 50, 50, 1)]}, truths, 0.0).matched == 1
        assert recall({"a": [P(10, 10, 50, 50, 1)]}, truths, 0.0).matched == 0


boxes = st.builds(
    lambda x, y, w, h: BBox(x, y, w, h),
    st.floats(0, 50), st.floats(0, 50), st.floats(1, 30), st.floats(1, 30),
)


class TestCurves:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(boxes, min_size=1, max_size=6), st.lists(st.tuples(boxes, st.floats(0, 1)), max_size=30))
    def test_monotone(self, truths, props):
        t = {"a": truths}
        p = {"a": [Proposal(b, s, 1) for b, s in props]}
        rows = recall_curves(p, t, fixed_top_n=10)
        by_n = [r.recall for r in rows if r.axis == "proposals"]
        by_iou = [r.recall for r in rows if r.axis == "iou"]
        assert by_n == sorted(by_n)
        assert by_iou == sorted(by_iou, reverse=True)

    def test_fixture_points(self):
        rows = recall_curves(FIXTURE_PROPOSALS, FIXTURE_TRUTHS, top_n_grid=(1, 2), iou_grid=(0.5, 0.7), fixed_top_n=2)
        assert [(r.axis, r.value, r.recall) for r in rows] == [
            ("proposals", 1, 3 / 7),
            ("proposals", 2, 4 / 7),
            ("iou", 0.5, 4 / 7),
            ("iou", 0.7, 4 / 7),
        ]

    def test_csv(self, tmp_path):
        rows = recall_curves(FIXTURE_PROPOSALS, FIXTURE_TRUTHS, top_n_grid=(1,), iou_grid=(0.5,))
        path = tmp_path / "c.csv"
        write_curves_csv(path, rows)
        assert path.read_text().splitlines() == ["axis,value,recall", "proposals,1,0.428571", "iou,0.5,0.571429"]
