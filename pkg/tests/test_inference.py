import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from charprop.boxes import BBox, iou
from charprop.inference import (
    Proposal,
    PyramidConfig,
    build_pyramid,
    decode_responses,
    generate_proposals,
    nms,
    nms_indices,
    pyramid_scales,
    read_proposals_csv,
    write_proposals_csv,
)
from charprop.network import HeadOutput, builtin_spec, init_model
from charprop.templates import TemplateSet

TEMPLATES = TemplateSet((0.5, 1.0, 2.0), (29, 29))


def brute_force_nms(boxes, scores, thr):
    """Quadratic reference: visit in score order, keep if no kept box overlaps too much."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(BBox(*boxes[i]), BBox(*boxes[j])) <= thr for j in kept):
            kept.append(i)
    return kept


def random_proposals(rng, n):
    xy = rng.uniform(0, 100, (n, 2))
    wh = rng.uniform(5, 40, (n, 2))
    # coarse score grid forces ties
    return np.hstack([xy, wh]), rng.integers(0, 20, n) / 20.0


def pixel_centre(box):
    """Centre in pixel-index terms: a box starting at 0 with width 29 is centred on pixel 14."""
    return (box.x + (box.w - 1) / 2, box.y + (box.h - 1) / 2)


def head_with(probs_fg, k=4, regress=None):
    """HeadOutput whose softmax gives the supplied foreground probabilities."""
    probs_fg = np.asarray(probs_fg, dtype=np.float64)
    h, w = probs_fg.shape[1:]
    bg = 1.0 - probs_fg.sum(axis=0, keepdims=True)
    logits = np.log(np.concatenate([probs_fg, bg]).clip(1e-300))[None]
    if regress is None:
        regress = np.zeros((1, 4 * k, h, w))
    return HeadOutput(logits, regress)


class TestPyramid:
    def test_halving_example(self):
        assert pyramid_scales(116, 116, PyramidConfig(ratio=0.5), (29, 29)) == [1, 0.5, 0.25]

    def test_exact_receptive_field(self):
        assert pyramid_scales(29, 29, PyramidConfig(), (29, 29)) == [1.0]

    def test_levels_shrink(self, rng):
        img = rng.integers(0, 256, (116, 90, 3), dtype=np.uint8)
        levels = build_pyramid(img, PyramidConfig(ratio=0.5), (29, 29))
        assert [lv.shape[:2] for lv, _ in levels] == [(116, 90), (58, 45)]
        assert levels[0][0] is img

    def test_too_small(self):
        with pytest.raises(ValueError):
            build_pyramid(np.zeros((20, 40, 3), np.uint8), PyramidConfig(), (29, 29))

    def test_num_scales_cap(self):
        assert len(pyramid_scales(500, 500, PyramidConfig(ratio=0.5, num_scales=2), (29, 29))) == 2

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            PyramidConfig(ratio=1.5)


class TestDecode:
    def test_unit_centres(self):
        fg = np.zeros((3, 6, 4))
        fg[1, 0, 0] = 0.9
        fg[1, 5, 3] = 0.9
        props = decode_responses(head_with(fg), 4, (29, 29), TEMPLATES, 0.5)
        assert sorted(pixel_centre(p.box) for p in props) == [(14, 14), (26, 34)]
        assert all(p.box.w == 29 and p.box.h == 29 and p.template == 2 for p in props)

    def test_template_size(self):
        fg = np.zeros((3, 1, 1))
        fg[0, 0, 0] = 0.8
        (p,) = decode_responses(head_with(fg), 4, (29, 29), TEMPLATES, 0.5)
        assert (p.box.w, p.box.h) == (14.5, 29)
        assert pixel_centre(p.box) == (14, 14)
        assert p.score == pytest.approx(0.8)

    def test_threshold_one_is_empty(self):
        fg = np.zeros((3, 2, 2))
        fg[0] = 1.0
        assert decode_responses(head_with(fg), 4, (29, 29), TEMPLATES, 1.0) == []

    def test_background_never_proposed(self):
        fg = np.zeros((3, 2, 2))
        assert decode_responses(head_with(fg), 4, (29, 29), TEMPLATES, 0.5) == []

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_threshold_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        fg = np.random.default_rng(0).dirichlet(np.ones(4), size=(5, 5)).transpose(2, 0, 1)[:3]
        n_lo = len(decode_responses(head_with(fg), 4, (29, 29), TEMPLATES, lo))
        n_hi = len(decode_responses(head_with(fg), 4, (29, 29), TEMPLATES, hi))
        assert n_hi <= n_lo


class TestNMS:
    def test_identical_boxes(self):
        a = Proposal(BBox(0, 0, 10, 10), 0.9, 1)
        b = Proposal(BBox(0, 0, 10, 10), 0.8, 1)
        assert nms([b, a], 0.5) == [a]

    def test_tie_keeps_first(self):
        a = Proposal(BBox(0, 0, 10, 10), 0.9, 1)
        b = Proposal(BBox(0, 0, 10, 10), 0.9, 2)
        assert nms([a, b], 0.5) == [a]

    def test_disjoint_all_kept(self):
        props = [Proposal(BBox(20 * i, 0, 10, 10), 0.1 * i, 1) for i in range(5)]
        assert nms(props, 0.5) == props[::-1]

    def test_threshold_is_inclusive_keep(self):
        a = Proposal(BBox(0, 0, 10, 10), 0.9, 1)
        b = Proposal(BBox(5, 0, 10, 10), 0.8, 1)  # IoU exactly 1/3
        assert nms([a, b], 1 / 3) == [a, b]

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        boxes, scores = random_proposals(rng, 50)
        for thr in (0.3, 0.5, 0.7):
            assert nms_indices(boxes, scores, thr).tolist() == brute_force_nms(boxes, scores, thr)

    def test_empty(self):
        assert nms([], 0.5) == []


class TestGenerate:
    @pytest.fixture
    def model(self):
        return init_model(builtin_spec("CPN-ENG", 4, width=0.05), 0, "he", TEMPLATES)

    def test_uniform_head(self, rng):
        model = init_model(builtin_spec("CPN-ENG", 4, width=0.05), 0, 0.0, TEMPLATES)
        img = rng.integers(0, 256, (60, 70, 3), dtype=np.uint8)
        props = generate_proposals(model, img, PyramidConfig(score_threshold=0.2, nms_iou=1.0))
        assert props and all(p.score == pytest.approx(0.25) for p in props)
        assert generate_proposals(model, img, PyramidConfig(score_threshold=0.26)) == []

    def test_scale_mapping(self, monkeypatch, rng):
        """A box found on the half-size level is doubled in the output."""
        import charprop.inference as inf

        model = init_model(builtin_spec("CPN-ENG", 4, width=0.05), 0, 0.0, TEMPLATES)

        def fake_forward(m, level):
            h, w = level.shape[:2]
            fg = np.zeros((3, (h - 29) // 4 + 1, (w - 29) // 4 + 1))
            if h == 58:
                fg[1, 0, 0] = 0.9
            return head_with(fg)

        monkeypatch.setattr(inf, "forward_full", fake_forward)
        img = rng.integers(0, 256, (116, 116, 3), dtype=np.uint8)
        (p,) = generate_proposals(model, img, PyramidConfig(ratio=0.5, score_threshold=0.5))
        # unit (0, 0) on the 58x58 level is the box (0, 0, 29, 29) there
        assert tuple(p.box) == pytest.approx((0, 0, 58, 58))
        assert p.scale == 0.5

    def test_regression_shifts_box(self, monkeypatch):
        import charprop.inference as inf

        model = init_model(builtin_spec("CPN-ENG", 4, width=0.05), 0, 0.0, TEMPLATES)
        reg = np.zeros((1, 16, 1, 1))
        reg[0, 4:8, 0, 0] = (0.1, 0.2, 0.0, math.log(2))
        fg = np.zeros((3, 1, 1))
        fg[1] = 0.9
        monkeypatch.setattr(inf, "forward_full", lambda m, level: head_with(fg, regress=reg))
        (p,) = generate_proposals(model, np.zeros((29, 29, 3), np.uint8), PyramidConfig())
        assert tuple(p.box) == pytest.approx((2.9, 5.8, 29, 58))

    def test_budget_and_order(self, model, rng):
        img = rng.integers(0, 256, (90, 120, 3), dtype=np.uint8)
        props = generate_proposals(model, img, PyramidConfig(score_threshold=0.0, max_proposals=7))
        assert len(props) <= 7
        scores = [p.score for p in props]
        assert scores == sorted(scores, reverse=True)

    def test_threads_match_serial(self, model, rng, monkeypatch):
        img = rng.integers(0, 256, (90, 120, 3), dtype=np.uint8)
        conf = PyramidConfig(score_threshold=0.1)
        serial = generate_proposals(model, img, conf)
        monkeypatch.setenv("CHARPROP_THREADS", "3")
        assert generate_proposals(model, img, conf) == serial


class TestCSV:
    def test_round_trip(self, tmp_path):
        props = {
            "a.png": [Proposal(BBox(1.5, 2, 10, 20), 0.987654321, 2, 0.5)],
            "b.png": [Proposal(BBox(0, 0, 1, 1), 0.5, 1, 1.0), Proposal(BBox(3, 3, 4, 4), 0.25, 3, 1.0)],
        }
        path = tmp_path / "p.csv"
        write_proposals_csv(path, props)
        assert path.read_text().splitlines()[0] == "image_id,x,y,w,h,score,template,scale"
        back = read_proposals_csv(path)
        assert back["a.png"][0].score == 0.987654
        assert back["a.png"][0].box == BBox(1.5, 2, 10, 20)
        assert [p.template for p in back["b.png"]] == [1, 3]

    def test_minimal_columns(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("img,1,2,3,4,0.5\n")
        (p,) = read_proposals_csv(path)["img"]
        assert p.template == 0 and p.scale == 1.0

    def test_short_row(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("img,1,2,3\n")
        with pytest.raises(ValueError, match=":1:"):
            read_proposals_csv(path)
