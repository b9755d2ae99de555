import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ffkit.errors import FrameMismatch
from ffkit.geometry import Box3D
from ffkit.metrics import (
    GroundTruth,
    MatchConfig,
    MetricsReport,
    ScoredBox,
    clip_convex,
    distance_error,
    evaluate,
    format_table,
    interpolated_ap,
    iou_3d,
    iou_bev,
    orientation_error,
    polygon_area,
)

from oracles import detection_case, mc_iou, random_box, reference_ap

coords = st.floats(-20, 20)
dims = st.floats(0.2, 6)
yaw = st.floats(-7, 7)
box_st = st.builds(Box3D, coords, st.floats(-2, 2), coords, dims, dims, dims, yaw)


class TestIoU:
    def test_offset_cubes(self):
        a = Box3D(0, 0, 0, 1, 1, 1)
        b = Box3D(0.5, 0, 0, 1, 1, 1)
        assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)
        assert iou_bev(a, b) == pytest.approx(1 / 3, abs=1e-12)

    def test_vertical_offset_only_changes_3d(self):
        a = Box3D(0, 0, 0, 2, 2, 2)
        b = Box3D(0, 1, 0, 2, 2, 2)
        assert iou_bev(a, b) == 1.0
        assert iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)

    def test_square_and_its_45_degree_turn(self):
        a = Box3D(0, 0, 0, 1, 1, 1)
        b = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
        octagon = 2 * (math.sqrt(2) - 1)
        assert iou_bev(a, b) == pytest.approx(octagon / (2 - octagon), abs=1e-12)

    def test_disjoint(self):
        assert iou_3d(Box3D(0, 0, 0, 1, 1, 1), Box3D(5, 0, 0, 1, 1, 1)) == 0.0

    def test_clip_and_area(self):
        sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
        shifted = sq + 1
        assert polygon_area(clip_convex(sq, shifted)) == pytest.approx(1.0)

    @given(box_st, box_st)
    def test_symmetric_and_bounded(self, a, b):
        for f in (iou_3d, iou_bev):
            v = f(a, b)
            assert 0.0 <= v <= 1.0
            assert v == f(b, a)

    @given(box_st)
    def test_self_iou(self, a):
        assert iou_3d(a, a) == 1.0 and iou_bev(a, a) == 1.0

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(12):
            a = random_box(rng)
            b = random_box(rng, near=a)
            assert abs(iou_3d(a, b) - mc_iou(a, b, 200_000, rng)) < 1e-2
            assert abs(iou_bev(a, b) - mc_iou(a, b, 200_000, rng, bev=True)) < 1e-2


class TestErrors:
    @pytest.mark.parametrize(
        "pred, gt, want",
        [(36.356, 36.426, 0.070), (36.098, 36.426, 0.328)],
    )
    def test_range_values(self, pred, gt, want):
        assert round(distance_error(pred, gt), 3) == want

    @pytest.mark.parametrize(
        "pred, gt, want",
        [(1.784, 1.875, 0.091), (-3.107, 0.122, 3.054)],
    )
    def test_orientation_values(self, pred, gt, want):
        assert round(orientation_error(pred, gt), 3) == want

    def test_zero(self):
        b = Box3D(1, 2, 30, 1, 1, 1, 0.4)
        assert distance_error(b, b) == 0.0 and orientation_error(0.4, 0.4) == 0.0

    def test_center_mode(self):
        a, b = Box3D(0, 0, 10, 1, 1, 1), Box3D(3, 0, 14, 1, 1, 1)
        assert distance_error(a, b, mode="center") == pytest.approx(5.0)
        assert distance_error(a, b) == pytest.approx(4.0 + (math.hypot(3, 14) - 14.0), abs=1e-12)

    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_orientation_wrap_invariant(self, p, g):
        e = orientation_error(p, g)
        assert 0.0 <= e <= math.pi
        assert abs(orientation_error(p + 2 * math.pi, g) - e) < 1e-12
        assert abs(orientation_error(p, g - 2 * math.pi) - e) < 1e-12


class TestAP:
    def test_perfect(self):
        rng = np.random.default_rng(3)
        gts = {"0": [GroundTruth(random_box(rng)) for _ in range(3)], "1": [GroundTruth(random_box(rng, "People"))]}
        dets = {f: [ScoredBox(g.box, 0.9) for g in v] for f, v in gts.items()}
        rep = evaluate(dets, gts)
        for m in rep.per_class.values():
            assert m.ap_3d == 1.0 and m.ap_bev == 1.0
            assert m.mean_distance_error == 0.0 and m.mean_orientation_error == 0.0

    def test_no_detections(self):
        gts = {"0": [GroundTruth(Box3D(0, 0, 10, 4, 2, 1.5, 0, "Car"))]}
        rep = evaluate({}, gts)
        car = rep.to_dict()["per_class"]["Car"]
        assert car["ap_3d"] == 0.0 and "mean_distance_error" not in car

    def test_nothing_at_all_is_flagged(self):
        rep = evaluate({}, {"0": []}, classes=["Car"])
        assert rep.per_class["Car"].ap_undefined and rep.per_class["Car"].ap_3d == 0.0

    def test_frame_mismatch(self):
        with pytest.raises(FrameMismatch):
            evaluate({"9": []}, {"0": []})

    def test_hand_worked_curve(self):
        # ranked hits T F T with 3 gt: precisions 1, 1/2, 2/3 at recalls 1/3, 1/3, 2/3
        tp = np.array([True, False, True])
        grid = np.arange(1, 41) / 40
        want = (13 * 1.0 + 13 * (2 / 3)) / 40
        assert interpolated_ap(tp, 3, grid) == pytest.approx(want, abs=1e-15)

    def test_eleven_point(self):
        tp = np.array([True, False, True])
        grid = MatchConfig(recall_points=11).recall_grid()
        # recall 0.0..0.3 -> 1.0, 0.4..0.6 -> 2/3, rest 0
        assert interpolated_ap(tp, 3, grid) == pytest.approx((4 + 3 * 2 / 3) / 11, abs=1e-15)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        cfg = MatchConfig(thresholds={"Car": 0.5, "People": 0.3})
        for _ in range(60):
            dets, gts = detection_case(rng, int(rng.integers(0, 11)), int(rng.integers(0, 6)))
            rep = evaluate(dets, gts, cfg, classes=["Car", "People"])
            for c in ("Car", "People"):
                thr = cfg.threshold(c)
                assert rep.per_class[c].ap_3d == reference_ap(dets, gts, c, thr, iou_3d, cfg.recall_grid())
                assert rep.per_class[c].ap_bev == reference_ap(dets, gts, c, thr, iou_bev, cfg.recall_grid())

    @given(st.integers(0, 2**32 - 1))
    def test_top_ranked_true_positive_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = detection_case(rng, int(rng.integers(0, 8)), int(rng.integers(0, 5)), classes=("Car",))
        cfg = MatchConfig(thresholds={"Car": 0.5})
        before = evaluate(dets, gts, cfg, classes=["Car"]).per_class["Car"].ap_3d
        extra = Box3D(500, 0, 500, 4, 2, 1.5, 0.0, "Car")
        gts["000000"].append(GroundTruth(extra))
        dets["000000"].append(ScoredBox(extra, 2.0))
        after = evaluate(dets, gts, cfg, classes=["Car"]).per_class["Car"].ap_3d
        assert after >= before

    def test_ignored_ground_truth(self):
        a = Box3D(0, 0, 10, 4, 2, 1.5, 0, "Car")
        b = Box3D(8, 0, 10, 4, 2, 1.5, 0, "Car")
        gts = {"0": [GroundTruth(a, occluded=0), GroundTruth(b, occluded=3)]}
        dets = {"0": [ScoredBox(a, 0.9), ScoredBox(b, 0.8)]}
        strat = evaluate(dets, gts, MatchConfig(max_occlusion=2)).per_class["Car"]
        assert strat.n_gt == 1 and strat.ap_3d == 1.0 and strat.fp == 0

    def test_report_round_trip_and_table(self):
        rng = np.random.default_rng(1)
        dets, gts = detection_case(rng, 6, 4)
        rep = evaluate(dets, gts)
        again = MetricsReport.from_dict(rep.to_dict())
        assert again.to_json() == rep.to_json()
        table = format_table(rep)
        assert "3D AP (%)" in table and "Orientation error (rad)" in table
