import json

import numpy as np
import pytest

from helpers import make_dontcare, make_label, planted_eval_fixture
from stereo3dkit.evaluation import (
    EvaluationError,
    ap_r40,
    detection_from_label,
    evaluate_benchmark,
    evaluate_frames,
    format_ap_table,
    match_frame,
)
from stereo3dkit.geometry import Box2D, iou_2d
from stereo3dkit.kitti_io import Difficulty, serialize_labels


def overlap_2d(det, gt):
    return iou_2d(det.box2d, gt.box2d)


def det(box, score, **kw):
    return detection_from_label(make_label(box=box, score=score, **kw))


class TestDetectionFromLabel:
    def test_carries_fields(self):
        d = det((10, 10, 60, 50), 0.75, loc=(1.0, 1.5, 9.0), ry=0.2)
        assert d.class_name == "Car"
        assert d.score == 0.75
        assert d.box3d is not None
        assert np.allclose(d.box3d.center, [1.0, 1.5 - 0.75, 9.0])

    def test_missing_score_rejected(self):
        with pytest.raises(EvaluationError):
            detection_from_label(make_label())

    def test_scored_dontcare_has_no_3d_box(self):
        label = make_dontcare((0, 0, 5, 5))
        label = make_label(class_name="DontCare", box=(0, 0, 5, 5),
                           trunc=-1.0, occ=-1, alpha=-10.0,
                           dims=(-1, -1, -1), loc=(-1000, -1000, -1000),
                           ry=-10.0, score=0.5)
        assert detection_from_label(label).box3d is None


class TestMatchFrame:
    def test_simple_true_positive(self):
        gts = [make_label(box=(0, 0, 10, 10))]
        fm = match_frame([det((0, 0, 10, 10), 0.9)], gts, np.array([False]),
                         overlap_2d, 0.5)
        assert fm.det_tp.tolist() == [True]
        assert fm.gt_matched.tolist() == [True]
        assert fm.det_neutral.tolist() == [False]

    def test_below_threshold_is_fp(self):
        gts = [make_label(box=(0, 0, 10, 10))]
        fm = match_frame([det((6, 0, 16, 10), 0.9)], gts, np.array([False]),
                         overlap_2d, 0.5)
        assert fm.det_tp.tolist() == [False]
        assert fm.gt_matched.tolist() == [False]

    def test_score_order_wins_contested_gt(self):
        # the lower-scored detection overlaps better but arrives second
        gts = [make_label(box=(0, 0, 10, 10))]
        d_hi = det((0, 0, 10, 8), 0.9)
        d_lo = det((0, 1, 10, 10), 0.5)
        fm = match_frame([d_lo, d_hi], gts, np.array([False]), overlap_2d, 0.5)
        assert fm.det_tp.tolist() == [False, True]

    def test_equal_overlap_takes_lowest_gt_index(self):
        gts = [make_label(box=(0, 0, 10, 10)),
               make_label(box=(10, 0, 20, 10))]
        fm = match_frame([det((5, 0, 15, 10), 0.9)], gts,
                         np.array([False, False]), overlap_2d, 0.3)
        assert fm.gt_matched.tolist() == [True, False]

    def test_each_gt_matched_at_most_once(self):
        gts = [make_label(box=(0, 0, 10, 10))]
        fm = match_frame([det((0, 0, 10, 10), 0.9), det((0, 0, 10, 10), 0.8)],
                         gts, np.array([False]), overlap_2d, 0.5)
        assert fm.det_tp.tolist() == [True, False]
        assert fm.det_neutral.tolist() == [False, False]

    def test_ignored_gt_makes_detection_neutral(self):
        gts = [make_label(box=(0, 0, 10, 10)),
               make_label(box=(20, 0, 30, 10))]
        ignored = np.array([True, False])
        fm = match_frame([det((0, 0, 10, 10), 0.9), det((20, 0, 30, 10), 0.8)],
                         gts, ignored, overlap_2d, 0.5)
        assert fm.det_tp.tolist() == [False, True]
        assert fm.det_neutral.tolist() == [True, False]
        assert fm.gt_matched.tolist() == [False, True]

    def test_detection_inside_dontcare_is_neutral(self):
        fm = match_frame([det((2, 2, 8, 8), 0.9)], [], np.zeros(0, bool),
                         overlap_2d, 0.7, dontcare_boxes=[Box2D(0, 0, 10, 10)])
        assert fm.det_neutral.tolist() == [True]
        assert fm.det_tp.tolist() == [False]

    def test_dontcare_containment_uses_det_area_ratio(self):
        # only half the detection lies inside: 0.5 < 0.7 keeps it a FP
        fm = match_frame([det((5, 0, 15, 10), 0.9)], [], np.zeros(0, bool),
                         overlap_2d, 0.7, dontcare_boxes=[Box2D(0, 0, 10, 10)])
        assert fm.det_neutral.tolist() == [False]

    def test_tp_consumes_gt_before_neutral_check(self):
        # a detection that matches a counted gt stays a TP even inside DontCare
        gts = [make_label(box=(2, 2, 8, 8))]
        fm = match_frame([det((2, 2, 8, 8), 0.9)], gts, np.array([False]),
                         overlap_2d, 0.5, dontcare_boxes=[Box2D(0, 0, 10, 10)])
        assert fm.det_tp.tolist() == [True]
        assert fm.det_neutral.tolist() == [False]


class TestApR40:
    def test_worked_three_detections(self):
        # TP at 0.9, FP at 0.8, TP at 0.7 over two gts
        outcomes = [(0.9, True), (0.8, False), (0.7, True)]
        expected = 100.0 * (20.0 + 20.0 * (2.0 / 3.0)) / 40.0
        assert ap_r40(outcomes, 2) == pytest.approx(expected, abs=1e-9)
        assert ap_r40(outcomes, 2) == pytest.approx(83.3333333, abs=1e-6)

    def test_all_recalled_at_full_precision(self):
        outcomes = [(0.9, True), (0.8, True), (0.7, True)]
        assert ap_r40(outcomes, 3) == 100.0

    def test_no_detections(self):
        assert ap_r40([], 5) == 0.0

    def test_all_false(self):
        assert ap_r40([(0.9, False), (0.5, False)], 2) == 0.0

    def test_single_tp_half_recall(self):
        # recall tops out at 1/2: grid points up to 0.5 earn precision 1
        assert ap_r40([(0.9, True)], 2) == pytest.approx(50.0, abs=1e-9)

    def test_equal_scores_form_one_group(self):
        got = ap_r40([(0.5, True), (0.5, False)], 1)
        # single operating point: recall 1, precision 1/2 at every grid point
        assert got == pytest.approx(50.0, abs=1e-9)
        swapped = ap_r40([(0.5, False), (0.5, True)], 1)
        assert swapped == pytest.approx(got, abs=1e-12)

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(6)
        scores = rng.uniform(0, 1, 20)
        flags = rng.random(20) < 0.5
        base = ap_r40(list(zip(scores, flags)), 8)
        moved = ap_r40(list(zip(2.0 * scores + 1.0, flags)), 8)
        assert moved == pytest.approx(base, abs=1e-12)

    def test_later_fp_cannot_help(self):
        base = ap_r40([(0.9, True), (0.8, True)], 3)
        with_fp = ap_r40([(0.9, True), (0.8, True), (0.7, False)], 3)
        assert with_fp <= base + 1e-12

    def test_zero_gt_rejected(self):
        with pytest.raises(ValueError):
            ap_r40([(0.9, True)], 0)


class TestEvaluateFrames:
    def gt_vs_gt(self, frames):
        eval_frames = []
        for gts in frames:
            dets = [detection_from_label(
                make_label(class_name=g.class_name,
                           box=(g.box2d.x1, g.box2d.y1, g.box2d.x2, g.box2d.y2),
                           trunc=max(g.truncation, 0.0), occ=max(g.occlusion, 0),
                           dims=g.dims_hwl, loc=g.location_xyz, ry=g.rotation_y,
                           score=1.0))
                    for g in gts if not g.is_dontcare]
            eval_frames.append((dets, gts))
        return evaluate_frames(eval_frames)

    def random_frames(self, seed, n_frames=12):
        rng = np.random.default_rng(seed)
        classes = ("Car", "Pedestrian", "Cyclist")
        frames = []
        for _ in range(n_frames):
            gts = []
            for _ in range(int(rng.integers(0, 6))):
                x1 = float(rng.uniform(0, 1000))
                y1 = float(rng.uniform(0, 200))
                h = float(rng.uniform(15, 120))
                gts.append(make_label(
                    class_name=classes[int(rng.integers(0, 3))],
                    box=(x1, y1, x1 + h * 0.8, y1 + h),
                    occ=int(rng.integers(0, 4)),
                    trunc=float(rng.uniform(0, 0.6)),
                    loc=(float(rng.uniform(-20, 20)), 1.5,
                         float(rng.uniform(4, 70))),
                    ry=float(rng.uniform(-3, 3))))
            if rng.random() < 0.4:
                x1 = float(rng.uniform(0, 1000))
                gts.append(make_dontcare((x1, 10, x1 + 50, 40)))
            frames.append(gts)
        return frames

    def test_gt_vs_gt_scores_hundred_everywhere(self):
        result = self.gt_vs_gt(self.random_frames(3))
        populated = 0
        for cell in result.cells.values():
            if cell.n_gt == 0:
                assert cell.ap is None
                continue
            populated += 1
            assert cell.ap == pytest.approx(100.0, abs=1e-9)
            assert cell.fn == 0
            assert cell.fp == 0
            assert cell.tp == cell.n_gt
        assert populated > 0

    def test_extra_false_positives_strictly_hurt(self):
        frames = self.random_frames(4)
        base = self.gt_vs_gt(frames)
        eval_frames = []
        for gts in frames:
            dets = [detection_from_label(
                make_label(class_name=g.class_name,
                           box=(g.box2d.x1, g.box2d.y1, g.box2d.x2, g.box2d.y2),
                           trunc=max(g.truncation, 0.0), occ=max(g.occlusion, 0),
                           dims=g.dims_hwl, loc=g.location_xyz, ry=g.rotation_y,
                           score=0.9))
                    for g in gts if not g.is_dontcare]
            for i, name in enumerate(("Car", "Pedestrian", "Cyclist")):
                dets.append(det((2000.0 + 100 * i, 500.0, 2080.0 + 100 * i,
                                 600.0), 1.0, class_name=name,
                                loc=(500.0, 1.5, 200.0)))
            eval_frames.append((dets, gts))
        noisy = evaluate_frames(eval_frames)
        for key, cell in base.cells.items():
            if cell.ap is None:
                continue
            assert noisy.cells[key].ap < cell.ap

    def test_planted_fixture_exact_table(self):
        frames, expected = planted_eval_fixture()
        eval_frames = [([detection_from_label(d) for d in dets], gts)
                       for dets, gts in frames]
        result = evaluate_frames(eval_frames, classes=("Car",),
                                 metrics=("2d", "bev", "3d"))
        for metric in ("2d", "bev", "3d"):
            for level in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
                cell = result.cell("Car", level, metric)
                want = expected[level.name]
                assert cell.ap == pytest.approx(want["ap"], abs=1e-9), \
                    (metric, level)
                assert cell.n_gt == want["n_gt"]
                assert cell.tp == want["tp"]
                assert cell.fp == want["fp"]
                assert cell.fn == want["fn"]

    def test_unknown_metric_rejected(self):
        with pytest.raises(ValueError):
            evaluate_frames([], metrics=("iou",))


class TestReporting:
    def test_format_ap_table_renders_dash_for_empty(self):
        result = evaluate_frames([([], [])], classes=("Car",), metrics=("2d",))
        table = format_ap_table(result)
        assert "Car" in table
        assert "-" in table

    def test_format_ap_table_lists_all_classes(self):
        frames, _ = planted_eval_fixture()
        eval_frames = [([detection_from_label(d) for d in dets], gts)
                       for dets, gts in frames]
        result = evaluate_frames(eval_frames)
        table = format_ap_table(result)
        for name in ("Car", "Pedestrian", "Cyclist"):
            assert name in table
        assert "50.00" in table
        assert "54.17" in table

    def test_to_json_dict_round_trips(self):
        frames, expected = planted_eval_fixture()
        eval_frames = [([detection_from_label(d) for d in dets], gts)
                       for dets, gts in frames]
        result = evaluate_frames(eval_frames, classes=("Car",), metrics=("2d",))
        blob = json.loads(json.dumps(result.to_json_dict()))
        assert blob["iou_thresholds"]["Car"] == 0.7
        easy = blob["classes"]["Car"]["2d"]["easy"]
        assert easy["ap"] == pytest.approx(expected["EASY"]["ap"], abs=1e-9)
        assert easy["n_gt"] == 2

    def test_to_json_dict_null_for_empty_cell(self):
        result = evaluate_frames([([], [])], classes=("Car",), metrics=("2d",))
        blob = result.to_json_dict()
        assert blob["classes"]["Car"]["2d"]["easy"]["ap"] is None


class TestEvaluateBenchmark:
    def write(self, d, fid, labels):
        (d / f"{fid}.txt").write_text(serialize_labels(labels))

    def test_directory_evaluation_and_skips(self, tmp_path):
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        gt = make_label(box=(100, 100, 180, 148))
        self.write(gt_dir, "000000", [gt])
        self.write(pred_dir, "000000", [make_label(box=(100, 100, 180, 148),
                                                   score=1.0)])
        self.write(gt_dir, "000001", [gt])                      # gt only
        self.write(pred_dir, "000002", [make_label(score=0.5)])  # pred only
        result, skipped = evaluate_benchmark(pred_dir, gt_dir, classes=("Car",),
                                             metrics=("2d",))
        assert skipped == ["000001", "000002"]
        cell = result.cell("Car", Difficulty.EASY, "2d")
        assert cell.ap == pytest.approx(100.0, abs=1e-9)
        assert cell.n_gt == 1

    def test_no_skips_on_matching_dirs(self, tmp_path):
        pred_dir = tmp_path / "pred"
        gt_dir = tmp_path / "gt"
        pred_dir.mkdir()
        gt_dir.mkdir()
        self.write(gt_dir, "000000", [make_label()])
        self.write(pred_dir, "000000", [make_label(score=0.9)])
        _, skipped = evaluate_benchmark(pred_dir, gt_dir)
        assert skipped == []
