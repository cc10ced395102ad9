import csv
import math

import numpy as np
import pytest

from densespot.evaluation import (
    STANDARD_DELTAS,
    TIGHT_DELTAS,
    EvalResult,
    ToleranceSet,
    average_map,
    average_precision,
    match_detections,
    write_results_csv,
)
from densespot.postprocess import Detection
from _oracles import ap_reference, match_reference, scorer_reference


def det(time_s, k, conf):
    return Detection(time_s, k, conf)


def random_case(rng, max_videos=2, max_dets=8, max_gt=6, num_classes=3, span=60.0):
    dets_by_video = {}
    gt_by_video = {}
    for v in range(int(rng.integers(1, max_videos + 1))):
        vid = f"v{v}"
        dets_by_video[vid] = [
            det(float(rng.uniform(0, span)), int(rng.integers(0, num_classes)), float(rng.random()))
            for _ in range(int(rng.integers(0, max_dets + 1)))
        ]
        gt_by_video[vid] = [
            (float(rng.uniform(0, span)), int(rng.integers(0, num_classes)))
            for _ in range(int(rng.integers(0, max_gt + 1)))
        ]
    total_gt = sum(len(g) for g in gt_by_video.values())
    return dets_by_video, gt_by_video, total_gt


class TestToleranceSets:
    def test_presets(self):
        assert ToleranceSet.standard().deltas_s == tuple(range(5, 61, 5))
        assert ToleranceSet.tight().deltas_s == (1.0, 2.0, 3.0, 4.0, 5.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            ToleranceSet("bad", (5.0, 1.0))
        with pytest.raises(ValueError):
            ToleranceSet("bad", (-1.0,))


class TestMatching:
    def test_basic_tp_fp(self):
        dets = [det(9.0, 0, 0.9), det(29.0, 0, 0.8), det(50.0, 0, 0.7)]
        gt = [(10.0, 0), (30.0, 0)]
        result = match_detections(dets, gt, 5.0)
        assert result.order == [0, 1, 2]
        assert result.is_tp == [True, True, False]
        assert result.num_gt_per_class == {0: 2}

    def test_single_match_rule(self):
        dets = [det(10.0, 0, 0.9), det(11.0, 0, 0.8)]
        result = match_detections(dets, [(10.5, 0)], 5.0)
        assert result.is_tp == [True, False]

    def test_claims_closest_ground_truth(self):
        dets = [det(12.0, 0, 0.9), det(10.0, 0, 0.8)]
        result = match_detections(dets, [(10.0, 0), (13.0, 0)], 5.0)
        # 0.9 detection is closest to 13.0, leaving 10.0 for the second
        assert result.is_tp == [True, True]
        assert result.matched_gt == [1, 0]

    def test_class_must_match(self):
        result = match_detections([det(10.0, 1, 0.9)], [(10.0, 0)], 5.0)
        assert result.is_tp == [False]

    def test_confidence_tie_earlier_time_first(self):
        dets = [det(20.0, 0, 0.5), det(10.0, 0, 0.5)]
        result = match_detections(dets, [(15.0, 0)], 10.0)
        assert result.order == [1, 0]
        assert result.is_tp == [True, False]

    def test_matches_independent_reimplementation(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            dets_by_video, gt_by_video, _ = random_case(rng, max_videos=1)
            dets = dets_by_video["v0"]
            gt = gt_by_video["v0"]
            delta = float(rng.uniform(1.0, 20.0))
            got = match_detections(dets, gt, delta)
            order, flags = match_reference(
                [(d.time_s, d.class_k, d.confidence) for d in dets], gt, delta
            )
            assert got.order == order
            assert got.is_tp == flags


class TestAveragePrecision:
    def test_hand_case(self):
        # ranked [TP, FP, TP] with two ground truths: (1.0 + 2/3) / 2
        assert math.isclose(average_precision([True, False, True], 2), 0.833333333, rel_tol=1e-6)

    def test_perfect_detections(self):
        assert average_precision([True, True, True], 3) == 1.0

    def test_single_false_positive(self):
        assert average_precision([False], 1) == 0.0

    def test_no_detections(self):
        assert average_precision([], 4) == 0.0

    def test_matches_reference_walk(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            n = int(rng.integers(0, 12))
            flags = (rng.random(n) < 0.5).tolist()
            num_gt = int(rng.integers(max(1, sum(flags)), sum(flags) + 5))
            got = average_precision(flags, num_gt)
            want = ap_reference(flags, num_gt)
            assert math.isclose(got, want, rel_tol=1e-9, abs_tol=1e-12)


class TestAverageMap:
    def test_exact_predictions_score_one(self):
        gt = {"v": [(10.0, 0), (30.0, 1)]}
        dets = {"v": [det(10.0, 0, 1.0), det(30.0, 1, 1.0)]}
        result = average_map(dets, gt, ToleranceSet.standard(), 2)
        assert result.average_map == 1.0
        assert all(m == 1.0 for m in result.map_per_delta)

    def test_uniform_offset_threshold_structure(self):
        # constant 3 s localization error: zero below delta=3, perfect at/above
        gt = {"v": [(10.0, 0), (30.0, 0)]}
        dets = {"v": [det(13.0, 0, 0.9), det(33.0, 0, 0.8)]}
        result = average_map(dets, gt, ToleranceSet.tight(), 1)
        assert result.map_per_delta[0] == 0.0  # 1 s
        assert result.map_per_delta[1] == 0.0  # 2 s
        assert result.map_per_delta[2] == 1.0  # 3 s inclusive
        assert result.map_per_delta[4] == 1.0

    def test_empty_ground_truth_rejected(self):
        with pytest.raises(ValueError, match="undefined"):
            average_map({"v": [det(1.0, 0, 0.5)]}, {"v": []}, ToleranceSet.tight(), 2)

    def test_class_without_gt_skipped(self):
        gt = {"v": [(10.0, 0)]}
        dets = {"v": [det(10.0, 0, 0.9), det(20.0, 1, 0.8)]}
        result = average_map(dets, gt, ToleranceSet.standard(), 2)
        assert set(result.ap_per_delta[0]) == {0}
        assert result.average_map == 1.0

    def test_matches_reference_scorer(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            dets_by_video, gt_by_video, total_gt = random_case(rng)
            if total_gt == 0:
                continue
            deltas = sorted(float(rng.uniform(1.0, 25.0)) for _ in range(3))
            result = average_map(dets_by_video, gt_by_video, ToleranceSet("r", tuple(deltas)), 3)
            want_maps, want_avg = scorer_reference(dets_by_video, gt_by_video, deltas, 3)
            np.testing.assert_allclose(result.map_per_delta, want_maps, rtol=1e-9)
            assert math.isclose(result.average_map, want_avg, rel_tol=1e-9)

    def test_monotone_in_tolerance(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            dets_by_video, gt_by_video, total_gt = random_case(rng)
            if total_gt == 0:
                continue
            result = average_map(dets_by_video, gt_by_video, ToleranceSet.standard(), 3)
            for a, b in zip(result.map_per_delta, result.map_per_delta[1:]):
                assert a <= b + 1e-12

    def test_confidence_scale_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            dets_by_video, gt_by_video, total_gt = random_case(rng)
            if total_gt == 0:
                continue
            scaled = {
                vid: [det(d.time_s, d.class_k, d.confidence * 0.125) for d in dets]
                for vid, dets in dets_by_video.items()
            }
            a = average_map(dets_by_video, gt_by_video, ToleranceSet.tight(), 3)
            b = average_map(scaled, gt_by_video, ToleranceSet.tight(), 3)
            np.testing.assert_allclose(a.map_per_delta, b.map_per_delta, rtol=1e-12)

    def test_duplicate_detection_never_raises_ap(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            dets_by_video, gt_by_video, total_gt = random_case(rng, max_videos=1)
            if total_gt == 0 or not dets_by_video["v0"]:
                continue
            base = average_map(dets_by_video, gt_by_video, ToleranceSet.tight(), 3)
            first = dets_by_video["v0"][0]
            dup = {"v0": dets_by_video["v0"] + [det(first.time_s, first.class_k, first.confidence * 0.9)]}
            dupped = average_map(dup, gt_by_video, ToleranceSet.tight(), 3)
            for a, b in zip(dupped.map_per_delta, base.map_per_delta):
                assert a <= b + 1e-12

    def test_tight_never_exceeds_standard(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            dets_by_video, gt_by_video, total_gt = random_case(rng)
            if total_gt == 0:
                continue
            tight = average_map(dets_by_video, gt_by_video, ToleranceSet.tight(), 3)
            standard = average_map(dets_by_video, gt_by_video, ToleranceSet.standard(), 3)
            assert tight.average_map <= standard.average_map + 1e-12


class TestResultsCsv:
    def test_both_presets_emit_two_average_rows(self, tmp_path):
        gt = {"v": [(10.0, 0), (30.0, 1)]}
        dets = {"v": [det(10.0, 0, 0.9), det(33.0, 1, 0.8)]}
        results = [
            average_map(dets, gt, ToleranceSet.standard(), 2),
            average_map(dets, gt, ToleranceSet.tight(), 2),
        ]
        path = tmp_path / "results.csv"
        write_results_csv(path, results, ["goal", "card"])
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["delta_s", "class", "value"]
        average_rows = [r for r in rows if r[0] == "AVERAGE"]
        assert [(r[1], float(r[2])) for r in average_rows] == [
            ("standard", pytest.approx(results[0].average_map, abs=1e-8)),
            ("tight", pytest.approx(results[1].average_map, abs=1e-8)),
        ]

    def test_rescoring_map_rows_reproduces_average(self, tmp_path):
        rng = np.random.default_rng(7)
        dets_by_video, gt_by_video, total_gt = random_case(rng)
        while total_gt == 0:
            dets_by_video, gt_by_video, total_gt = random_case(rng)
        result = average_map(dets_by_video, gt_by_video, ToleranceSet.standard(), 3)
        path = tmp_path / "results.csv"
        write_results_csv(path, [result], ["a", "b", "c"])
        with open(path) as f:
            rows = list(csv.reader(f))[1:]
        map_rows = [float(r[2]) for r in rows if r[1] == "ALL"]
        assert len(map_rows) == len(STANDARD_DELTAS)
        avg_row = [r for r in rows if r[0] == "AVERAGE"][0]
        # independent checker: the AVERAGE row is the mean of the mAP rows
        assert math.isclose(float(avg_row[2]), float(np.mean(map_rows)), abs_tol=1e-8)
        # and the per-class rows at each delta average to the mAP row
        for delta, want in zip(result.deltas_s, result.map_per_delta):
            class_rows = [float(r[2]) for r in rows if r[0] == f"{delta:g}" and r[1] != "ALL"]
            assert math.isclose(float(np.mean(class_rows)), want, abs_tol=1e-8)
