"""Tolerance-based detection scoring: per-class AP, mAP, average-mAP.

A detection is a true positive at tolerance ``delta`` if an unmatched
same-class ground-truth action lies within ``delta`` seconds. Matching is
greedy in confidence order (ties: earlier time first), each detection claiming
the closest available ground truth (ties toward the earlier one), each ground
truth matched at most once per tolerance.

AP uses all-points interpolation (precision at each recall level is the
maximum precision at that recall or beyond). mAP averages over classes with at
least one ground-truth action; average-mAP averages mAP over the tolerance
set. The standard set is 5,10,...,60 seconds; the tight set is 1..5 seconds.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .postprocess import Detection
from .util import atomic_write_text

STANDARD_DELTAS = tuple(float(d) for d in range(5, 61, 5))
TIGHT_DELTAS = tuple(float(d) for d in range(1, 6))


@dataclass
class ToleranceSet:
    name: str
    deltas_s: tuple[float, ...]

    def __post_init__(self):
        self.deltas_s = tuple(float(d) for d in self.deltas_s)
        if not self.deltas_s or any(d <= 0 for d in self.deltas_s):
            raise ValueError("tolerances must be positive")
        if list(self.deltas_s) != sorted(self.deltas_s):
            raise ValueError("tolerances must be sorted ascending")

    @classmethod
    def standard(cls):
        return cls("standard", STANDARD_DELTAS)

    @classmethod
    def tight(cls):
        return cls("tight", TIGHT_DELTAS)

    @classmethod
    def preset(cls, name: str):
        if name not in ("standard", "tight"):
            raise ValueError(f"unknown tolerance preset {name!r}")
        return cls.standard() if name == "standard" else cls.tight()


@dataclass
class MatchResult:
    """Per-detection outcome in rank order, plus per-class ground-truth counts."""

    order: list[int]  # indices into the input detection list, best rank first
    is_tp: list[bool]
    matched_gt: list[int | None]  # index into the ground-truth list, or None
    num_gt_per_class: dict[int, int] = field(default_factory=dict)


def match_detections(dets: list[Detection], gt: list[tuple[float, int]], delta_s: float) -> MatchResult:
    """Greedily match one video's detections against ground truth at ``delta_s``."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].time_s, dets[i].class_k))
    taken = [False] * len(gt)
    is_tp: list[bool] = []
    matched: list[int | None] = []
    for i in order:
        det = dets[i]
        best = None
        best_key = None
        for j, (gt_time, gt_class) in enumerate(gt):
            if taken[j] or gt_class != det.class_k:
                continue
            dist = abs(det.time_s - gt_time)
            if dist > delta_s:
                continue
            key = (dist, gt_time)  # closest first, earlier ground truth on ties
            if best_key is None or key < best_key:
                best, best_key = j, key
        if best is None:
            is_tp.append(False)
            matched.append(None)
        else:
            taken[best] = True
            is_tp.append(True)
            matched.append(best)
    counts: dict[int, int] = {}
    for _, k in gt:
        counts[k] = counts.get(k, 0) + 1
    return MatchResult(order, is_tp, matched, counts)


def average_precision(tp_flags, num_gt: int) -> float:
    """All-points interpolated AP from rank-ordered TP/FP flags."""
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp_flags, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / num_gt
    precision = cum_tp / (cum_tp + cum_fp)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * interp))


@dataclass
class EvalResult:
    set_name: str
    deltas_s: tuple[float, ...]
    ap_per_delta: list[dict[int, float]]  # one {class: AP} per tolerance
    map_per_delta: list[float]
    average_map: float
    num_gt_per_class: dict[int, int]


def average_map(
    dets_by_video: dict[str, list[Detection]],
    gt_by_video: dict[str, list[tuple[float, int]]],
    tolerances: ToleranceSet,
    num_classes: int,
) -> EvalResult:
    """Score pooled detections: per-tolerance mAP and their average.

    Detections of one class are ranked together across videos but matched
    within their own video. Classes without ground truth are skipped.
    """
    num_gt: dict[int, int] = {k: 0 for k in range(num_classes)}
    for events in gt_by_video.values():
        for _, k in events:
            if not 0 <= k < num_classes:
                raise ValueError(f"ground-truth class {k} outside [0, {num_classes})")
            num_gt[k] += 1
    scored_classes = [k for k in range(num_classes) if num_gt[k] > 0]
    if not scored_classes:
        raise ValueError("no ground-truth actions in any class; mAP is undefined")

    videos = sorted(set(dets_by_video) | set(gt_by_video))
    ap_per_delta: list[dict[int, float]] = []
    map_per_delta: list[float] = []
    for delta in tolerances.deltas_s:
        pooled: dict[int, list[tuple[float, float, str, bool]]] = {k: [] for k in scored_classes}
        for video_id in videos:
            dets = dets_by_video.get(video_id, [])
            result = match_detections(dets, gt_by_video.get(video_id, []), delta)
            for rank, i in enumerate(result.order):
                det = dets[i]
                if det.class_k in pooled:
                    pooled[det.class_k].append(
                        (det.confidence, det.time_s, video_id, result.is_tp[rank])
                    )
        aps: dict[int, float] = {}
        for k in scored_classes:
            rows = sorted(pooled[k], key=lambda r: (-r[0], r[1], r[2]))
            aps[k] = average_precision([r[3] for r in rows], num_gt[k])
        ap_per_delta.append(aps)
        map_per_delta.append(float(np.mean([aps[k] for k in scored_classes])))
    return EvalResult(
        set_name=tolerances.name,
        deltas_s=tolerances.deltas_s,
        ap_per_delta=ap_per_delta,
        map_per_delta=map_per_delta,
        average_map=float(np.mean(map_per_delta)),
        num_gt_per_class=num_gt,
    )


def write_results_csv(path, results: list[EvalResult], class_names) -> None:
    """Rows: (delta_s, class, AP) and (delta_s, ALL, mAP), then one
    (AVERAGE, set_name, value) row per tolerance set."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["delta_s", "class", "value"])
    for result in results:
        for delta, aps, map_value in zip(result.deltas_s, result.ap_per_delta, result.map_per_delta):
            for k in sorted(aps):
                writer.writerow([f"{delta:g}", class_names[k], f"{aps[k]:.9f}"])
            writer.writerow([f"{delta:g}", "ALL", f"{map_value:.9f}"])
    for result in results:
        writer.writerow(["AVERAGE", result.set_name, f"{result.average_map:.9f}"])
    atomic_write_text(path, buf.getvalue())
