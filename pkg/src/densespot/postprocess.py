"""Turn raw per-anchor outputs into detections: consolidation, then NMS.

Consolidation moves each anchor's confidence to the index its predicted
displacement points at (``t - disp``, rounded half away from zero, clipped to
the grid), keeping the maximum on collision; indices nobody points at get 0.
Per-class NMS then repeatedly emits the highest surviving confidence and
suppresses everything within half the suppression window of it.

The detections file is a JSON list of ``{video_id, time_ms, label,
confidence}`` records sorted by video and time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .util import atomic_write_text, round_half_away, sigmoid


@dataclass(frozen=True)
class Detection:
    time_s: float
    class_k: int
    confidence: float


@dataclass
class PostprocConfig:
    nms_window_s: float = 20.0  # total width; suppression radius is half of it
    keep_threshold: float = 0.0

    def __post_init__(self):
        if self.nms_window_s <= 0:
            raise ValueError("nms_window_s must be positive")


def consolidate(conf: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Scatter-max confidences along predicted displacements."""
    conf = np.asarray(conf, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    if conf.shape != disp.shape or conf.ndim != 2:
        raise ValueError(f"conf {conf.shape} and disp {disp.shape} must be matching [T x K]")
    t_total = conf.shape[0]
    grid = np.arange(t_total, dtype=np.float64)[:, None]
    target = np.clip(round_half_away(grid - disp), 0, t_total - 1).astype(np.int64)
    out = np.zeros_like(conf)
    for k in range(conf.shape[1]):
        np.maximum.at(out[:, k], target[:, k], conf[:, k])
    return out


def nms_per_class(conf: np.ndarray, rate_hz: float, cfg: PostprocConfig, time_offset_s: float = 0.0):
    """Greedy per-class suppression; peak ties break toward earlier time."""
    conf = np.asarray(conf, dtype=np.float64)
    radius = cfg.nms_window_s / 2.0 * rate_hz
    grid = np.arange(conf.shape[0])
    detections: list[Detection] = []
    for k in range(conf.shape[1]):
        c = conf[:, k].copy()
        while True:
            t = int(np.argmax(c))  # first occurrence wins ties
            peak = c[t]
            if not peak > cfg.keep_threshold:
                break
            detections.append(Detection(t / rate_hz + time_offset_s, k, float(peak)))
            c[np.abs(grid - t) <= radius] = -np.inf
    detections.sort(key=lambda d: (d.class_k, d.time_s))
    return detections


def spot(conf_logits, disp, rate_hz, cfg: PostprocConfig, use_displacements: bool = True):
    """Logistic -> optional consolidation -> per-class NMS.

    ``use_displacements=False`` skips consolidation entirely (the ablation
    path); the displacement grid may then be None.
    """
    conf = sigmoid(np.asarray(conf_logits, dtype=np.float64))
    if use_displacements:
        conf = consolidate(conf, disp)
    return nms_per_class(conf, rate_hz, cfg)


def write_detections(path, detections_by_video: dict[str, list[Detection]], class_names) -> None:
    records = []
    for video_id in sorted(detections_by_video):
        dets = sorted(detections_by_video[video_id], key=lambda d: (d.time_s, d.class_k))
        for d in dets:
            records.append(
                {
                    "video_id": video_id,
                    "time_ms": int(round_half_away(d.time_s * 1000.0)),
                    "label": class_names[d.class_k],
                    "confidence": d.confidence,
                }
            )
    atomic_write_text(path, json.dumps(records, indent=2))


def load_detections(path, class_map) -> dict[str, list[Detection]]:
    with open(path, "r", encoding="utf-8") as f:
        records = json.load(f)
    out: dict[str, list[Detection]] = {}
    for i, rec in enumerate(records):
        try:
            label = rec["label"]
            if label not in class_map:
                raise ValueError(f"{path}: record {i}: unknown label {label!r}")
            det = Detection(int(rec["time_ms"]) / 1000.0, class_map[label], float(rec["confidence"]))
            out.setdefault(rec["video_id"], []).append(det)
        except (KeyError, TypeError) as e:
            raise ValueError(f"{path}: record {i} malformed: {e}") from e
    return out
