"""Data model, label/feature file ingestion, chunk sampling, synthetic benchmark.

The unit of work is a whole-video :class:`FeatureSequence` (a ``T_total x P``
matrix at ``feature_rate_hz`` vectors per second) paired with an
:class:`ActionSet` of ground-truth ``(anchor_index, class)`` events. Training
consumes fixed-length chunks sampled from these.

File formats
------------
Labels: a single JSON document mapping ``video_id`` to a list of records
``{"label": str, "position": int milliseconds, "half": optional int}``. When
``"half"`` is present the half is treated as a separate video with suffix
``"_1"`` / ``"_2"``. Unknown record fields are ignored.

Features: flat binary, header of three little-endian uint64 (magic
``0x44535046``, ``T_total``, ``P``) followed by row-major little-endian
float32 data. Files ending in ``.csv`` are read as ``T_total`` rows x ``P``
comma-separated columns instead (for tiny tests).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .util import atomic_write_bytes, round_half_away

FEATURE_MAGIC = 0x44535046
_HEADER = struct.Struct("<QQQ")


def seconds_to_anchor(time_s, rate_hz):
    """Convert seconds to an anchor index (half-away-from-zero rounding)."""
    return round_half_away(np.asarray(time_s, dtype=np.float64) * rate_hz).astype(np.int64)


@dataclass
class FeatureSequence:
    """Whole-video features: ``[T_total x P]`` plus the extraction rate."""

    features: np.ndarray
    feature_rate_hz: float
    video_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError(f"features must be a [T x P] matrix with T,P >= 1, got shape {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError(f"non-finite feature values in {self.video_id!r}")
        if not self.feature_rate_hz > 0:
            raise ValueError(f"feature_rate_hz must be positive, got {self.feature_rate_hz}")

    @property
    def num_anchors(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class ActionSet:
    """Ground-truth actions as ``(anchor_index, class_index)`` pairs.

    Duplicates collapse to one; pairs are kept sorted by ``(t, k)`` so that
    downstream nearest-action tie-breaking is deterministic.
    """

    actions: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        cleaned = sorted({(int(t), int(k)) for t, k in self.actions})
        for t, k in cleaned:
            if t < 0 or k < 0:
                raise ValueError(f"negative action coordinate ({t}, {k})")
        self.actions = cleaned

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def for_class(self, k: int) -> np.ndarray:
        """Sorted anchor indices of class ``k`` actions."""
        return np.array([t for t, kk in self.actions if kk == k], dtype=np.int64)


@dataclass
class ChunkSpec:
    """Fixed-duration training window; T = round(chunk_len_s * rate)."""

    chunk_len_s: float
    num_classes: int
    feature_rate_hz: float

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.num_anchors < 8:
            raise ValueError(
                f"chunk of {self.chunk_len_s}s at {self.feature_rate_hz}Hz gives "
                f"{self.num_anchors} anchors; need at least 8"
            )

    @property
    def num_anchors(self) -> int:
        return int(round_half_away(self.chunk_len_s * self.feature_rate_hz))


class LabelFileError(ValueError):
    """A label file that does not match the expected schema."""


def _parse_label_records(path):
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise LabelFileError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise LabelFileError(f"{path}: top level must map video_id to a record list")
    for video_id, records in doc.items():
        if not isinstance(records, list):
            raise LabelFileError(f"{path}: entry {video_id!r} is not a list")
        for i, rec in enumerate(records):
            where = f"{path}: video {video_id!r} record {i}"
            if not isinstance(rec, dict) or "label" not in rec or "position" not in rec:
                raise LabelFileError(f"{where}: expected a record with 'label' and 'position'")
            try:
                position_ms = int(rec["position"])
            except (TypeError, ValueError):
                raise LabelFileError(f"{where}: position {rec['position']!r} is not an integer") from None
            vid = video_id if "half" not in rec else f"{video_id}_{int(rec['half'])}"
            yield where, vid, str(rec["label"]), position_ms


def load_labels(path, feature_rate_hz, num_classes, class_map, t_total=None):
    """Load a label file into per-video :class:`ActionSet` (anchor units).

    ``class_map`` maps label strings to class indices in ``[0, num_classes)``.
    ``t_total`` (an int, or a map video_id -> length) enables clipping to
    ``[0, T_total - 1]``; without it only the lower clip at 0 applies.
    """
    out: dict[str, list[tuple[int, int]]] = {}
    for where, vid, label, position_ms in _parse_label_records(path):
        if label not in class_map:
            raise LabelFileError(f"{where}: unknown label {label!r}")
        k = class_map[label]
        if not 0 <= k < num_classes:
            raise LabelFileError(f"{where}: class index {k} outside [0, {num_classes})")
        t = int(seconds_to_anchor(position_ms / 1000.0, feature_rate_hz))
        t = max(t, 0)
        if t_total is not None:
            limit = t_total[vid] if isinstance(t_total, dict) else int(t_total)
            t = min(t, limit - 1)
        out.setdefault(vid, []).append((t, k))
    return {vid: ActionSet(acts) for vid, acts in out.items()}


def load_labels_seconds(path, class_map):
    """Load a label file as per-video ``[(time_s, class_index)]`` ground truth."""
    out: dict[str, list[tuple[float, int]]] = {}
    for where, vid, label, position_ms in _parse_label_records(path):
        if label not in class_map:
            raise LabelFileError(f"{where}: unknown label {label!r}")
        out.setdefault(vid, []).append((position_ms / 1000.0, class_map[label]))
    for events in out.values():
        events.sort()
    return out


def label_names(path):
    """Sorted unique label strings occurring in a label file."""
    return sorted({label for _, _, label, _ in _parse_label_records(path)})


def write_labels(path, events_by_video: dict[str, list[dict]]) -> None:
    """Write the label-file JSON document (sorted keys, atomic)."""
    doc = json.dumps(events_by_video, indent=2, sort_keys=True)
    atomic_write_bytes(path, doc.encode("utf-8"))


def write_features(path, features: np.ndarray) -> None:
    """Write a feature matrix in the flat binary format (atomic)."""
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    header = _HEADER.pack(FEATURE_MAGIC, features.shape[0], features.shape[1])
    atomic_write_bytes(path, header + features.tobytes())


def read_features(path, feature_rate_hz, video_id="") -> FeatureSequence:
    """Read a feature file (binary, or CSV when the path ends in .csv)."""
    spath = str(path)
    if spath.endswith(".csv"):
        mat = np.loadtxt(spath, delimiter=",", dtype=np.float32, ndmin=2)
        return FeatureSequence(mat, feature_rate_hz, video_id)
    with open(spath, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated feature header")
        magic, t_total, p = _HEADER.unpack(head)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic 0x{magic:08X}")
        data = np.fromfile(f, dtype="<f4", count=t_total * p)
    if data.size != t_total * p:
        raise ValueError(f"{path}: expected {t_total * p} values, found {data.size}")
    return FeatureSequence(data.reshape(t_total, p), feature_rate_hz, video_id)


def sample_chunk(seq: FeatureSequence, labels: ActionSet, spec: ChunkSpec, rng, start=None):
    """Sample a training chunk: uniform start, zero-padded tail, re-indexed actions.

    The start index is uniform over ``[0, T_total - 1]``; rows past the end of
    the video are zero. Actions outside the window are dropped, retained ones
    are shifted to chunk-local coordinates.
    """
    t_chunk = spec.num_anchors
    t_total = seq.num_anchors
    if start is None:
        start = int(rng.integers(0, t_total))
    chunk = np.zeros((t_chunk, seq.feature_dim), dtype=np.float32)
    n_real = min(t_chunk, t_total - start)
    chunk[:n_real] = seq.features[start : start + n_real]
    local = [(t - start, k) for t, k in labels if start <= t < start + t_chunk]
    return chunk, ActionSet(local)


@dataclass
class SyntheticSpec:
    """Desk-scale synthetic benchmark: class-template bumps in noise.

    Each class gets one fixed unit-norm template vector (drawn once from the
    seed). Action times follow a per-class Poisson process; the feature matrix
    is i.i.d. Gaussian noise plus a Gaussian time-envelope copy of the class
    template per action.

    The envelope trails the annotated anchor by ``evidence_lag_s``: labels
    mark onsets, observable evidence follows. With the bump dead-centered on
    the label, the pointwise evidence peak IS the label and per-anchor
    confidence alone localizes perfectly, which no real detector enjoys; the
    lag is what makes fine localization require the displacement head rather
    than a confidence argmax.
    """

    num_videos: int = 4
    video_len_s: float = 120.0
    num_classes: int = 3
    actions_per_class_per_min: float = 1.0
    bump_width_s: float = 2.0
    noise_sigma: float = 0.3
    seed: int = 0
    feature_dim: int = 16
    feature_rate_hz: float = 2.0
    evidence_lag_s: float = 1.5

    def __post_init__(self):
        if self.actions_per_class_per_min <= 0 or self.bump_width_s <= 0:
            raise ValueError("rates and widths must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.num_videos < 0 or self.num_classes < 1 or self.feature_dim < 1:
            raise ValueError("bad synthetic spec sizes")
        if self.video_len_s <= 0 or self.feature_rate_hz <= 0:
            raise ValueError("video_len_s and feature_rate_hz must be positive")


def generate_synthetic(spec: SyntheticSpec):
    """Generate ``[(FeatureSequence, ActionSet)]``, deterministic under seed."""
    rng = np.random.default_rng(spec.seed)
    templates = rng.normal(size=(spec.num_classes, spec.feature_dim))
    templates /= np.linalg.norm(templates, axis=1, keepdims=True)
    templates = templates.astype(np.float64)

    t_total = int(round_half_away(spec.video_len_s * spec.feature_rate_hz))
    grid_s = np.arange(t_total, dtype=np.float64) / spec.feature_rate_hz
    videos = []
    for v in range(spec.num_videos):
        actions = []
        feats = rng.normal(0.0, spec.noise_sigma, size=(t_total, spec.feature_dim))
        for k in range(spec.num_classes):
            count = rng.poisson(spec.actions_per_class_per_min * spec.video_len_s / 60.0)
            times = rng.uniform(0.0, spec.video_len_s, size=count)
            idx = np.clip(seconds_to_anchor(times, spec.feature_rate_hz), 0, t_total - 1)
            for t in idx:
                center_s = t / spec.feature_rate_hz + spec.evidence_lag_s
                env = np.exp(-0.5 * ((grid_s - center_s) / spec.bump_width_s) ** 2)
                feats += env[:, None] * templates[k]
                actions.append((int(t), k))
        seq = FeatureSequence(feats.astype(np.float32), spec.feature_rate_hz, f"synth_{v:03d}")
        videos.append((seq, ActionSet(actions)))
    return videos
