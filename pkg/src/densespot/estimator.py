"""Scikit-learn style front end for the whole pipeline.

``DenseAnchorSpotter.fit(X, y)`` trains the confidence model (mixup + SAM)
and the displacement model (no mixup) on labeled feature sequences;
``predict`` runs tiled inference and post-processing into per-video detection
lists; ``score`` reports the standard average-mAP. ``get_params`` /
``set_params`` / ``clone`` behave as usual for estimators.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import ActionSet, ChunkSpec, FeatureSequence
from .evaluation import ToleranceSet, average_map
from .models import ModelConfig
from .postprocess import PostprocConfig
from .targets import RadiusConfig
from .tiling import infer_video
from .training import OptimConfig, TrainPhase, train


def as_feature_sequences(X, feature_rate_hz: float) -> list[FeatureSequence]:
    """Coerce a list of FeatureSequence or [T x P] arrays; validate rates match."""
    if isinstance(X, (FeatureSequence, np.ndarray)):
        X = [X]
    out = []
    for i, item in enumerate(X):
        if isinstance(item, FeatureSequence):
            if item.feature_rate_hz != feature_rate_hz:
                raise ValueError(
                    f"sequence {item.video_id!r} has rate {item.feature_rate_hz}, "
                    f"estimator expects {feature_rate_hz}"
                )
            seq = item
        else:
            seq = FeatureSequence(np.asarray(item), feature_rate_hz, f"seq_{i:03d}")
        if not seq.video_id:
            seq = FeatureSequence(seq.features, seq.feature_rate_hz, f"seq_{i:03d}")
        out.append(seq)
    if not out:
        raise ValueError("X is empty")
    dims = {seq.feature_dim for seq in out}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")
    return out


def as_action_sets(y) -> list[ActionSet]:
    if isinstance(y, ActionSet):
        y = [y]
    return [item if isinstance(item, ActionSet) else ActionSet(list(item)) for item in y]


class DenseAnchorSpotter(BaseEstimator):
    """Dense-anchor action spotter with two-phase training.

    Parameters mirror the training/inference configuration; ``num_classes``
    is inferred from ``y`` when left as None. ``X`` is a list of
    :class:`FeatureSequence` (or raw ``[T x P]`` arrays at
    ``feature_rate_hz``); ``y`` is a list of :class:`ActionSet` or
    ``(anchor_index, class)`` pair lists, one per sequence.
    """

    def __init__(
        self,
        trunk="unet",
        num_classes=None,
        feature_rate_hz=2.0,
        chunk_len_s=32.0,
        base_width=64,
        unet_levels=None,
        te_layers=None,
        te_embed=None,
        te_heads=None,
        mlp_widths=(256, 64),
        r_c_s=3.0,
        r_d_s=6.0,
        lr=1e-3,
        weight_decay=1e-3,
        sam_rho=0.05,
        mixup_alpha=0.2,
        epochs=50,
        chunks_per_epoch=1024,
        batch_size=32,
        nms_window_s=20.0,
        keep_threshold=0.0,
        stride_s=None,
        use_displacements=True,
        seed=0,
        deterministic=False,
        verbose=False,
    ):
        self.trunk = trunk
        self.num_classes = num_classes
        self.feature_rate_hz = feature_rate_hz
        self.chunk_len_s = chunk_len_s
        self.base_width = base_width
        self.unet_levels = unet_levels
        self.te_layers = te_layers
        self.te_embed = te_embed
        self.te_heads = te_heads
        self.mlp_widths = mlp_widths
        self.r_c_s = r_c_s
        self.r_d_s = r_d_s
        self.lr = lr
        self.weight_decay = weight_decay
        self.sam_rho = sam_rho
        self.mixup_alpha = mixup_alpha
        self.epochs = epochs
        self.chunks_per_epoch = chunks_per_epoch
        self.batch_size = batch_size
        self.nms_window_s = nms_window_s
        self.keep_threshold = keep_threshold
        self.stride_s = stride_s
        self.use_displacements = use_displacements
        self.seed = seed
        self.deterministic = deterministic
        self.verbose = verbose

    def _optim_config(self, mixup_alpha):
        return OptimConfig(
            lr0=self.lr,
            weight_decay0=self.weight_decay,
            sam_rho=self.sam_rho,
            mixup_alpha=mixup_alpha,
            epochs=self.epochs,
            chunks_per_epoch=self.chunks_per_epoch,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def fit(self, X, y):
        sequences = as_feature_sequences(X, self.feature_rate_hz)
        actions = as_action_sets(y)
        if len(sequences) != len(actions):
            raise ValueError(f"{len(sequences)} sequences but {len(actions)} action sets")
        k = self.num_classes
        if k is None:
            seen = [kk for acts in actions for _, kk in acts]
            if not seen:
                raise ValueError("cannot infer num_classes from empty annotations")
            k = max(seen) + 1
        videos = list(zip(sequences, actions))
        chunk_spec = ChunkSpec(self.chunk_len_s, k, self.feature_rate_hz)
        radius = RadiusConfig(self.r_c_s, self.r_d_s, self.feature_rate_hz)
        model_cfg = ModelConfig(
            trunk=self.trunk,
            num_classes=k,
            num_anchors=chunk_spec.num_anchors,
            feature_dim=sequences[0].feature_dim,
            mlp_widths=tuple(self.mlp_widths),
            base_width=self.base_width,
            unet_levels=self.unet_levels,
            te_layers=self.te_layers,
            te_embed=self.te_embed,
            te_heads=self.te_heads,
        )
        log = print if self.verbose else None
        conf_result = train(
            TrainPhase.CONFIDENCE, videos, chunk_spec, radius, model_cfg,
            self._optim_config(self.mixup_alpha),
            deterministic=self.deterministic, log=log,
        )
        disp_result = train(
            TrainPhase.DISPLACEMENT, videos, chunk_spec, radius, model_cfg,
            self._optim_config(0.0),
            deterministic=self.deterministic, log=log,
        )
        self.num_classes_ = k
        self.chunk_spec_ = chunk_spec
        self.radius_ = radius
        self.model_config_ = model_cfg
        self.confidence_model_ = conf_result.model
        self.displacement_model_ = disp_result.model
        self.train_metrics_ = {
            TrainPhase.CONFIDENCE.value: conf_result.metrics,
            TrainPhase.DISPLACEMENT.value: disp_result.metrics,
        }
        return self

    def _check_fitted(self):
        if not hasattr(self, "confidence_model_"):
            raise NotFittedError("this DenseAnchorSpotter instance is not fitted yet")

    def predict(self, X, use_displacements=None):
        """Per-sequence detection lists (time in seconds, class, confidence)."""
        self._check_fitted()
        if use_displacements is None:
            use_displacements = self.use_displacements
        sequences = as_feature_sequences(X, self.feature_rate_hz)
        postproc = PostprocConfig(self.nms_window_s, self.keep_threshold)
        return [
            infer_video(
                self.confidence_model_,
                self.displacement_model_,
                seq,
                postproc,
                stride_s=self.stride_s,
                use_displacements=use_displacements,
            )
            for seq in sequences
        ]

    def score(self, X, y, tolerances: ToleranceSet | None = None) -> float:
        """Average-mAP (fraction in [0, 1]) on the standard tolerance set."""
        self._check_fitted()
        sequences = as_feature_sequences(X, self.feature_rate_hz)
        actions = as_action_sets(y)
        detections = self.predict(X)
        rate = self.feature_rate_hz
        dets_by_video = {seq.video_id: d for seq, d in zip(sequences, detections)}
        gt_by_video = {
            seq.video_id: [(t / rate, k) for t, k in acts]
            for seq, acts in zip(sequences, actions)
        }
        result = average_map(
            dets_by_video, gt_by_video, tolerances or ToleranceSet.standard(), self.num_classes_
        )
        return result.average_map
