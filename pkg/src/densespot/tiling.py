"""Tiled inference: cover a full video with overlapping chunks, stitch outputs.

Each chunk contributes only its valid region, split from its neighbors at the
midpoint of their overlap (central-half cropping at the default 50% overlap;
the first and last chunks extend to the video edges). Raw outputs are cropped
to the valid regions before consolidation; consolidation and NMS then run on
the stitched full-video grid.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import ChunkSpec, FeatureSequence
from .models import SpottingModel
from .postprocess import Detection, PostprocConfig, spot


def plan_tiles(t_total: int, chunk_len: int, stride: int) -> list[tuple[int, int, int]]:
    """``(start, valid_lo, valid_hi)`` per chunk; valid regions partition [0, t_total)."""
    if chunk_len < 1 or t_total < 1:
        raise ValueError("chunk_len and t_total must be >= 1")
    if not 1 <= stride <= chunk_len:
        raise ValueError(f"stride {stride} must lie in [1, chunk_len={chunk_len}]")
    if t_total <= chunk_len:
        return [(0, 0, t_total)]
    starts = [0]
    while starts[-1] + chunk_len < t_total:
        starts.append(min(starts[-1] + stride, t_total - chunk_len))
    bounds = [0]
    for a, b in zip(starts, starts[1:]):
        bounds.append((b + a + chunk_len) // 2)  # midpoint of the overlap
    bounds.append(t_total)
    return [(s, lo, hi) for s, lo, hi in zip(starts, bounds, bounds[1:])]


def infer_grids(model: SpottingModel, seq: FeatureSequence, stride_s: float | None = None):
    """Stitched full-video (conf_logits, disp) grids, each ``[T_total x K]``."""
    cfg = model.config
    chunk_len = cfg.num_anchors
    if seq.feature_dim != cfg.feature_dim:
        raise ValueError(f"{seq.video_id!r}: feature dim {seq.feature_dim} != model {cfg.feature_dim}")
    if stride_s is None:
        stride = max(1, chunk_len // 2)
    else:
        stride = int(round(stride_s * seq.feature_rate_hz))
    t_total = seq.num_anchors
    tiles = plan_tiles(t_total, chunk_len, stride)

    chunks = np.zeros((len(tiles), chunk_len, seq.feature_dim), dtype=np.float32)
    for i, (start, _, _) in enumerate(tiles):
        n_real = min(chunk_len, t_total - start)
        chunks[i, :n_real] = seq.features[start : start + n_real]
    with torch.no_grad():
        out = model(torch.from_numpy(chunks))
    conf = np.empty((t_total, cfg.num_classes), dtype=np.float64)
    disp = np.empty_like(conf)
    for i, (start, lo, hi) in enumerate(tiles):
        conf[lo:hi] = out.conf_logits[i, lo - start : hi - start].numpy()
        disp[lo:hi] = out.disp[i, lo - start : hi - start].numpy()
    return conf, disp


def infer_video(
    conf_model: SpottingModel,
    disp_model: SpottingModel | None,
    seq: FeatureSequence,
    postproc_cfg: PostprocConfig,
    stride_s: float | None = None,
    use_displacements: bool = True,
) -> list[Detection]:
    """Detections for one full video from the two-model composition."""
    conf_logits, _ = infer_grids(conf_model, seq, stride_s)
    disp = None
    if use_displacements:
        if disp_model is None:
            raise ValueError("displacement model required unless use_displacements=False")
        _, disp = infer_grids(disp_model, seq, stride_s)
    return spot(conf_logits, disp, seq.feature_rate_hz, postproc_cfg, use_displacements)
