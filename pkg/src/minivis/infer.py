"""Per-video inference: detect, divide, attend, blend, and associate.

Runs the model frame by frame, builds one instance mask per surviving
detection from its own sub-region grid, links detections into tracklets via
the predicted movement field, and assembles per-identity tracks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .backbone import frames_to_tensor
from .config import InferConfig, ModelConfig
from .detection import Detection, decode_detections
from .mask_head import InstanceMask, blend, divide_box, generate_base_masks, predict_attention
from .model import VisModel
from .tracking import Tracklet, associate, read_movement


@dataclass
class TrackResult:
    track_id: int
    class_id: int
    score: float  # mean of per-frame detection scores
    masks: List[Optional[np.ndarray]]  # per frame, at the mask stride
    centers: List[Optional[Tuple[float, float]]]
    mask_stride: int


def run_video(
    model: VisModel,
    frames: np.ndarray,
    infer_cfg: InferConfig,
    return_skipped: bool = False,
):
    """Full pipeline over one video's (T, H, W, 3) frames -> list of TrackResult."""
    cfg: ModelConfig = model.cfg
    t_total, h, w = frames.shape[0], frames.shape[1], frames.shape[2]
    stride = cfg.mask_stride

    was_training = model.training
    model.eval()
    tracklets: List[Tracklet] = []
    per_track: Dict[int, dict] = {}
    skipped_masks = 0

    with torch.no_grad():
        prev_out = None
        for t in range(t_total):
            out = model(frames_to_tensor(frames[t : t + 1]))
            dets = decode_detections(
                out.det, infer_cfg.score_threshold, infer_cfg.nms_iou, infer_cfg.top_k, image_size=(h, w)
            )
            if t > 0:
                field = model.movement_field(out, prev_out)
                disps = [read_movement(field, d.level, d.grid_index) for d in dets]
            else:
                disps = [np.zeros(2) for _ in dets]
            ids = associate(
                dets,
                disps,
                tracklets,
                t,
                radius_source=infer_cfg.match_radius_source,
                max_age=infer_cfg.tracklet_max_age,
            )

            for det, track_id in zip(dets, ids):
                entry = per_track.setdefault(
                    track_id,
                    {
                        "class_id": det.class_id,
                        "scores": [],
                        "masks": [None] * t_total,
                        "centers": [None] * t_total,
                    },
                )
                entry["scores"].append(det.score)
                entry["centers"][t] = det.o
                mask = _instance_mask(model, out, det, stride)
                if mask is None:
                    skipped_masks += 1
                else:
                    entry["masks"][t] = mask.binary
            prev_out = out

    if was_training:
        model.train()

    results = []
    for track_id in sorted(per_track):
        entry = per_track[track_id]
        if not any(m is not None and m.any() for m in entry["masks"]):
            continue
        results.append(
            TrackResult(
                track_id=track_id,
                class_id=entry["class_id"],
                score=float(np.mean(entry["scores"])),
                masks=entry["masks"],
                centers=entry["centers"],
                mask_stride=stride,
            )
        )
    if return_skipped:
        return results, skipped_masks
    return results


def _instance_mask(model: VisModel, out, det: Detection, stride: int) -> Optional[InstanceMask]:
    cfg = model.cfg
    try:
        grid = divide_box(det.box, unit=cfg.division_unit, cap=cfg.division_cap)
    except ValueError:
        return None
    bases = generate_base_masks(
        model.mask_conv, out.base_features, det.box, grid, stride, precomputed=out.base_pre
    )
    if bases is None:
        return None
    scores = predict_attention(out.att[det.level], det.grid_index, grid, cfg.division_cap, det.level)
    return blend(scores, bases, grid)


def upsample_mask(mask: np.ndarray, stride: int, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor upsample of a mask-stride mask to the frame size."""
    h, w = size
    up = np.repeat(np.repeat(mask, stride, axis=0), stride, axis=1)
    return up[:h, :w]
