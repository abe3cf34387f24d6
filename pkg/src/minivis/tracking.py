"""Center-movement tracking: dense displacement prediction and greedy linking.

The movement head concatenates the centerness-branch features of the current
and previous frame per pyramid level and applies one 1x1 convolution, scaled
by the level stride so predictions are in image pixels. Association walks
detections in score order, backtracks each center by its predicted movement,
and greedily matches the nearest live tracklet within a radius of half the
box perimeter sum ((w + h) / 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import LEVELS, STRIDES
from .detection import Detection


class MovementHead(nn.Module):
    """1x1 conv over concatenated two-frame centerness features, per level."""

    def __init__(self, feat_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * feat_channels, 2, kernel_size=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(
        self,
        reg_feats_t: Dict[str, torch.Tensor],
        reg_feats_prev: Optional[Dict[str, torch.Tensor]],
    ) -> Dict[str, torch.Tensor]:
        """Per level: (B, 2, Hs, Ws) displacement in image pixels.

        With no previous frame (frame 0) the previous features are zeros; the
        resulting field is produced but callers ignore it for association.
        """
        out: Dict[str, torch.Tensor] = {}
        for level in LEVELS:
            cur = reg_feats_t[level]
            prev = reg_feats_prev[level] if reg_feats_prev is not None else torch.zeros_like(cur)
            if prev.shape != cur.shape:
                raise ValueError(
                    f"frame feature shapes differ at {level}: {tuple(cur.shape)} vs {tuple(prev.shape)}"
                )
            out[level] = self.conv(torch.cat([cur, prev], dim=1)) * STRIDES[level]
        return out


def read_movement(
    field: Dict[str, torch.Tensor], level: str, grid_index: Tuple[int, int], batch_index: int = 0
) -> np.ndarray:
    """Displacement vector (dx, dy) at one grid location."""
    i, j = grid_index
    return field[level][batch_index, :, i, j].detach().cpu().numpy().astype(np.float64)


def track_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(1/N) sum of |dx| + |dy| errors over N (pred, target) displacement pairs."""
    if pred.numel() == 0:
        return torch.zeros(())
    return (pred - target.to(pred.dtype)).abs().sum(dim=1).mean()


@dataclass
class Tracklet:
    id: int
    last_center: np.ndarray  # (2,)
    last_box: Tuple[float, float, float, float]
    last_seen: int
    class_id: int
    active: bool = True


def _order(detections: Sequence[Detection]) -> List[int]:
    return sorted(
        range(len(detections)),
        key=lambda k: (
            -detections[k].score,
            LEVELS.index(detections[k].level),
            detections[k].grid_index[0],
            detections[k].grid_index[1],
        ),
    )


def associate(
    detections: Sequence[Detection],
    displacements: Sequence[np.ndarray],
    tracklets: List[Tracklet],
    frame_idx: int,
    radius_source: str = "detection",
    max_age: int = 4,
) -> List[int]:
    """Greedy association; returns one track id per detection and updates
    `tracklets` in place (matched updates, new spawns, stale retirement).

    Detections are processed by descending score (ties broken by level and
    grid index). Each queries the point o - D and matches the nearest live,
    unmatched, same-class tracklet whose last center lies within the radius
    (w + h) / 2 of the chosen box source.
    """
    ids = [-1] * len(detections)
    matched: set = set()
    for k in _order(detections):
        det = detections[k]
        query = np.asarray(det.o, dtype=np.float64) - np.asarray(displacements[k], dtype=np.float64)
        best: Optional[Tracklet] = None
        best_dist = np.inf
        for tr in tracklets:
            if not tr.active or tr.id in matched or tr.class_id != det.class_id:
                continue
            if radius_source == "tracklet":
                bx = tr.last_box
            else:
                bx = det.box
            radius = ((bx[2] - bx[0]) + (bx[3] - bx[1])) / 2.0
            dist = float(np.linalg.norm(query - tr.last_center))
            if dist <= radius and (dist < best_dist or (dist == best_dist and best is not None and tr.id < best.id)):
                best = tr
                best_dist = dist
        if best is None:
            new_id = max((tr.id for tr in tracklets), default=-1) + 1
            best = Tracklet(
                id=new_id,
                last_center=np.asarray(det.o, dtype=np.float64),
                last_box=det.box,
                last_seen=frame_idx,
                class_id=det.class_id,
            )
            tracklets.append(best)
        else:
            best.last_center = np.asarray(det.o, dtype=np.float64)
            best.last_box = det.box
            best.last_seen = frame_idx
        matched.add(best.id)
        ids[k] = best.id
    for tr in tracklets:
        if tr.active and tr.id not in matched and frame_idx - tr.last_seen > max_age:
            tr.active = False
    return ids
