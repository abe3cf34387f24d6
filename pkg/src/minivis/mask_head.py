"""Sub-region mask prediction: box division, attention scores, base masks,
and the blender that combines them into an instance mask.

A detection's box is divided into r1 x r2 cells (r = min(cap,
ceil(extent / unit))). A shared attention tower emits one score channel per
cell of the canonical cap x cap grid; a shared trunk over P3-P5 produces a
cap^2-channel feature map F at the mask stride. Per instance, F is zeroed
outside the box, passed through a shared 1x1 convolution, and the channels
matching the instance's cells become its base masks. The blender applies
sigmoid(score * base) per pixel, each cell's score active only inside its
own cell, so segmentation happens independently per sub-region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LEVELS, STRIDES, ModelConfig


@dataclass
class SubRegionGrid:
    r1: int  # columns
    r2: int  # rows
    cells: List[Tuple[int, int, int, int]]  # row-major (x0, y0, x1, y1) pixel rects
    box: Tuple[float, float, float, float]
    col_edges: np.ndarray  # (r1 + 1,) ints
    row_edges: np.ndarray  # (r2 + 1,) ints

    @property
    def num_cells(self) -> int:
        return self.r1 * self.r2


@dataclass
class AttentionScores:
    values: torch.Tensor  # (r1 * r2,), row-major cell order
    level: str
    grid_index: Tuple[int, int]


@dataclass
class BaseMasks:
    maps: torch.Tensor  # (r1 * r2, Hm, Wm) raw conv outputs
    stride: int
    footprint: Tuple[int, int, int, int]  # (i0, i1, j0, j1) at mask stride


@dataclass
class InstanceMask:
    soft: np.ndarray  # (Hm, Wm) float64 in [0, 1]
    binary: np.ndarray  # (Hm, Wm) bool, soft > 0.5
    stride: int
    box: Tuple[float, float, float, float]


def _edges(start: int, total: int, parts: int) -> np.ndarray:
    """Integer edges splitting `total` pixels into `parts`; last part absorbs
    the rounding remainder."""
    base = total // parts
    widths = [base] * (parts - 1) + [total - base * (parts - 1)]
    return start + np.concatenate(([0], np.cumsum(widths)))


def divide_box(box, unit: float = 10.0, cap: int = 6) -> SubRegionGrid:
    """Divide a box into its r1 x r2 sub-region grid of pixel rectangles."""
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = x1 - x0, y1 - y0
    if w < 1.0 or h < 1.0:
        raise ValueError(f"degenerate box (w={w}, h={h}); needs at least 1px per side")
    r1 = min(cap, math.ceil(w / unit))
    r2 = min(cap, math.ceil(h / unit))
    fx0, fx1 = math.floor(x0), math.ceil(x1)
    fy0, fy1 = math.floor(y0), math.ceil(y1)
    col_edges = _edges(fx0, fx1 - fx0, r1)
    row_edges = _edges(fy0, fy1 - fy0, r2)
    cells = [
        (int(col_edges[p]), int(row_edges[q]), int(col_edges[p + 1]), int(row_edges[q + 1]))
        for q in range(r2)
        for p in range(r1)
    ]
    return SubRegionGrid(r1=r1, r2=r2, cells=cells, box=(x0, y0, x1, y1), col_edges=col_edges, row_edges=row_edges)


def select_channels(cap: int, r1: int, r2: int) -> np.ndarray:
    """Canonical-grid channel indices (q * cap + p for q < r2, p < r1), row-major."""
    q, p = np.mgrid[0:r2, 0:r1]
    return (q * cap + p).reshape(-1)


def stride_footprint(
    box, stride: int, height: int, width: int
) -> Optional[Tuple[int, int, int, int]]:
    """Half-open (i0, i1, j0, j1) index rectangle covering the box at a stride,
    clipped to the map; None if empty."""
    x0, y0, x1, y1 = box
    j0 = max(0, math.floor(x0 / stride))
    j1 = min(width, math.ceil(x1 / stride))
    i0 = max(0, math.floor(y0 / stride))
    i1 = min(height, math.ceil(y1 / stride))
    if i1 <= i0 or j1 <= j0:
        return None
    return (i0, i1, j0, j1)


def cell_index_map(grid: SubRegionGrid, footprint: Tuple[int, int, int, int], stride: int) -> np.ndarray:
    """Row-major cell index of every mask-stride pixel in the footprint.

    A pixel belongs to the cell containing its image-plane center, clamped to
    the border cells for footprint pixels whose center overhangs the box.
    """
    i0, i1, j0, j1 = footprint
    xs = stride * (np.arange(j0, j1) + 0.5)
    ys = stride * (np.arange(i0, i1) + 0.5)
    cols = np.clip(np.searchsorted(grid.col_edges, xs, side="right") - 1, 0, grid.r1 - 1)
    rows = np.clip(np.searchsorted(grid.row_edges, ys, side="right") - 1, 0, grid.r2 - 1)
    return rows[:, None] * grid.r1 + cols[None, :]


class AttentionTower(nn.Module):
    """Two 3x3 convs shared across P3-P7, emitting cap^2 score channels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.feat_channels
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, cfg.num_bases, 3, padding=1)
        nn.init.normal_(self.conv2.weight, std=0.01)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, pyramid: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
        return {level: self.conv2(F.silu(self.conv1(pyramid[level]))) for level in LEVELS}


def predict_attention(
    att_map: torch.Tensor, grid_index: Tuple[int, int], grid: SubRegionGrid, cap: int, level: str, batch_index: int = 0
) -> AttentionScores:
    """Read one detection's r1*r2 attention scores from a level's score map."""
    sel = select_channels(cap, grid.r1, grid.r2)
    i, j = grid_index
    values = att_map[batch_index, :, i, j][torch.as_tensor(sel, dtype=torch.long)]
    return AttentionScores(values=values, level=level, grid_index=(int(i), int(j)))


class BaseFeatureNet(nn.Module):
    """Shared trunk producing the cap^2-channel base feature map F.

    Deeper levels are bilinearly upsampled to P3 resolution, concatenated,
    passed through two 3x3 convs and a 1x1 channel reduction, then upsampled
    by the configured factor (1, 2, or 4; factor 4 gives stride-2 features).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.levels = cfg.base_levels()
        self.upsample_factor = cfg.upsample_factor
        cin = cfg.feat_channels * len(self.levels)
        ct = cfg.trunk_channels
        self.conv1 = nn.Conv2d(cin, ct, 3, padding=1)
        self.conv2 = nn.Conv2d(ct, ct, 3, padding=1)
        self.reduce = nn.Conv2d(ct, cfg.num_bases, 1)

    def forward(self, pyramid: Dict[str, torch.Tensor]) -> torch.Tensor:
        ref = pyramid[self.levels[0]]
        feats = [ref]
        for level in self.levels[1:]:
            feats.append(
                F.interpolate(pyramid[level], size=ref.shape[-2:], mode="bilinear", align_corners=False)
            )
        x = torch.cat(feats, dim=1) if len(feats) > 1 else feats[0]
        x = F.silu(self.conv1(x))
        x = F.silu(self.conv2(x))
        x = self.reduce(x)
        if self.upsample_factor > 1:
            x = F.interpolate(x, scale_factor=self.upsample_factor, mode="bilinear", align_corners=False)
        return x


def generate_base_masks(
    mask_conv: nn.Conv2d,
    base_features: torch.Tensor,
    box,
    grid: SubRegionGrid,
    stride: int,
    batch_index: int = 0,
    precomputed: Optional[torch.Tensor] = None,
) -> Optional[BaseMasks]:
    """Apply the shared 1x1 conv to box-zeroed features and select cell channels.

    Zeroing commutes with the 1x1 convolution, so the no-bias response is
    computed once per frame (`precomputed`) and masked per instance; outside
    the box each map equals the channel bias exactly. Returns None when the
    box covers no pixel at the mask stride.
    """
    f = base_features[batch_index]
    _, hm, wm = f.shape
    fp = stride_footprint(box, stride, hm, wm)
    if fp is None:
        return None
    if precomputed is None:
        precomputed = F.conv2d(base_features, mask_conv.weight)[batch_index]
    else:
        precomputed = precomputed[batch_index] if precomputed.ndim == 4 else precomputed
    sel = torch.as_tensor(select_channels(int(math.isqrt(mask_conv.out_channels)), grid.r1, grid.r2), dtype=torch.long)
    bias = mask_conv.bias[sel]
    i0, i1, j0, j1 = fp
    maps = bias[:, None, None].expand(len(sel), hm, wm).clone()
    maps[:, i0:i1, j0:j1] = precomputed[sel, i0:i1, j0:j1] + bias[:, None, None]
    return BaseMasks(maps=maps, stride=stride, footprint=fp)


def blend(scores: AttentionScores, bases: BaseMasks, grid: SubRegionGrid) -> InstanceMask:
    """sigmoid(score_cell * base_cell) inside the box footprint, 0 outside.

    The sigmoid is evaluated in float64 so thresholding at 0.5 is stable.
    """
    i0, i1, j0, j1 = bases.footprint
    cell_map = cell_index_map(grid, bases.footprint, bases.stride)
    maps = bases.maps.detach().to(torch.float64).cpu().numpy()
    values = scores.values.detach().to(torch.float64).cpu().numpy()
    hh, ww = i1 - i0, j1 - j0
    rows = np.arange(hh)[:, None]
    cols = np.arange(ww)[None, :]
    crop = maps[:, i0:i1, j0:j1]
    logits = values[cell_map] * crop[cell_map, rows, cols]
    soft = np.zeros(maps.shape[1:], dtype=np.float64)
    soft[i0:i1, j0:j1] = 1.0 / (1.0 + np.exp(-logits))
    return InstanceMask(soft=soft, binary=soft > 0.5, stride=bases.stride, box=grid.box)


def rasterize_at_stride(mask: np.ndarray, stride: int) -> np.ndarray:
    """Sample a full-resolution bool mask at mask-stride pixel centers."""
    if stride == 1:
        return mask.astype(bool)
    h, w = mask.shape
    hm, wm = h // stride, w // stride
    rows = np.minimum(np.arange(hm) * stride + stride // 2, h - 1)
    cols = np.minimum(np.arange(wm) * stride + stride // 2, w - 1)
    return mask[np.ix_(rows, cols)].astype(bool)


@dataclass
class MaskSample:
    """One positive location's mask logits over its instance's footprint."""

    logits: torch.Tensor  # (hh, ww)
    gt: torch.Tensor  # (hh, ww) float 0/1


def mask_logits_for_instance(
    scores: torch.Tensor,
    base_crop: torch.Tensor,
    cell_map: np.ndarray,
) -> torch.Tensor:
    """Per-pixel blend logits: scores[cell] * base[cell, pixel] over a footprint crop."""
    idx = torch.as_tensor(cell_map, dtype=torch.long, device=base_crop.device)
    hh, ww = idx.shape
    rows = torch.arange(hh, device=base_crop.device)[:, None].expand(hh, ww)
    cols = torch.arange(ww, device=base_crop.device)[None, :].expand(hh, ww)
    return scores[idx] * base_crop[idx, rows, cols]


def mask_loss(samples: Sequence[MaskSample]) -> torch.Tensor:
    """Mean per-pixel BCE over each sample's footprint, averaged over samples."""
    if not samples:
        return torch.zeros(())
    terms = [
        F.binary_cross_entropy_with_logits(s.logits, s.gt.to(s.logits.dtype), reduction="mean")
        for s in samples
    ]
    return torch.stack(terms).mean()
