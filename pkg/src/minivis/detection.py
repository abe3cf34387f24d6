"""Anchor-free dense detection: towers, target assignment, losses, decoding.

Every feature location predicts class logits, a centerness logit, and four
side distances (l, t, r, b) in image pixels. A location at stride s and grid
index (i, j) corresponds to the image point (s*(j+0.5), s*(i+0.5)). The box
regression loss is -ln((1+GIoU)/2), whose gradient magnitude 1/(1+GIoU)
exceeds the plain 1-GIoU loss exactly on hard samples (GIoU < 0).
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

GIOU_CLAMP_EPS = 1e-7
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class NumericsError(RuntimeError):
    """Non-finite value in a prediction map."""


@dataclass
class Detection:
    class_id: int
    score: float
    o: Tuple[float, float]  # image point of the source grid location
    box: Tuple[float, float, float, float]
    level: str
    grid_index: Tuple[int, int]  # (row, col)


@dataclass
class LevelTargets:
    cls: np.ndarray  # (Hs, Ws) int64; 0 = background, else class index + 1
    ltrb: np.ndarray  # (4, Hs, Ws) float32, image pixels
    centerness: np.ndarray  # (Hs, Ws) float32
    pos: np.ndarray  # (Hs, Ws) bool
    inst_idx: np.ndarray  # (Hs, Ws) int64, -1 where background


@dataclass
class DenseTargets:
    levels: Dict[str, LevelTargets]

    def num_pos(self) -> int:
        return int(sum(lt.pos.sum() for lt in self.levels.values()))


def location_points(hs: int, ws: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Image-plane (x, y) coordinates of every grid location, each (Hs, Ws)."""
    ii, jj = np.mgrid[0:hs, 0:ws]
    return stride * (jj + 0.5), stride * (ii + 0.5)


# ---------------------------------------------------------------------------
# box utilities


def box_area(box) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def box_iou(a, b) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def giou(box_a, box_b) -> float:
    """Generalized IoU of two well-ordered boxes, in [-1, 1]."""
    for name, box in (("A", box_a), ("B", box_b)):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"box {name} has zero area: {tuple(box)}")
    iou = box_iou(box_a, box_b)
    inter_a = box_area(box_a) + box_area(box_b)
    ix0, iy0 = max(box_a[0], box_b[0]), max(box_a[1], box_b[1])
    ix1, iy1 = min(box_a[2], box_b[2]), min(box_a[3], box_b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    union = inter_a - inter
    cx0, cy0 = min(box_a[0], box_b[0]), min(box_a[1], box_b[1])
    cx1, cy1 = max(box_a[2], box_b[2]), max(box_a[3], box_b[3])
    enclosure = (cx1 - cx0) * (cy1 - cy0)
    return iou - (enclosure - union) / enclosure


def giou_tensor(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Differentiable GIoU for matched (N, 4) box tensors."""
    area_p = (pred[:, 2] - pred[:, 0]).clamp(min=0) * (pred[:, 3] - pred[:, 1]).clamp(min=0)
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    iw = (torch.minimum(pred[:, 2], gt[:, 2]) - torch.maximum(pred[:, 0], gt[:, 0])).clamp(min=0)
    ih = (torch.minimum(pred[:, 3], gt[:, 3]) - torch.maximum(pred[:, 1], gt[:, 1])).clamp(min=0)
    inter = iw * ih
    union = area_p + area_g - inter
    cw = torch.maximum(pred[:, 2], gt[:, 2]) - torch.minimum(pred[:, 0], gt[:, 0])
    ch = torch.maximum(pred[:, 3], gt[:, 3]) - torch.minimum(pred[:, 1], gt[:, 1])
    enclosure = (cw * ch).clamp(min=1e-12)
    return inter / union.clamp(min=1e-12) - (enclosure - union) / enclosure


def box_loss(g):
    """-ln((1+g)/2); zero iff g == 1, gradient -1/(1+g)."""
    if isinstance(g, torch.Tensor):
        g = g.clamp(min=-1.0 + GIOU_CLAMP_EPS)
        return -torch.log((1.0 + g) / 2.0)
    g = max(float(g), -1.0 + GIOU_CLAMP_EPS)
    return -math.log((1.0 + g) / 2.0)


def box_loss_grad(g):
    """Analytic derivative of box_loss w.r.t. g (after the clamp)."""
    if isinstance(g, torch.Tensor):
        g = g.clamp(min=-1.0 + GIOU_CLAMP_EPS)
        return -1.0 / (1.0 + g)
    g = max(float(g), -1.0 + GIOU_CLAMP_EPS)
    return -1.0 / (1.0 + g)


def centerness_target(l: float, t: float, r: float, b: float) -> float:
    """sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b))) for positive distances."""
    if min(l, t, r, b) <= 0:
        raise ValueError(f"side distances must be positive, got {(l, t, r, b)}")
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


# ---------------------------------------------------------------------------
# target assignment


def assign_targets(
    level_shapes: Dict[str, Tuple[int, int]],
    gt_boxes: Sequence[Tuple[float, float, float, float]],
    gt_classes: Sequence[int],
    cfg: ModelConfig,
) -> DenseTargets:
    """FCOS-style assignment over the pyramid.

    A location is positive iff it lies strictly inside some gt box and
    max(l,t,r,b) falls in its level's (lo, hi] range; ties among containing
    boxes go to the smallest box area (then lowest gt index).
    """
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(gt_classes, dtype=np.int64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    if boxes.shape[0] and areas.min() <= 0:
        raise ValueError("ground-truth boxes must have positive area")

    levels: Dict[str, LevelTargets] = {}
    for level, (lo, hi) in zip(LEVELS, cfg.level_ranges):
        hs, ws = level_shapes[level]
        stride = STRIDES[level]
        cls_t = np.zeros((hs, ws), dtype=np.int64)
        ltrb_t = np.zeros((4, hs, ws), dtype=np.float32)
        cent_t = np.zeros((hs, ws), dtype=np.float32)
        pos_t = np.zeros((hs, ws), dtype=bool)
        idx_t = np.full((hs, ws), -1, dtype=np.int64)
        if boxes.shape[0]:
            px, py = location_points(hs, ws, stride)
            l = px[:, :, None] - boxes[None, None, :, 0]
            t = py[:, :, None] - boxes[None, None, :, 1]
            r = boxes[None, None, :, 2] - px[:, :, None]
            b = boxes[None, None, :, 3] - py[:, :, None]
            sides = np.stack([l, t, r, b], axis=0)  # (4, Hs, Ws, M)
            inside = sides.min(axis=0) > 0
            max_side = sides.max(axis=0)
            candidate = inside & (max_side > lo) & (max_side <= hi)
            if cfg.center_sampling:
                cxs = (boxes[:, 0] + boxes[:, 2]) / 2.0
                cys = (boxes[:, 1] + boxes[:, 3]) / 2.0
                radius = cfg.center_sampling_radius * stride
                near = (np.abs(px[:, :, None] - cxs[None, None, :]) <= radius) & (
                    np.abs(py[:, :, None] - cys[None, None, :]) <= radius
                )
                candidate &= near
            cand_areas = np.where(candidate, areas[None, None, :], np.inf)
            best = cand_areas.argmin(axis=2)  # first minimum -> lowest gt index
            has = np.isfinite(cand_areas.min(axis=2))
            ii, jj = np.nonzero(has)
            if ii.size:
                sel = best[ii, jj]
                pos_t[ii, jj] = True
                idx_t[ii, jj] = sel
                cls_t[ii, jj] = classes[sel] + 1
                sel_sides = sides[:, ii, jj, sel]  # (4, P)
                ltrb_t[:, ii, jj] = sel_sides.astype(np.float32)
                lr = np.minimum(sel_sides[0], sel_sides[2]) / np.maximum(sel_sides[0], sel_sides[2])
                tb = np.minimum(sel_sides[1], sel_sides[3]) / np.maximum(sel_sides[1], sel_sides[3])
                cent_t[ii, jj] = np.sqrt(lr * tb).astype(np.float32)
        levels[level] = LevelTargets(cls=cls_t, ltrb=ltrb_t, centerness=cent_t, pos=pos_t, inst_idx=idx_t)
    return DenseTargets(levels=levels)


# ---------------------------------------------------------------------------
# network head


class DetectionHead(nn.Module):
    """Shared classification / regression towers with per-level box scales."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.feat_channels
        self.num_classes = cfg.num_classes

        groups = math.gcd(8, c)

        def tower() -> nn.Sequential:
            layers = []
            for _ in range(cfg.tower_convs):
                layers += [nn.Conv2d(c, c, 3, padding=1), nn.GroupNorm(groups, c), nn.SiLU()]
            return nn.Sequential(*layers)

        self.cls_tower = tower()
        self.reg_tower = tower()
        self.cls_logits = nn.Conv2d(c, cfg.num_classes, 3, padding=1)
        self.ctr_logits = nn.Conv2d(c, 1, 3, padding=1)
        self.box_raw = nn.Conv2d(c, 4, 3, padding=1)
        self.scales = nn.Parameter(torch.ones(len(LEVELS)))

        for conv in (self.cls_logits, self.ctr_logits, self.box_raw):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        # focal-loss prior so background starts near p=0.01
        nn.init.constant_(self.cls_logits.bias, -math.log((1.0 - 0.01) / 0.01))

    def forward(self, pyramid: Dict[str, torch.Tensor]) -> Dict[str, Dict[str, torch.Tensor]]:
        out: Dict[str, Dict[str, torch.Tensor]] = {}
        for k, level in enumerate(LEVELS):
            feat = pyramid[level]
            ct = self.cls_tower(feat)
            rt = self.reg_tower(feat)
            raw = (self.scales[k] * self.box_raw(rt)).clamp(min=-12.0, max=6.0)
            ltrb = torch.exp(raw) * STRIDES[level]
            out[level] = {
                "cls": self.cls_logits(ct),
                "ctr": self.ctr_logits(rt),
                "ltrb": ltrb,
                "reg_feat": rt,
            }
        return out


def check_finite(outputs: Dict[str, Dict[str, torch.Tensor]]) -> None:
    """Raise NumericsError naming the level and flat index of the first NaN/Inf."""
    for level, maps in outputs.items():
        for name in ("cls", "ctr", "ltrb"):
            bad = ~torch.isfinite(maps[name])
            if bad.any():
                idx = int(bad.reshape(-1).nonzero()[0])
                raise NumericsError(f"non-finite {name} prediction at level {level}, flat index {idx}")


# ---------------------------------------------------------------------------
# losses


def sigmoid_focal_loss(logits: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
    """Per-element focal loss (alpha=0.25, gamma=2), no reduction."""
    bce = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * onehot + (1.0 - p) * (1.0 - onehot)
    alpha_t = FOCAL_ALPHA * onehot + (1.0 - FOCAL_ALPHA) * (1.0 - onehot)
    return alpha_t * (1.0 - p_t) ** FOCAL_GAMMA * bce


def detection_losses(
    outputs: Dict[str, Dict[str, torch.Tensor]],
    targets: DenseTargets,
    num_classes: int,
    batch_index: int = 0,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(L_cls, L_cent, L_box) for one frame's dense outputs and targets.

    L_cls: focal loss over all locations, normalized by positive count
    (floor 1). L_cent: BCE at positives against the centerness target.
    L_box: centerness-weighted mean of box_loss over positives.
    """
    check_finite(outputs)
    device = outputs[LEVELS[0]]["cls"].device
    dtype = outputs[LEVELS[0]]["cls"].dtype

    num_pos = targets.num_pos()
    cls_sum = None
    cent_terms: List[torch.Tensor] = []
    box_terms: List[torch.Tensor] = []
    weight_terms: List[torch.Tensor] = []

    for level in LEVELS:
        maps = outputs[level]
        lt = targets.levels[level]
        logits = maps["cls"][batch_index]  # (C, Hs, Ws)
        onehot = torch.zeros_like(logits)
        pos = torch.from_numpy(lt.pos).to(device)
        if pos.any():
            cls_idx = torch.from_numpy(lt.cls).to(device) - 1
            ii, jj = torch.nonzero(pos, as_tuple=True)
            onehot[cls_idx[ii, jj], ii, jj] = 1.0
        level_sum = sigmoid_focal_loss(logits, onehot).sum()
        cls_sum = level_sum if cls_sum is None else cls_sum + level_sum

        if pos.any():
            ii, jj = torch.nonzero(pos, as_tuple=True)
            ctr_logit = maps["ctr"][batch_index, 0, ii, jj]
            cent_target = torch.from_numpy(lt.centerness).to(device=device, dtype=dtype)[ii, jj]
            cent_terms.append(F.binary_cross_entropy_with_logits(ctr_logit, cent_target, reduction="none"))

            stride = STRIDES[level]
            x = (jj.to(dtype) + 0.5) * stride
            y = (ii.to(dtype) + 0.5) * stride
            ltrb = maps["ltrb"][batch_index][:, ii, jj]
            pred_boxes = torch.stack([x - ltrb[0], y - ltrb[1], x + ltrb[2], y + ltrb[3]], dim=1)
            gt_ltrb = torch.from_numpy(lt.ltrb).to(device=device, dtype=dtype)[:, ii, jj]
            gt_boxes = torch.stack(
                [x - gt_ltrb[0], y - gt_ltrb[1], x + gt_ltrb[2], y + gt_ltrb[3]], dim=1
            )
            g = giou_tensor(pred_boxes, gt_boxes)
            box_terms.append(box_loss(g))
            weight_terms.append(cent_target)

    zero = torch.zeros((), device=device, dtype=dtype)
    l_cls = cls_sum / max(1, num_pos)
    if cent_terms:
        cent_all = torch.cat(cent_terms)
        l_cent = cent_all.mean()
        w = torch.cat(weight_terms)
        l_box = (torch.cat(box_terms) * w).sum() / w.sum().clamp(min=1e-12)
    else:
        l_cent = zero
        l_box = zero
    return l_cls, l_cent, l_box


# ---------------------------------------------------------------------------
# decoding


def _nms_keep(cands: List[Detection], nms_iou: float) -> List[Detection]:
    """Greedy class-wise IoU suppression; cands must be pre-sorted."""
    kept: List[Detection] = []
    for det in cands:
        ok = True
        for other in kept:
            if other.class_id == det.class_id and box_iou(det.box, other.box) > nms_iou:
                ok = False
                break
        if ok:
            kept.append(det)
    return kept


def _sort_key(det: Detection) -> tuple:
    return (-det.score, LEVELS.index(det.level), det.grid_index[0], det.grid_index[1], det.class_id)


def decode_detections(
    outputs: Dict[str, Dict[str, torch.Tensor]],
    score_threshold: float,
    nms_iou: float,
    top_k: int,
    image_size: Optional[Tuple[int, int]] = None,
    batch_index: int = 0,
) -> List[Detection]:
    """Dense maps -> thresholded, NMS-filtered Detection records.

    Score is sqrt(class_prob * centerness_prob); survivors are sorted by
    descending score (deterministic tie-break on level and grid index) and
    truncated to top_k.
    """
    cands: List[Detection] = []
    for level in LEVELS:
        maps = outputs[level]
        cls_prob = torch.sigmoid(maps["cls"][batch_index]).detach().cpu().numpy()
        ctr_prob = torch.sigmoid(maps["ctr"][batch_index, 0]).detach().cpu().numpy()
        ltrb = maps["ltrb"][batch_index].detach().cpu().numpy()
        score = np.sqrt(cls_prob * ctr_prob[None, :, :])
        cs, iis, jjs = np.nonzero(score > score_threshold)
        stride = STRIDES[level]
        for c, i, j in zip(cs, iis, jjs):
            x = stride * (j + 0.5)
            y = stride * (i + 0.5)
            l, t, r, b = ltrb[:, i, j]
            box = [x - l, y - t, x + r, y + b]
            if image_size is not None:
                h_img, w_img = image_size
                box = [
                    min(max(box[0], 0.0), w_img),
                    min(max(box[1], 0.0), h_img),
                    min(max(box[2], 0.0), w_img),
                    min(max(box[3], 0.0), h_img),
                ]
            cands.append(
                Detection(
                    class_id=int(c),
                    score=float(score[c, i, j]),
                    o=(float(x), float(y)),
                    box=tuple(float(v) for v in box),
                    level=level,
                    grid_index=(int(i), int(j)),
                )
            )
    cands.sort(key=_sort_key)
    kept = _nms_keep(cands, nms_iou)
    return kept[:top_k]
