"""Track-level evaluation: spatio-temporal mask IoU, AP over 0.50:0.05:0.95,
and AR at 1 and 10 predictions per video.

Matching is class-aware and per video: predictions sorted by score claim the
unmatched ground-truth track of highest IoU at or above the threshold.
Precision-recall curves are integrated with 101-point interpolation and
averaged over classes (those with ground truth) and thresholds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class Track:
    video_id: str
    track_id: int
    class_id: int
    score: float
    masks: List[Optional[np.ndarray]]  # per frame; None = not detected


def track_iou(pred: Track, gt: Track) -> float:
    """sum_t |P_t & G_t| / sum_t |P_t | G_t| over the video's frame range."""
    n = max(len(pred.masks), len(gt.masks))
    inter = 0
    union = 0
    for t in range(n):
        p = pred.masks[t] if t < len(pred.masks) else None
        g = gt.masks[t] if t < len(gt.masks) else None
        if p is None and g is None:
            continue
        if p is None:
            union += int(g.sum())
        elif g is None:
            union += int(p.sum())
        else:
            inter += int((p & g).sum())
            union += int((p | g).sum())
    return inter / union if union > 0 else 0.0


def _interpolated_ap(scores: np.ndarray, matched: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from per-prediction match flags."""
    if num_gt == 0:
        return 0.0
    if scores.size == 0:
        return 0.0
    tp = np.cumsum(matched)
    fp = np.cumsum(~matched)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope: max precision at recall >= r
    prec_at = np.zeros_like(RECALL_GRID)
    for k, r in enumerate(RECALL_GRID):
        mask = recall >= r - 1e-12
        prec_at[k] = precision[mask].max() if mask.any() else 0.0
    return float(prec_at.mean())


def _greedy_match(
    preds: Sequence[Track], gts: Sequence[Track], iou: Dict[Tuple[int, int], float], thr: float
) -> np.ndarray:
    """Match flags for score-sorted predictions against gts of one video."""
    taken = [False] * len(gts)
    flags = np.zeros(len(preds), dtype=bool)
    for pi in range(len(preds)):
        best_g = -1
        best_iou = 0.0
        for gi in range(len(gts)):
            if taken[gi]:
                continue
            v = iou[(pi, gi)]
            if v >= thr and v > best_iou:
                best_g = gi
                best_iou = v
        if best_g >= 0:
            taken[best_g] = True
            flags[pi] = True
    return flags


def _sorted_preds(preds: List[Track]) -> List[Track]:
    return sorted(preds, key=lambda tr: (-tr.score, tr.video_id, tr.track_id))


def evaluate(
    preds: Sequence[Track],
    gts: Sequence[Track],
    top_ks: Tuple[int, ...] = (1, 10),
) -> Dict[str, float]:
    """{AP, AP@0.5, AP@0.75, AR@1, AR@10} over all videos and classes."""
    class_ids = sorted({g.class_id for g in gts})
    videos = sorted({g.video_id for g in gts} | {p.video_id for p in preds})

    ap_per_thr: Dict[float, List[float]] = {t: [] for t in IOU_THRESHOLDS}
    ar_per_k: Dict[int, List[float]] = {k: [] for k in top_ks}

    for class_id in class_ids:
        cls_gts = {v: [g for g in gts if g.video_id == v and g.class_id == class_id] for v in videos}
        cls_preds = {v: _sorted_preds([p for p in preds if p.video_id == v and p.class_id == class_id]) for v in videos}
        num_gt = sum(len(v) for v in cls_gts.values())
        if num_gt == 0:
            continue

        # IoU tables per video, shared across thresholds
        iou_tables = {}
        for v in videos:
            table = {}
            for pi, p in enumerate(cls_preds[v]):
                for gi, g in enumerate(cls_gts[v]):
                    table[(pi, gi)] = track_iou(p, g)
            iou_tables[v] = table

        for thr in IOU_THRESHOLDS:
            all_scores: List[float] = []
            all_flags: List[bool] = []
            for v in videos:
                flags = _greedy_match(cls_preds[v], cls_gts[v], iou_tables[v], thr)
                all_scores.extend(p.score for p in cls_preds[v])
                all_flags.extend(flags.tolist())
            order = np.argsort([-s for s in all_scores], kind="stable")
            matched = np.asarray(all_flags, dtype=bool)[order]
            scores = np.asarray(all_scores)[order]
            ap_per_thr[thr].append(_interpolated_ap(scores, matched, num_gt))

            for k in top_ks:
                hits = 0
                for v in videos:
                    limited = cls_preds[v][:k]
                    sub_iou = {
                        (pi, gi): iou_tables[v][(pi, gi)]
                        for pi in range(len(limited))
                        for gi in range(len(cls_gts[v]))
                    }
                    hits += int(_greedy_match(limited, cls_gts[v], sub_iou, thr).sum())
                ar_per_k[k].append(hits / num_gt)

    def mean_or_zero(values: List[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    all_aps = [v for thr in IOU_THRESHOLDS for v in ap_per_thr[thr]]
    metrics = {
        "AP": mean_or_zero(all_aps),
        "AP@0.5": mean_or_zero(ap_per_thr[0.5]),
        "AP@0.75": mean_or_zero(ap_per_thr[0.75]),
    }
    for k in top_ks:
        metrics[f"AR@{k}"] = mean_or_zero(ar_per_k[k])
    return metrics
