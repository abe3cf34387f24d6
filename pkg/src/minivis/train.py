"""Joint training of detection, mask, and tracking heads with momentum SGD.

One step processes a window of consecutive frames from one clip: detection
and mask losses are computed on every frame in the window, the movement loss
on every adjacent pair. The total is the plain sum of the five weighted
terms. Targets and mask geometry depend only on the ground truth, so they
are precomputed per clip and reused across epochs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backbone import frames_to_tensor, pyramid_shapes
from .config import LEVELS, ModelConfig, TrainConfig
from .detection import DenseTargets, assign_targets, detection_losses
from .io import save_checkpoint
from .mask_head import (
    cell_index_map,
    divide_box,
    rasterize_at_stride,
    select_channels,
    stride_footprint,
)
from .model import ModelOutputs, VisModel
from .tracking import track_loss

LOSS_NAMES = ("loss_cls", "loss_cent", "loss_box", "loss_mask", "loss_track", "loss_all")


class TrainingError(RuntimeError):
    """Non-finite loss term; aborts the offending step."""


@dataclass
class LossRecord:
    step: int
    lr: float
    loss_cls: float
    loss_cent: float
    loss_box: float
    loss_mask: float
    loss_track: float
    loss_all: float

    def as_row(self) -> List[float]:
        return [self.step, self.lr] + [getattr(self, n) for n in LOSS_NAMES]


@dataclass
class MaskItem:
    """Mask-loss geometry for one gt instance on one frame."""

    footprint: Tuple[int, int, int, int]
    cell_map: np.ndarray
    sel: np.ndarray  # canonical channel indices for this instance's grid
    gt_crop: torch.Tensor  # (hh, ww) float32 in {0, 1}
    # positive read locations per level: level -> (ii, jj) index arrays
    positives: Dict[str, Tuple[np.ndarray, np.ndarray]]


@dataclass
class PairReadouts:
    """Movement readout locations at frame t for instances alive at t-1 and t."""

    locations: List[Tuple[str, int, int]]
    targets: np.ndarray  # (N, 2) center displacements


class ClipCache:
    """Precomputed per-frame targets and mask/track geometry for one clip."""

    def __init__(self, frames: np.ndarray, annotations, cfg: ModelConfig):
        self.frames = frames
        self.annotations = annotations
        self.num_frames = frames.shape[0]
        h, w = frames.shape[1], frames.shape[2]
        self.image_size = (h, w)
        shapes = pyramid_shapes(h, w)
        stride = cfg.mask_stride

        self.targets: List[DenseTargets] = []
        self.mask_items: List[List[MaskItem]] = []
        for anns in annotations:
            boxes = [a.box for a in anns]
            classes = [a.class_id for a in anns]
            targets = assign_targets(shapes, boxes, classes, cfg)
            self.targets.append(targets)
            items: List[MaskItem] = []
            for idx, ann in enumerate(anns):
                positives: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
                for level in LEVELS:
                    lt = targets.levels[level]
                    ii, jj = np.nonzero(lt.pos & (lt.inst_idx == idx))
                    if ii.size:
                        positives[level] = (ii, jj)
                if not positives:
                    continue
                grid = divide_box(ann.box, unit=cfg.division_unit, cap=cfg.division_cap)
                hm, wm = h // stride, w // stride
                fp = stride_footprint(ann.box, stride, hm, wm)
                if fp is None:
                    continue
                cmap = cell_index_map(grid, fp, stride)
                raster = rasterize_at_stride(ann.mask, stride)
                gt_crop = torch.from_numpy(
                    raster[fp[0] : fp[1], fp[2] : fp[3]].astype(np.float32)
                )
                items.append(
                    MaskItem(
                        footprint=fp,
                        cell_map=cmap,
                        sel=select_channels(cfg.division_cap, grid.r1, grid.r2),
                        gt_crop=gt_crop,
                        positives=positives,
                    )
                )
            self.mask_items.append(items)

        # movement readouts per frame pair (t-1, t): the highest-centerness
        # positive location of each surviving instance at frame t
        self.pair_readouts: List[PairReadouts] = []
        for t in range(1, self.num_frames):
            prev_centers = {a.id: np.asarray(a.center) for a in annotations[t - 1]}
            locations: List[Tuple[str, int, int]] = []
            targets_list: List[np.ndarray] = []
            dense = self.targets[t]
            for idx, ann in enumerate(annotations[t]):
                if ann.id not in prev_centers:
                    continue
                best = None
                for lk, level in enumerate(LEVELS):
                    lt = dense.levels[level]
                    ii, jj = np.nonzero(lt.pos & (lt.inst_idx == idx))
                    for i, j in zip(ii, jj):
                        key = (-float(lt.centerness[i, j]), lk, int(i), int(j))
                        if best is None or key < best[0]:
                            best = (key, (level, int(i), int(j)))
                if best is None:
                    continue
                locations.append(best[1])
                targets_list.append(np.asarray(ann.center) - prev_centers[ann.id])
            self.pair_readouts.append(
                PairReadouts(
                    locations=locations,
                    targets=np.stack(targets_list) if targets_list else np.zeros((0, 2)),
                )
            )

    def frames_tensor(self, start: int, count: int, dtype=torch.float32) -> torch.Tensor:
        return frames_to_tensor(self.frames[start : start + count], dtype=dtype)


def _instance_mask_losses(
    att: Dict[str, torch.Tensor],
    base_pre: torch.Tensor,
    bias: torch.Tensor,
    item: MaskItem,
    frame_index: int,
) -> torch.Tensor:
    """Per-positive-location mean BCE for one instance; returns (P,) tensor."""
    i0, i1, j0, j1 = item.footprint
    sel = torch.as_tensor(item.sel, dtype=torch.long, device=base_pre.device)
    base_crop = base_pre[frame_index, sel, i0:i1, j0:j1] + bias[sel][:, None, None]
    idx = torch.as_tensor(item.cell_map, dtype=torch.long, device=base_pre.device)
    hh, ww = idx.shape
    rows = torch.arange(hh, device=base_pre.device)[:, None].expand(hh, ww)
    cols = torch.arange(ww, device=base_pre.device)[None, :].expand(hh, ww)
    base_cells = base_crop[idx, rows, cols]  # (hh, ww)
    gt = item.gt_crop.to(base_pre.dtype)

    losses = []
    for level, (ii, jj) in item.positives.items():
        scores = att[level][frame_index][sel][:, torch.as_tensor(ii), torch.as_tensor(jj)]  # (r1r2, P)
        scores = scores.permute(1, 0)  # (P, r1r2)
        logits = scores[:, idx] * base_cells[None, :, :]
        bce = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, gt[None].expand_as(logits), reduction="none"
        )
        losses.append(bce.mean(dim=(1, 2)))
    return torch.cat(losses)


def compute_losses(
    model: VisModel,
    clip: ClipCache,
    start: int,
    num_pairs: int,
    include_track: bool = True,
    dtype=torch.float32,
) -> Dict[str, torch.Tensor]:
    """All loss terms over a window of num_pairs + 1 frames starting at `start`."""
    count = num_pairs + 1
    images = clip.frames_tensor(start, count, dtype=dtype)
    out = model(images)

    zero = out.base_features.sum() * 0.0
    l_cls = zero.clone()
    l_cent = zero.clone()
    l_box = zero.clone()
    mask_terms: List[torch.Tensor] = []
    for f in range(count):
        t = start + f
        c, ce, bx = detection_losses(out.det, clip.targets[t], model.cfg.num_classes, batch_index=f)
        l_cls = l_cls + c
        l_cent = l_cent + ce
        l_box = l_box + bx
        for item in clip.mask_items[t]:
            mask_terms.append(
                _instance_mask_losses(out.att, out.base_pre, model.mask_conv.bias, item, f)
            )
    l_cls = l_cls / count
    l_cent = l_cent / count
    l_box = l_box / count
    l_mask = torch.cat(mask_terms).mean() if mask_terms else zero.clone()

    if include_track:
        field = model.movement_field(out, out, batch_t=slice(1, count), batch_prev=slice(0, count - 1))
        preds: List[torch.Tensor] = []
        targets: List[np.ndarray] = []
        for k in range(num_pairs):
            readouts = clip.pair_readouts[start + k]
            for (level, i, j), disp in zip(readouts.locations, readouts.targets):
                preds.append(field[level][k, :, i, j])
                targets.append(disp)
        if preds:
            pred_t = torch.stack(preds)
            target_t = torch.as_tensor(np.stack(targets), dtype=pred_t.dtype)
            l_track = track_loss(pred_t, target_t)
        else:
            l_track = zero.clone()
    else:
        l_track = zero.clone()

    return {
        "loss_cls": l_cls,
        "loss_cent": l_cent,
        "loss_box": l_box,
        "loss_mask": l_mask,
        "loss_track": l_track,
    }


def train_step(
    model: VisModel,
    optimizer: torch.optim.Optimizer,
    clip: ClipCache,
    start: int,
    num_pairs: int,
    cfg: TrainConfig,
    step: int,
) -> LossRecord:
    """One forward/backward/update; returns the six loss scalars."""
    include_track = cfg.weight_track > 0 and step >= cfg.track_warmup_steps
    losses = compute_losses(model, clip, start, num_pairs, include_track=include_track)
    weights = {
        "loss_cls": cfg.weight_cls,
        "loss_cent": cfg.weight_cent,
        "loss_box": cfg.weight_box,
        "loss_mask": cfg.weight_mask,
        "loss_track": cfg.weight_track,
    }
    total = None
    for name, value in losses.items():
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite {name} at step {step}")
        term = weights[name] * value
        total = term if total is None else total + term
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite loss_all at step {step}")

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
    optimizer.step()

    return LossRecord(
        step=step,
        lr=optimizer.param_groups[0]["lr"],
        loss_cls=float(losses["loss_cls"].detach()),
        loss_cent=float(losses["loss_cent"].detach()),
        loss_box=float(losses["loss_box"].detach()),
        loss_mask=float(losses["loss_mask"].detach()),
        loss_track=float(losses["loss_track"].detach()),
        loss_all=float(total.detach()),
    )


def learning_rate_at(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    epoch = step // max(1, steps_per_epoch)
    return cfg.learning_rate * cfg.decay**epoch


def _pick_window(cfg: TrainConfig, clip: ClipCache, step: int) -> Tuple[int, int]:
    num_pairs = min(cfg.batch_pairs, clip.num_frames - 1)
    max_start = clip.num_frames - 1 - num_pairs
    if max_start <= 0:
        return 0, num_pairs
    rng = np.random.default_rng((cfg.seed, step, 1))
    return int(rng.integers(0, max_start + 1)), num_pairs


@dataclass
class FitResult:
    checkpoint_path: Path
    records: List[LossRecord]


def fit(
    videos: Sequence,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir,
    resume: Optional[str] = None,
) -> FitResult:
    """Train on a list of clips; writes a loss CSV and periodic checkpoints.

    Deterministic for a fixed (seed, config): sampling order and the lr
    schedule are stateless functions of the step, so resuming from a
    checkpoint reproduces the uninterrupted run bit for bit.
    """
    if not videos:
        raise ValueError("training requires at least one video")
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    start_step = 0
    if resume is not None:
        from .io import load_checkpoint, model_from_checkpoint

        payload = load_checkpoint(resume)
        model, model_cfg = model_from_checkpoint(payload)
        start_step = payload["step"]
    else:
        model = VisModel(model_cfg)
    model.train()

    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    if resume is not None and payload.get("optimizer_state"):
        optimizer.load_state_dict(payload["optimizer_state"])

    caches = [ClipCache(v.frames, v.annotations, model_cfg) for v in videos]
    steps_per_epoch = len(caches)

    log_path = out_dir / "losses.csv"
    mode = "a" if (resume is not None and log_path.exists()) else "w"
    records: List[LossRecord] = []
    with open(log_path, mode, newline="") as log_file:
        writer = csv.writer(log_file)
        if mode == "w":
            writer.writerow(["step", "lr"] + list(LOSS_NAMES))
        for step in range(start_step, cfg.steps):
            lr = learning_rate_at(cfg, step, steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch = step // steps_per_epoch
            perm = np.random.default_rng((cfg.seed, epoch)).permutation(steps_per_epoch)
            clip = caches[int(perm[step % steps_per_epoch])]
            start, num_pairs = _pick_window(cfg, clip, step)
            record = train_step(model, optimizer, clip, start, num_pairs, cfg, step)
            records.append(record)
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                writer.writerow(record.as_row())
                log_file.flush()
            if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_{step + 1:06d}.pt", model, model_cfg, cfg, optimizer, step + 1
                )

    final_path = out_dir / "checkpoint_final.pt"
    save_checkpoint(final_path, model, model_cfg, cfg, optimizer, cfg.steps)
    return FitResult(checkpoint_path=final_path, records=records)
