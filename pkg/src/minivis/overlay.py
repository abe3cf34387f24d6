"""Overlay rendering: per-frame composites with one stable color per identity."""

from __future__ import annotations

import colorsys
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .infer import upsample_mask

ALPHA = 0.55


def id_color(track_id: int) -> Tuple[float, float, float]:
    """Stable, well-spread RGB color for a track id."""
    hue = (track_id * 0.61803398875) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.9, 1.0)


def render_overlays(frames: np.ndarray, tracks: Sequence, out_dir) -> List[Path]:
    """Blend each track's mask over the frames, lowest score first so the
    highest-scoring instance wins overlapping pixels; writes PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_total, h, w = frames.shape[0], frames.shape[1], frames.shape[2]
    ordered = sorted(tracks, key=lambda tr: tr.score)
    paths = []
    for t in range(t_total):
        canvas = frames[t].astype(np.float64).copy()
        for tr in ordered:
            mask = tr.masks[t]
            if mask is None or not mask.any():
                continue
            full = upsample_mask(mask, tr.mask_stride, (h, w)) if tr.mask_stride > 1 else mask
            color = np.asarray(id_color(tr.track_id))
            canvas[full] = (1.0 - ALPHA) * canvas[full] + ALPHA * color
        path = out_dir / f"overlay_{t:04d}.png"
        Image.fromarray(np.clip(np.round(canvas * 255.0), 0, 255).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
