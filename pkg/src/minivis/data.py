"""Synthetic videos of moving geometric shapes with exact ground truth.

Each video is a deterministic function of (seed, config). Shapes move with
constant velocity plus optional bounded jitter over a textured background;
occlusion follows a fixed per-video z-order and masks store only visible
pixels. Boxes, centers, and masks are mutually consistent by construction:
the box is the tight rectangle of the visible mask and the center is its
centroid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import GeneratorConfig

SHAPE_NAMES = ("rectangle", "circle", "triangle")

# Flat per-class colors; the class signal is color + silhouette.
CLASS_COLORS = np.array(
    [
        [0.88, 0.22, 0.18],
        [0.20, 0.78, 0.28],
        [0.22, 0.38, 0.92],
    ],
    dtype=np.float64,
)


@dataclass
class GtInstance:
    id: int
    class_id: int
    box: Tuple[float, float, float, float]  # (x_min, y_min, x_max, y_max)
    mask: np.ndarray  # (H, W) bool, visible pixels only
    center: Tuple[float, float]  # centroid of mask, (x, y)


@dataclass
class VideoSample:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    annotations: List[List[GtInstance]]
    fps: float
    seed: int

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.frames.shape[1]), int(self.frames.shape[2])


def _textured_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    cell = 16
    coarse = rng.uniform(0.12, 0.42, size=(h // cell, w // cell, 3))
    return np.kron(coarse, np.ones((cell, cell, 1)))


def _rasterize(kind: int, cx: float, cy: float, ax: float, ay: float, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Pixel-center rasterization of one shape; ax/ay are half extents."""
    if kind == 0:  # rectangle
        return (np.abs(xs - cx) <= ax) & (np.abs(ys - cy) <= ay)
    if kind == 1:  # circle (radius = ax)
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= ax * ax
    # upright isoceles triangle: apex at (cx, cy - ay), base at cy + ay
    rel = (ys - (cy - ay)) / (2.0 * ay)
    inside_y = (rel >= 0.0) & (rel <= 1.0)
    return inside_y & (np.abs(xs - cx) <= ax * rel)


def _instance_from_mask(inst_id: int, class_id: int, mask: np.ndarray) -> Optional[GtInstance]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    box = (float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
    center = (float(cols.mean() + 0.5), float(rows.mean() + 0.5))
    return GtInstance(id=inst_id, class_id=class_id, box=box, mask=mask, center=center)


def generate_video(seed: int, cfg: GeneratorConfig) -> VideoSample:
    """Deterministically generate one video; equal (seed, cfg) gives equal bytes."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    h, w, t_total, n = cfg.height, cfg.width, cfg.num_frames, cfg.num_shapes

    background = _textured_background(rng, h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs += 0.5
    ys += 0.5

    kinds = rng.integers(0, 3, size=n)
    class_ids = rng.integers(0, cfg.num_classes, size=n)
    half_x = rng.uniform(cfg.min_size, cfg.max_size, size=n) / 2.0
    half_y = rng.uniform(cfg.min_size, cfg.max_size, size=n) / 2.0
    brightness = rng.uniform(0.85, 1.1, size=n)

    margin = cfg.max_size / 2.0 + 2.0
    starts = np.empty((n, 2))
    for i in range(n):
        for _attempt in range(1000):
            pos = np.array(
                [rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)]
            )
            if cfg.min_separation <= 0 or i == 0:
                break
            dists = np.linalg.norm(starts[:i] - pos, axis=1)
            if dists.min() >= cfg.min_separation:
                break
        else:
            raise ValueError("could not place shapes with the requested min_separation")
        starts[i] = pos

    if cfg.fixed_velocity is not None:
        velocities = np.tile(np.asarray(cfg.fixed_velocity, dtype=np.float64), (n, 1))
    else:
        speeds = rng.uniform(cfg.min_speed, cfg.max_speed, size=n)
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
        velocities = np.stack([speeds * np.cos(angles), speeds * np.sin(angles)], axis=1)

    jitters = np.zeros((t_total, n, 2))
    if cfg.jitter > 0:
        jitters[1:] = rng.uniform(-cfg.jitter, cfg.jitter, size=(t_total - 1, n, 2))

    colors = np.clip(CLASS_COLORS[class_ids] * brightness[:, None], 0.0, 1.0)

    frames = np.empty((t_total, h, w, 3), dtype=np.float32)
    annotations: List[List[GtInstance]] = []
    for t in range(t_total):
        centers = starts + velocities * t + jitters[t]
        rasters = [
            _rasterize(int(kinds[i]), centers[i, 0], centers[i, 1], half_x[i], half_y[i], xs, ys)
            for i in range(n)
        ]
        frame = background.copy()
        # z-order fixed per video: higher id drawn on top
        for i in range(n):
            frame[rasters[i]] = colors[i]
        frames[t] = frame.astype(np.float32)

        frame_anns: List[GtInstance] = []
        occluders = np.zeros((h, w), dtype=bool)
        for i in range(n - 1, -1, -1):
            visible = rasters[i] & ~occluders
            inst = _instance_from_mask(i, int(class_ids[i]), visible)
            if inst is not None:
                frame_anns.append(inst)
            occluders |= rasters[i]
        frame_anns.sort(key=lambda a: a.id)
        annotations.append(frame_anns)

    return VideoSample(frames=frames, annotations=annotations, fps=cfg.fps, seed=seed)


def velocity_oracle(sample: VideoSample, t: int) -> Dict[int, np.ndarray]:
    """Exact center displacement o_t - o_{t-1} for ids present in both frames."""
    if t < 1:
        raise ValueError("displacement is defined for t >= 1")
    prev = {a.id: np.asarray(a.center) for a in sample.annotations[t - 1]}
    out: Dict[int, np.ndarray] = {}
    for ann in sample.annotations[t]:
        if ann.id in prev:
            out[ann.id] = np.asarray(ann.center) - prev[ann.id]
    return out
