"""Small trainable backbone plus feature pyramid (P3-P7, strides 8-128).

A stride-2 stem followed by four downsampling stages (widths 16/32/64/64)
feeds lateral 1x1 + top-down nearest-neighbor merges for P3-P5; P6 and P7
come from strided convolutions on top of P5. Activations are SiLU so the
whole network is smooth, which keeps finite-difference gradient checks
honest.
"""

from __future__ import annotations

from typing import Dict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LEVELS, STRIDES


class ShapeError(ValueError):
    """Input spatial size incompatible with the pyramid strides."""


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


class BackboneFPN(nn.Module):
    """Maps (B, 3, H, W) images to a five-level feature pyramid.

    H and W must be divisible by 32; for inputs divisible by 128 every level
    halves exactly down to P7 = (H/128, W/128).
    """

    def __init__(self, feat_channels: int = 64):
        super().__init__()
        self.feat_channels = feat_channels
        widths = (16, 32, 64, 64)
        self.stem = _conv(3, 8, stride=2)
        stages = []
        cin = 8
        for cout in widths:
            stages.append(
                nn.Sequential(_conv(cin, cout, stride=2), nn.SiLU(), _conv(cout, cout), nn.SiLU())
            )
            cin = cout
        self.stages = nn.ModuleList(stages)
        # laterals for C3 (stride 8), C4 (16), C5 (32)
        self.laterals = nn.ModuleList(
            [nn.Conv2d(c, feat_channels, kernel_size=1) for c in widths[1:]]
        )
        self.outputs = nn.ModuleList([_conv(feat_channels, feat_channels) for _ in range(3)])
        self.p6_conv = _conv(feat_channels, feat_channels, stride=2)
        self.p7_conv = _conv(feat_channels, feat_channels, stride=2)

    def forward(self, images: torch.Tensor) -> Dict[str, torch.Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        _, _, h, w = images.shape
        if h % 32 != 0:
            raise ShapeError(f"height {h} not divisible by 32")
        if w % 32 != 0:
            raise ShapeError(f"width {w} not divisible by 32")

        x = F.silu(self.stem(images))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        c3, c4, c5 = feats[1], feats[2], feats[3]

        p5 = self.laterals[2](c5)
        p4 = self.laterals[1](c4) + F.interpolate(p5, scale_factor=2, mode="nearest")
        p3 = self.laterals[0](c3) + F.interpolate(p4, scale_factor=2, mode="nearest")
        p3 = self.outputs[0](p3)
        p4 = self.outputs[1](p4)
        p5 = self.outputs[2](p5)
        p6 = self.p6_conv(p5)
        p7 = self.p7_conv(F.silu(p6))
        return {"P3": p3, "P4": p4, "P5": p5, "P6": p6, "P7": p7}


def frames_to_tensor(frames, dtype=torch.float32) -> torch.Tensor:
    """(T, H, W, 3) float array -> (T, 3, H, W) tensor."""
    t = torch.as_tensor(frames, dtype=dtype)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def pyramid_shapes(h: int, w: int) -> Dict[str, tuple]:
    """Expected (rows, cols) per level for an (H, W) input."""
    out = {}
    for level in LEVELS:
        s = STRIDES[level]
        out[level] = (-(-h // s), -(-w // s))
    return out
