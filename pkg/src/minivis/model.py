"""Full network assembly: backbone, detection towers, mask modules, movement head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BackboneFPN
from .config import ModelConfig
from .detection import DetectionHead
from .mask_head import AttentionTower, BaseFeatureNet
from .tracking import MovementHead


@dataclass
class ModelOutputs:
    pyramid: Dict[str, torch.Tensor]
    det: Dict[str, Dict[str, torch.Tensor]]  # per level: cls / ctr / ltrb / reg_feat
    att: Dict[str, torch.Tensor]  # per level: (B, cap^2, Hs, Ws)
    base_features: torch.Tensor  # (B, cap^2, Hm, Wm)
    base_pre: torch.Tensor  # shared 1x1 conv response without bias, same shape

    def reg_feats(self) -> Dict[str, torch.Tensor]:
        return {level: maps["reg_feat"] for level, maps in self.det.items()}


class VisModel(nn.Module):
    """One-stage detector + sub-region mask head + movement head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = BackboneFPN(cfg.feat_channels)
        self.det_head = DetectionHead(cfg)
        self.att_tower = AttentionTower(cfg)
        self.base_net = BaseFeatureNet(cfg)
        self.mask_conv = nn.Conv2d(cfg.num_bases, cfg.num_bases, kernel_size=1)
        self.movement = MovementHead(cfg.feat_channels)

    def forward(self, images: torch.Tensor) -> ModelOutputs:
        pyramid = self.backbone(images)
        det = self.det_head(pyramid)
        att = self.att_tower(pyramid)
        base = self.base_net(pyramid)
        base_pre = F.conv2d(base, self.mask_conv.weight)
        return ModelOutputs(pyramid=pyramid, det=det, att=att, base_features=base, base_pre=base_pre)

    def movement_field(
        self, out_t: ModelOutputs, out_prev: Optional[ModelOutputs],
        batch_t: Optional[slice] = None, batch_prev: Optional[slice] = None,
    ) -> Dict[str, torch.Tensor]:
        cur = out_t.reg_feats()
        prev = out_prev.reg_feats() if out_prev is not None else None
        if batch_t is not None:
            cur = {k: v[batch_t] for k, v in cur.items()}
        if prev is not None and batch_prev is not None:
            prev = {k: v[batch_prev] for k, v in prev.items()}
        return self.movement(cur, prev)

    def parameter_groups(self) -> Dict[str, nn.Module]:
        """Named groups used by the gradient-coverage probe."""
        return {
            "backbone": self.backbone,
            "towers": self.det_head,
            "attention_tower": self.att_tower,
            "base_feature_convs": self.base_net,
            "base_mask_conv": self.mask_conv,
            "movement_conv": self.movement,
        }
