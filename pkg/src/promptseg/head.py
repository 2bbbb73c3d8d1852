"""Segmentation head: per-scale fusion of backbone features with the
cross-attention maps, producing per-pixel class logits.

At every scale the attention maps enter as extra channels concatenated onto
the feature map; a 1x1 lateral projection brings each scale to a common
width, coarser scales are bilinearly upsampled to the finest scale and
summed, two 3x3 conv blocks refine the fusion, a 1x1 classifier emits the
logits, and a final bilinear upsample restores input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import NUM_SCALES, SCALE_STRIDES, BackboneOutput, ChannelNorm
from .metrics import IGNORE_INDEX


@dataclass
class HeadConfig:
    feature_channels: tuple[int, int, int]  # backbone widths, finest first
    num_tokens: int                         # M: attention channels per scale
    num_classes: int
    width: int = 128

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["feature_channels"] = list(self.feature_channels)
        return d

    @staticmethod
    def from_json(d: dict) -> "HeadConfig":
        kwargs = dict(d)
        kwargs["feature_channels"] = tuple(kwargs["feature_channels"])
        return HeadConfig(**kwargs)


class SegmentationHead(nn.Module):
    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.laterals = nn.ModuleList([
            nn.Conv2d(c + config.num_tokens, w, 1) for c in config.feature_channels
        ])
        self.fuse = nn.Sequential(
            ChannelNorm(w), nn.SiLU(), nn.Conv2d(w, w, 3, padding=1),
            ChannelNorm(w), nn.SiLU(), nn.Conv2d(w, w, 3, padding=1),
        )
        self.classifier = nn.Conv2d(w, config.num_classes, 1)

    def forward(self, features: list[torch.Tensor], attentions: list[torch.Tensor]):
        if len(features) != NUM_SCALES or len(attentions) != NUM_SCALES:
            raise ValueError(f"expected {NUM_SCALES} scales")
        target = features[0].shape[-2:]
        fused = None
        for lateral, f, a in zip(self.laterals, features, attentions):
            if f.shape[-3] + a.shape[-3] != lateral.in_channels:
                raise ValueError(
                    f"scale channel mismatch: got {f.shape[-3]}+{a.shape[-3]} channels, "
                    f"head expects {lateral.in_channels}"
                )
            x = lateral(torch.cat([f, a], dim=-3))
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            fused = x if fused is None else fused + x
        logits = self.classifier(self.fuse(fused))
        return F.interpolate(logits, scale_factor=SCALE_STRIDES[0],
                             mode="bilinear", align_corners=False)


def predict(head: SegmentationHead, out: BackboneOutput) -> torch.Tensor:
    """Class logits [C, H, W] for one extracted sample (no gradients)."""
    was_training = head.training
    head.eval()
    try:
        with torch.no_grad():
            logits = head([f[None] for f in out.features], [a[None] for a in out.attentions])
    finally:
        head.train(was_training)
    return logits[0]


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities; class axis is dim -3."""
    if not bool(torch.isfinite(logits).all()):
        raise ValueError("non-finite logits")
    return torch.softmax(logits, dim=-3)


def ce_loss(logits: torch.Tensor, labels: torch.Tensor,
            ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Mean cross entropy over non-ignored pixels."""
    if logits.ndim == 3:
        logits, labels = logits[None], labels[None]
    if logits.shape[-2:] != labels.shape[-2:] or logits.shape[0] != labels.shape[0]:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}"
        )
    labels = labels.long()
    if not bool((labels != ignore_index).any()):
        raise ValueError("all pixels are ignored; cross entropy undefined")
    return F.cross_entropy(logits, labels, ignore_index=ignore_index, reduction="mean")
