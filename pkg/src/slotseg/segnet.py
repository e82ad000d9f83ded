"""Instance-proposal U-Net with a hyper-weighted pixel head.

Operates on depth (optionally rgb+depth) plus a coordinate grid and emits a
fixed stack of instance logit maps. The deepest features parameterize the
final per-pixel classification weights, so mask prototypes adapt per image.
Training matches predicted channels to ground-truth instances by soft IoU
before the pixel-wise cross-entropy.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .blocks import ConvNeXtBlock, ResidualPatchEmbedding, phase_uniform_init_
from .config import ModelConfig
from .metrics import hungarian_match


class SegmentationUNet(nn.Module):
    def __init__(self, cfg: ModelConfig, use_rgb: bool = False):
        super().__init__()
        a, b, c, d = cfg.seg_widths
        k, pm = cfg.kernel_size, cfg.padding_mode
        self.use_rgb = use_rgb
        self.instances = cfg.seg_instance_channels
        self.head_width = cfg.seg_head_width
        in_ch = (4 if use_rgb else 1) + 2  # depth (+rgb) + 2D grid

        def blk(ch):
            return ConvNeXtBlock(ch, kernel_size=k, padding_mode=pm)

        self.down1 = nn.Sequential(ResidualPatchEmbedding(in_ch, a, 4), blk(a))
        self.down2 = nn.Sequential(ResidualPatchEmbedding(a, b, 2), blk(b), blk(b))
        self.down3 = nn.Sequential(ResidualPatchEmbedding(b, c, 2), blk(c), blk(c), blk(c))
        self.bottom = nn.Sequential(ResidualPatchEmbedding(c, d, 2), blk(d))
        self.hyper = nn.Sequential(
            nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d), nn.SiLU(),
            nn.Linear(d, self.head_width * self.instances),
        )
        self.bottom_block = blk(d)
        self.up3 = nn.Sequential(
            nn.Conv2d(d, 4 * d, 1), nn.SiLU(), phase_uniform_init_(nn.ConvTranspose2d(4 * d, c, 2, stride=2))
        )
        self.fuse3 = nn.Conv2d(2 * c, c, 1)
        self.block3 = blk(c)
        self.up2 = nn.Sequential(
            nn.Conv2d(c, 4 * c, 1), nn.SiLU(), phase_uniform_init_(nn.ConvTranspose2d(4 * c, b, 2, stride=2))
        )
        self.fuse2 = nn.Conv2d(2 * b, b, 1)
        self.block2 = blk(b)
        self.up1 = nn.Sequential(
            nn.Conv2d(b, 4 * b, 1), nn.SiLU(), phase_uniform_init_(nn.ConvTranspose2d(4 * b, a, 2, stride=2))
        )
        self.fuse1 = nn.Conv2d(2 * a, a, 1)
        self.block1 = blk(a)
        self.head = nn.Sequential(
            nn.Conv2d(a, 8 * a, 1), nn.SiLU(),
            phase_uniform_init_(nn.ConvTranspose2d(8 * a, self.head_width, 4, stride=4)),
        )

    def forward(self, depth: Tensor, rgb: Tensor | None = None) -> Tensor:
        """depth (1, H, W), optional rgb (3, H, W) -> instance logits (16, H, W)."""
        h, w = depth.shape[-2], depth.shape[-1]
        ys = torch.linspace(-1, 1, h, dtype=depth.dtype, device=depth.device)
        xs = torch.linspace(-1, 1, w, dtype=depth.dtype, device=depth.device)
        grid = torch.stack([xs.reshape(1, w).expand(h, w), ys.reshape(h, 1).expand(h, w)])
        planes = [depth, grid]
        if self.use_rgb:
            if rgb is None:
                raise ValueError("this segmentation net needs rgb input")
            planes.insert(0, rgb)
        x = torch.cat(planes, dim=0).unsqueeze(0)
        s1 = self.down1(x)
        s2 = self.down2(s1)
        s3 = self.down3(s2)
        deep = self.bottom(s3)
        weights = self.hyper(deep.mean(dim=(2, 3)))  # (1, head*instances)
        y = self.bottom_block(deep)
        y = self.block3(self.fuse3(torch.cat([self.up3(y), s3], dim=1)))
        y = self.block2(self.fuse2(torch.cat([self.up2(y), s2], dim=1)))
        y = self.block1(self.fuse1(torch.cat([self.up1(y), s1], dim=1)))
        feats = self.head(y)[0]  # (head_width, H, W)
        wmat = weights.reshape(self.head_width, self.instances)
        logits = torch.einsum("chw,ck->khw", feats, wmat)
        return logits


def soft_iou(prob: Tensor, target: Tensor) -> Tensor:
    """Soft Jaccard between a probability map and a binary target."""
    inter = (prob * target).sum()
    union = prob.sum() + target.sum() - inter
    return inter / union.clamp_min(1e-8)


def seg_unet_train_loss(pred_logits: Tensor, gt_masks: Tensor) -> Tensor:
    """Matched pixel-wise BCE: channels pair with gt instances by soft IoU.

    pred_logits: (16, H, W); gt_masks: (N, H, W) binary with N <= 16.
    Unmatched predicted channels are trained toward empty.
    """
    k, h, w = pred_logits.shape
    n = gt_masks.shape[0]
    if n > k:
        raise ValueError(f"more gt instances ({n}) than prediction channels ({k})")
    probs = torch.sigmoid(pred_logits)
    bce = nn.functional.binary_cross_entropy_with_logits
    if n == 0:
        return bce(pred_logits, torch.zeros_like(pred_logits))
    with torch.no_grad():
        cost = np.zeros((n, k))
        for i in range(n):
            for j in range(k):
                cost[i, j] = -soft_iou(probs[j], gt_masks[i]).item()
    pairs = hungarian_match(cost)
    matched_channels = {j: i for i, j in pairs}
    total = pred_logits.new_zeros(())
    for j in range(k):
        if j in matched_channels:
            target = gt_masks[matched_channels[j]].to(pred_logits.dtype)
        else:
            target = torch.zeros(h, w, dtype=pred_logits.dtype, device=pred_logits.device)
        total = total + bce(pred_logits[j], target, reduction="sum")
    return total / (k * h * w)
