"""Background pair: foreground-density U-Net and masked background autoencoder.

The uncertainty net learns where foreground objects sit; its output masks
patches out of the autoencoder's input so the transformer trunk can only
explain the background. The depth branch is squeezed through a single
sigmoid-bounded token with noise-driven binarization pressure, keeping the
reconstruction too coarse to smuggle foreground structure through.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .blocks import (
    ConvNeXtBlock,
    CrossAttentionBlock,
    ResidualPatchEmbedding,
    ResidualPatchUpscaling,
    TransformerBlock,
    phase_uniform_init_,
    sinusoidal_grid,
)
from .config import ModelConfig

PATCH = 16


class UncertaintyNet(nn.Module):
    """U-Net over rgb(+depth) predicting the foreground density in [0, 1]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        a, b, c, d = cfg.background_widths
        k, pm = cfg.kernel_size, cfg.padding_mode
        in_ch = 4 if cfg.depth_input else 3
        self.in_channels = in_ch

        def blk(ch):
            return ConvNeXtBlock(ch, kernel_size=k, padding_mode=pm)

        self.down1 = nn.Sequential(ResidualPatchEmbedding(in_ch, a, 4), blk(a))
        self.down2 = nn.Sequential(ResidualPatchEmbedding(a, b, 2), blk(b))
        self.down3 = nn.Sequential(ResidualPatchEmbedding(b, c, 2), blk(c))
        self.bottom = nn.Sequential(ResidualPatchEmbedding(c, d, 2), blk(d), blk(d))
        self.up3 = nn.Sequential(ResidualPatchUpscaling(d, c, 2))
        self.up3_block = blk(c)
        self.up2 = nn.Sequential(ResidualPatchUpscaling(c, b, 2))
        self.up2_block = blk(b)
        self.up1 = nn.Sequential(ResidualPatchUpscaling(b, a, 2))
        self.up1_block = blk(a)
        self.head = ResidualPatchUpscaling(a, 1, 4)

    def forward(self, rgb: Tensor, depth: Tensor | None = None) -> Tensor:
        """rgb (3, H, W) or (N, 3, H, W); returns uncertainty (., 1, H, W)."""
        squeeze = rgb.ndim == 3
        x = rgb.unsqueeze(0) if squeeze else rgb
        if self.in_channels == 4:
            if depth is None:
                raise ValueError("this uncertainty net needs a depth plane")
            d = depth.unsqueeze(0) if depth.ndim == 3 else depth
            x = torch.cat([x, d], dim=1)
        h, w = x.shape[-2], x.shape[-1]
        if h % 64 != 0 or w % 64 != 0:
            raise ValueError(f"resolution {h}x{w} not divisible by 64")
        s1 = self.down1(x)
        s2 = self.down2(s1)
        s3 = self.down3(s2)
        y = self.bottom(s3)
        y = self.up3_block(self.up3(y) + s3)
        y = self.up2_block(self.up2(y) + s2)
        y = self.up1_block(self.up1(y) + s1)
        out = torch.sigmoid(self.head(y))
        return out[0] if squeeze else out


def binarize(x: Tensor, train: bool, generator: torch.Generator | None = None) -> Tensor:
    """x + x (1 - x) * noise: pushes sigmoid activations toward {0, 1} while
    training; with the noise at zero (eval) the values pass through unchanged."""
    if not train:
        return x
    noise = torch.empty_like(x).normal_(0.0, 1.0, generator=generator)
    return x + x * (1.0 - x) * noise


class BackgroundExtractor(nn.Module):
    """Masked-autoencoder background model with a single-token depth bottleneck."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        t = cfg.background_token_width
        self.token_width = t
        self.threshold = cfg.mask_patch_threshold
        in_ch = 4 if cfg.depth_input else 3
        self.in_channels = in_ch
        heads = max(1, t // 16)

        self.patch_embed = nn.Sequential(
            nn.Conv2d(in_ch, 4 * t, PATCH, stride=PATCH),
            nn.SiLU(),
            nn.Conv2d(4 * t, t, 1),
        )
        self.mask_token = nn.Parameter(torch.zeros(t))
        self.pos_proj = nn.Linear(16, t)
        self.base = nn.ModuleList([TransformerBlock(t, heads) for _ in range(2)])
        self.rgb_encoder = TransformerBlock(t, heads)
        self.depth_encoder = TransformerBlock(t, heads)
        self.bottleneck_proj = nn.Linear(t, t)
        self.bottleneck_query = CrossAttentionBlock(t, heads)
        self.depth_blocks = nn.Sequential(
            ConvNeXtBlock(t, kernel_size=3), ConvNeXtBlock(t, kernel_size=3)
        )
        self.depth_up = nn.Sequential(
            nn.Conv2d(t, 4 * t, 1), nn.SiLU(),
            phase_uniform_init_(nn.ConvTranspose2d(4 * t, 1, PATCH, stride=PATCH)),
        )
        self.depth_reencode = nn.Sequential(
            nn.Conv2d(1, t, PATCH, stride=PATCH), ConvNeXtBlock(t, kernel_size=3)
        )
        self.rgb_cross = CrossAttentionBlock(t, heads)
        self.rgb_blocks = nn.Sequential(
            ConvNeXtBlock(t, kernel_size=3), ConvNeXtBlock(t, kernel_size=3)
        )
        self.rgb_up = nn.Sequential(
            nn.Conv2d(t, 4 * t, 1), nn.SiLU(),
            phase_uniform_init_(nn.ConvTranspose2d(4 * t, 3, PATCH, stride=PATCH)),
        )

    def _positional(self, hp: int, wp: int, dtype, device) -> Tensor:
        grid = sinusoidal_grid(hp, wp, 16, dtype=dtype, device=device)
        return self.pos_proj(grid.reshape(16, hp * wp).T)  # (n, t)

    def forward(
        self,
        rgb: Tensor,
        depth: Tensor | None,
        uncertainty: Tensor,
        train: bool = False,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (bg_rgb (3,H,W), bg_depth (1,H,W), bg_mask (1,H,W))."""
        x = rgb
        if self.in_channels == 4:
            if depth is None:
                raise ValueError("this background extractor needs a depth plane")
            x = torch.cat([rgb, depth], dim=0)
        _, h, w = x.shape
        hp, wp = h // PATCH, w // PATCH
        tokens = self.patch_embed(x.unsqueeze(0))[0]  # (t, hp, wp)
        tokens = tokens.reshape(self.token_width, hp * wp).T  # (n, t)

        # hard-mask uncertain patches before the trunk sees them
        patch_u = torch.nn.functional.avg_pool2d(uncertainty.unsqueeze(0), PATCH)[0, 0]
        masked = patch_u.reshape(-1) > self.threshold
        tokens = torch.where(masked.unsqueeze(1), self.mask_token.unsqueeze(0), tokens)

        pos = self._positional(hp, wp, tokens.dtype, tokens.device)
        tokens = (tokens + pos).unsqueeze(0)
        for block in self.base:
            tokens = block(tokens)

        rgb_tokens = self.rgb_encoder(tokens)
        depth_tokens = self.depth_encoder(tokens)

        # single-token bottleneck: average, squash, binarize, re-expand
        z = self.bottleneck_proj(depth_tokens.mean(dim=1, keepdim=True))
        z = binarize(torch.sigmoid(z), train, generator)
        queries = pos.unsqueeze(0)
        depth_grid = self.bottleneck_query(queries, z)[0].T.reshape(
            self.token_width, hp, wp
        )
        bg_depth = torch.sigmoid(self.depth_up(self.depth_blocks(depth_grid.unsqueeze(0))))[0]

        depth_feats = self.depth_reencode(bg_depth.unsqueeze(0))[0]
        depth_kv = depth_feats.reshape(self.token_width, hp * wp).T.unsqueeze(0)
        fused = self.rgb_cross(rgb_tokens, depth_kv)[0].T.reshape(self.token_width, hp, wp)
        bg_rgb = torch.sigmoid(self.rgb_up(self.rgb_blocks(fused.unsqueeze(0))))[0]

        bg_mask = (1.0 - uncertainty).clamp(0.0, 1.0)
        return bg_rgb, bg_depth, bg_mask


def background_pretrain_loss(
    pred_rgb: Tensor,
    pred_depth: Tensor,
    target_rgb: Tensor,
    target_depth: Tensor,
    fg_mask: Tensor,
) -> Tensor:
    """Reconstruction loss masked by the inverse foreground density.

    Mean over background-weighted pixels of (channel-mean squared rgb error +
    squared depth error); defined as 0 when everything is foreground.
    """
    weight = (1.0 - fg_mask).clamp(0.0, 1.0)
    rgb_err = ((pred_rgb - target_rgb) ** 2).mean(dim=0, keepdim=True)
    depth_err = (pred_depth - target_depth) ** 2
    total = (weight * (rgb_err + depth_err)).sum()
    denom = weight.sum()
    if denom.item() == 0.0:
        return total * 0.0
    return total / denom


def uncertainty_bce_loss(pred_u: Tensor, fg_mask: Tensor) -> Tensor:
    """Per-pixel binary cross-entropy against the ground-truth foreground."""
    eps = 1e-7
    p = pred_u.clamp(eps, 1.0 - eps)
    return -(fg_mask * torch.log(p) + (1.0 - fg_mask) * torch.log(1.0 - p)).mean()
