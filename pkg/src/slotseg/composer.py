"""Recomposes the frame from per-slot decodes and the background.

Per-pixel weights are an exact softmax over priority-scaled masks: slot k
gets raw_mask_k * exp(rho_k - rho_max), the background gets
bg_mask * exp(rho_bg - rho_max), normalized by their sum. Pixels where every
contribution is zero fall back to the background, so the weights always
partition unity and adding a constant to every priority (background included)
leaves them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .blocks import ordered_sum
from .core import SlotDecodeResult


@dataclass(frozen=True)
class ComposedScene:
    rgb: Tensor  # (3, H, W)
    depth: Tensor  # (1, H, W)
    visibility: Tensor  # (K, 1, H, W) per-slot weights
    background_weight: Tensor  # (1, H, W)


def composition_weights(
    raw_masks: Tensor, priorities: Tensor, bg_mask: Tensor, rho_bg: float = 0.0
) -> tuple[Tensor, Tensor]:
    """raw_masks (K,1,H,W), priorities (K,), bg_mask (1,H,W) -> (weights, bg_weight)."""
    rho = torch.cat([priorities.reshape(-1), priorities.new_tensor([rho_bg])])
    rho_max = rho.max()
    scale = torch.exp(priorities.reshape(-1, 1, 1, 1) - rho_max)
    u = raw_masks * scale
    u_bg = bg_mask * torch.exp(rho.new_tensor(rho_bg) - rho_max)
    total = ordered_sum(u, dim=0) + u_bg  # (1,H,W)
    zero = total <= 0
    safe = torch.where(zero, torch.ones_like(total), total)
    weights = u / safe.unsqueeze(0)
    bg_weight = torch.where(zero, torch.ones_like(u_bg), u_bg / safe)
    return weights, bg_weight


def compose(
    slots: list[SlotDecodeResult],
    priorities: Tensor,
    bg_rgb: Tensor,
    bg_depth: Tensor,
    bg_mask: Tensor,
    rho_bg: float = 0.0,
) -> ComposedScene:
    """Blend slot rgb/depth with the background by priority-weighted masks."""
    raw_masks = torch.stack([s.raw_mask for s in slots])
    rgbs = torch.stack([s.rgb for s in slots])
    depths = torch.stack([s.depth for s in slots])
    weights, bg_weight = composition_weights(raw_masks, priorities, bg_mask, rho_bg)
    rgb = ordered_sum(weights * rgbs, dim=0) + bg_weight * bg_rgb
    depth = ordered_sum(weights * depths, dim=0) + bg_weight * bg_depth
    return ComposedScene(rgb=rgb, depth=depth, visibility=weights, background_weight=bg_weight)


def visibility_masks(slots: list[SlotDecodeResult], weights: Tensor) -> list[SlotDecodeResult]:
    """Attach visibility = raw_mask * composition weight (never above raw)."""
    return [s.with_visibility(s.raw_mask * weights[i]) for i, s in enumerate(slots)]


def prediction_error(predicted_rgb: Tensor, target_rgb: Tensor) -> Tensor:
    """Channel-mean absolute error per pixel, (1, H, W)."""
    if predicted_rgb.shape != target_rgb.shape:
        raise ValueError(
            f"shape mismatch: {tuple(predicted_rgb.shape)} vs {tuple(target_rgb.shape)}"
        )
    return (predicted_rgb - target_rgb).abs().mean(dim=0, keepdim=True)
