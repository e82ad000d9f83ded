"""Position code <-> 2D gaussian heatmaps, plus the encoder's position readout.

Conventions: image coordinates are normalized to [-1, 1] in both axes, pixel
centers at -1 + (2i + 1) / n. Heatmaps are peak-normalized (value 1 when the
code sits exactly on a pixel center), matching their multiplicative use as
attention masks.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .core import PositionCode


def pixel_centers(n: int, dtype=torch.float32, device=None) -> Tensor:
    """Normalized center coordinates of n pixels along one axis."""
    i = torch.arange(n, dtype=dtype, device=device)
    return -1.0 + (2.0 * i + 1.0) / n


def coordinate_grid(h: int, w: int, dtype=torch.float32, device=None) -> tuple[Tensor, Tensor]:
    """(u, v) grids of shape (h, w): u varies along width, v along height."""
    u = pixel_centers(w, dtype, device).reshape(1, w).expand(h, w)
    v = pixel_centers(h, dtype, device).reshape(h, 1).expand(h, w)
    return u, v


def gaussian_map(position: Tensor, h: int, w: int) -> Tensor:
    """Isotropic gaussian heatmaps from position rows, peak-normalized.

    position: (..., 4) with columns (x, y, sigma, rho); rho is ignored.
    Returns (..., 1, h, w) with value exactly 1 at the pixel nearest (x, y):
    the squared distance is shifted by its grid minimum before exponentiating,
    which also keeps coarse grids and tiny sigmas away from underflow.
    """
    squeeze = position.ndim == 1
    pos = position.reshape(-1, position.shape[-1])
    x = pos[:, 0].reshape(-1, 1, 1, 1)
    y = pos[:, 1].reshape(-1, 1, 1, 1)
    sigma = pos[:, 2].reshape(-1, 1, 1, 1).clamp_min(1e-6)
    u, v = coordinate_grid(h, w, dtype=position.dtype, device=position.device)
    u = u.reshape(1, 1, h, w)
    v = v.reshape(1, 1, h, w)
    d2 = (u - x) ** 2 + (v - y) ** 2
    d2_min = d2.amin(dim=(2, 3), keepdim=True)
    out = torch.exp(-(d2 - d2_min) / (2.0 * sigma**2))
    if squeeze:
        return out[0]
    return out.reshape(*position.shape[:-1], 1, h, w)


def position_to_gaussian(p: PositionCode, h: int, w: int, dtype=torch.float32) -> Tensor:
    """Heatmap (1, h, w) for a single position code."""
    if h < 1 or w < 1:
        raise ValueError(f"heatmap size must be >= 1, got {h}x{w}")
    return gaussian_map(p.as_tensor(dtype=dtype), h, w)


def features_to_position(
    feature_map: Tensor, sigma_min: float = 1e-3, sigma_scale: float = 2.0
) -> Tensor:
    """Spatial-softmax readout of a 4-channel map into position codes.

    feature_map: (4, h, w) or (K, 4, h, w) with channels
    (x attention logits, y attention logits, size logits, priority).
    Attention = softmax over pixels of channel0 + channel1; x, y are the
    attended coordinates, sigma = sigma_min + sigma_scale * sigmoid(attended
    ch2) (bounded: an unbounded size readout diverges, see notes), rho =
    attended ch3. An all--inf attention map falls back to uniform weights.
    """
    squeeze = feature_map.ndim == 3
    fmap = feature_map.reshape(-1, *feature_map.shape[-3:])
    if fmap.shape[1] != 4:
        raise ValueError(f"expected 4 channels, got {fmap.shape[1]}")
    k, _, h, w = fmap.shape
    logits = (fmap[:, 0] + fmap[:, 1]).reshape(k, h * w)
    finite = torch.isfinite(logits).any(dim=1, keepdim=True)
    safe_logits = torch.where(
        finite, logits.nan_to_num(nan=0.0, neginf=-1e30), torch.zeros_like(logits)
    )
    attn = torch.softmax(safe_logits, dim=1)
    u, v = coordinate_grid(h, w, dtype=fmap.dtype, device=fmap.device)
    x = (attn * u.reshape(1, -1)).sum(dim=1)
    y = (attn * v.reshape(1, -1)).sum(dim=1)
    size_raw = (attn * fmap[:, 2].reshape(k, -1)).sum(dim=1)
    sigma = sigma_min + sigma_scale * torch.sigmoid(size_raw)
    rho = (attn * fmap[:, 3].reshape(k, -1)).sum(dim=1)
    out = torch.stack([x, y, sigma, rho], dim=1)
    if squeeze:
        return out[0]
    return out.reshape(*feature_map.shape[:-3], 4)


def position_pool(feature_map: Tensor, position: Tensor) -> Tensor:
    """Gaussian-weighted average of features at `position`.

    feature_map: (C, h, w) or (K, C, h, w); position: (4,) or (K, 4).
    Weights are the position heatmap normalized to sum 1.
    """
    squeeze = feature_map.ndim == 3
    fmap = feature_map.reshape(-1, *feature_map.shape[-3:])
    pos = position.reshape(-1, position.shape[-1])
    k, c, h, w = fmap.shape
    weights = gaussian_map(pos, h, w)  # (K, 1, h, w)
    weights = weights / weights.sum(dim=(2, 3), keepdim=True)
    pooled = (fmap * weights).sum(dim=(2, 3))
    if squeeze:
        return pooled[0]
    return pooled
