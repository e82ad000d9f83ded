"""Shared convolutional building blocks.

The encoder's blocks additionally accept a per-slot code that a small
hyper-network turns into depthwise-kernel residuals; with the hyper output
layer zero-initialized the block is exactly a plain ConvNeXt-style block.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def ordered_sum(x: Tensor, dim: int = 0) -> Tensor:
    """Order-canonical sum: sorting by value first makes the reduction's
    rounding independent of how the summands were ordered along `dim`."""
    return x.sort(dim=dim).values.sum(dim=dim)


def channel_resize(x: Tensor, out_channels: int) -> Tensor:
    """Deterministic channel copy (expand) or group-average (reduce)."""
    c = x.shape[1]
    if out_channels == c:
        return x
    if out_channels > c:
        reps = -(-out_channels // c)  # ceil
        return x.repeat_interleave(reps, dim=1)[:, :out_channels]
    if c % out_channels == 0:
        g = c // out_channels
        return x.reshape(x.shape[0], out_channels, g, *x.shape[2:]).mean(dim=2)
    # uneven reduction: average over evenly spaced channel groups
    idx = torch.linspace(0, c, out_channels + 1, device=x.device).round().long()
    return torch.stack(
        [x[:, idx[i] : max(idx[i] + 1, idx[i + 1])].mean(dim=1) for i in range(out_channels)],
        dim=1,
    )


class ResidualPatchEmbedding(nn.Module):
    """Strided patch conv plus an average-pool + channel-copy residual path."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, stride, stride=stride)
        self.pool = nn.AvgPool2d(stride)
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x) + channel_resize(self.pool(x), self.out_channels)


def phase_uniform_init_(conv: nn.ConvTranspose2d) -> nn.ConvTranspose2d:
    """Share weights across kernel positions so a constant input maps to a
    constant output at init (no checkerboard phase pattern before training)."""
    with torch.no_grad():
        conv.weight.copy_(conv.weight.mean(dim=(2, 3), keepdim=True).expand_as(conv.weight))
    return conv


class ResidualPatchUpscaling(nn.Module):
    """Strided transposed conv plus a nearest-upsample + channel-average path."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv = phase_uniform_init_(
            nn.ConvTranspose2d(in_channels, out_channels, stride, stride=stride)
        )
        self.stride = stride
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        up = F.interpolate(x, scale_factor=self.stride, mode="nearest")
        return self.conv(x) + channel_resize(up, self.out_channels)


def _pad_same(x: Tensor, kernel_size: int, padding_mode: str) -> Tensor:
    p = kernel_size // 2
    if p == 0:
        return x
    mode = "circular" if padding_mode == "circular" else "constant"
    return F.pad(x, (p, p, p, p), mode=mode)


class ConvNeXtBlock(nn.Module):
    """Depthwise conv -> channel norm -> inverted bottleneck, residual add."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int | None = None,
        kernel_size: int = 7,
        padding_mode: str = "zeros",
    ):
        super().__init__()
        out_channels = in_channels if out_channels is None else out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding_mode = padding_mode
        self.dw = nn.Conv2d(
            in_channels, in_channels, kernel_size, groups=in_channels, padding=0
        )
        self.norm = nn.GroupNorm(1, in_channels)
        self.pw1 = nn.Conv2d(in_channels, 4 * in_channels, 1)
        self.act = nn.SiLU()
        self.pw2 = nn.Conv2d(4 * in_channels, out_channels, 1)
        self.skip = (
            nn.Identity()
            if out_channels == in_channels
            else nn.Conv2d(in_channels, out_channels, 1)
        )

    def forward(self, x: Tensor) -> Tensor:
        y = self.dw(_pad_same(x, self.kernel_size, self.padding_mode))
        y = self.pw2(self.act(self.pw1(self.norm(y))))
        return self.skip(x) + y


class HyperConvNeXtBlock(nn.Module):
    """ConvNeXt-style block whose depthwise kernel gets per-slot residuals.

    A two-layer MLP maps the top-down code to additive kernel weights; its
    output layer starts at zero so a fresh block ignores the code entirely.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int | None = None,
        code_dim: int = 0,
        kernel_size: int = 7,
        padding_mode: str = "zeros",
        hyper_hidden: int | None = None,
    ):
        super().__init__()
        out_channels = in_channels if out_channels is None else out_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding_mode = padding_mode
        self.dw = nn.Conv2d(
            in_channels, in_channels, kernel_size, groups=in_channels, padding=0
        )
        self.norm = nn.GroupNorm(1, in_channels)
        self.pw1 = nn.Conv2d(in_channels, 4 * in_channels, 1)
        self.act = nn.SiLU()
        self.pw2 = nn.Conv2d(4 * in_channels, out_channels, 1)
        self.skip = (
            nn.Identity()
            if out_channels == in_channels
            else nn.Conv2d(in_channels, out_channels, 1)
        )
        self.code_dim = code_dim
        if code_dim > 0:
            hidden = hyper_hidden or max(8, in_channels)
            self.hyper = nn.Sequential(
                nn.Linear(code_dim, hidden),
                nn.SiLU(),
                nn.Linear(hidden, in_channels * kernel_size * kernel_size),
            )
            nn.init.zeros_(self.hyper[-1].weight)
            nn.init.zeros_(self.hyper[-1].bias)
        else:
            self.hyper = None

    def kernel_residual(self, code: Tensor) -> Tensor:
        """(K, C, 1, k, k) residual weights for a batch of codes."""
        if self.hyper is None:
            raise RuntimeError("block was built without a hyper-network")
        k = self.kernel_size
        return self.hyper(code).reshape(-1, self.in_channels, 1, k, k)

    def _dw_dynamic(self, x: Tensor, code: Tensor) -> Tensor:
        n, c, h, w = x.shape
        k = self.kernel_size
        weight = self.dw.weight.unsqueeze(0) + self.kernel_residual(code)  # (N,C,1,k,k)
        xp = _pad_same(x, k, self.padding_mode)
        out = F.conv2d(
            xp.reshape(1, n * c, *xp.shape[2:]),
            weight.reshape(n * c, 1, k, k),
            groups=n * c,
        )
        out = out.reshape(n, c, h, w)
        return out + self.dw.bias.reshape(1, c, 1, 1)

    def forward(self, x: Tensor, code: Tensor | None = None) -> Tensor:
        if code is None or self.hyper is None:
            y = self.dw(_pad_same(x, self.kernel_size, self.padding_mode))
        else:
            y = self._dw_dynamic(x, code)
        y = self.pw2(self.act(self.pw1(self.norm(y))))
        return self.skip(x) + y


def sinusoidal_grid(
    h: int, w: int, channels: int = 16, dtype=torch.float32, device=None
) -> Tensor:
    """Fixed positional embedding: sin/cos of the normalized grid, (C, h, w)."""
    if channels % 4 != 0:
        raise ValueError("sinusoidal grid channels must be divisible by 4")
    i = torch.arange(w, dtype=dtype, device=device)
    j = torch.arange(h, dtype=dtype, device=device)
    u = (-1.0 + (2.0 * i + 1.0) / w).reshape(1, w).expand(h, w)
    v = (-1.0 + (2.0 * j + 1.0) / h).reshape(h, 1).expand(h, w)
    planes = []
    for level in range(channels // 4):
        f = math.pi * (2.0**level)
        planes.extend([torch.sin(f * u), torch.cos(f * u), torch.sin(f * v), torch.cos(f * v)])
    return torch.stack(planes)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP over a (N, T, D) token batch."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.SiLU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention + MLP: queries attend to a key/value set."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.SiLU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, q: Tensor, kv: Tensor) -> Tensor:
        y = self.attn(self.norm_q(q), self.norm_kv(kv), self.norm_kv(kv), need_weights=False)[0]
        x = q + y
        return x + self.mlp(self.norm2(x))
