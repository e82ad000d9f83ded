"""Cascaded slot decoder: mask first, then depth, then rgb.

The mask decoder spatializes the mask segment with a gaussian heatmap on the
1/16-resolution grid. Depth and rgb run on the same grid, modulated by the
max-pooled mask so their content stays confined to the decoded outline; rgb
additionally re-encodes the decoded depth. Each trunk ends in a 16x learned
upsampling. Only the mask path needs re-running to refresh masks.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .blocks import ConvNeXtBlock, phase_uniform_init_, sinusoidal_grid
from .config import ModelConfig
from .core import SlotDecodeResult, SlotState
from .position import gaussian_map

PATCH = 16
PE_CHANNELS = 16


def _w(seg: int, div: int) -> int:
    return max(1, seg // div)


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        s = cfg.segment_width
        c1, c2, c3, c4 = _w(s, 2), _w(s, 4), _w(s, 8), _w(s, 2)
        self.net = nn.Sequential(
            nn.Conv2d(s, c1, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c2, c3, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c3, c4, 1),
            phase_uniform_init_(nn.ConvTranspose2d(c4, 1, PATCH, stride=PATCH)),
        )

    @staticmethod
    def modulation_grid(gm: Tensor, position: Tensor, h: int, w: int) -> Tensor:
        """Mask segment spatialized by the position gaussian, (K, S, h', w')."""
        grid = gaussian_map(position, h // PATCH, w // PATCH)  # (K,1,h',w')
        return gm.unsqueeze(-1).unsqueeze(-1) * grid

    def forward(self, gm: Tensor, position: Tensor, h: int, w: int) -> Tensor:
        x = self.modulation_grid(gm, position, h, w)
        return torch.sigmoid(self.net(x))


class _MaskEncoder(nn.Module):
    def __init__(self, seg: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, _w(seg, 2), PATCH, stride=PATCH),
            nn.SiLU(),
            nn.Conv2d(_w(seg, 2), _w(seg, 8), 1),
        )
        self.out_channels = _w(seg, 8)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class DepthDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        s = cfg.segment_width
        trunk = _w(s, 4)
        self.mask_encoder = _MaskEncoder(s)
        self.concat_channels = s + self.mask_encoder.out_channels + PE_CHANNELS
        self.inproj = nn.Conv2d(self.concat_channels, trunk, 1)
        self.blocks = nn.Sequential(
            *[ConvNeXtBlock(trunk, kernel_size=cfg.kernel_size, padding_mode=cfg.padding_mode)
              for _ in range(3)]
        )
        self.expand = nn.Conv2d(trunk, s, 1)
        self.act = nn.SiLU()
        self.up = phase_uniform_init_(nn.ConvTranspose2d(s, 1, PATCH, stride=PATCH))
        self.pool = nn.MaxPool2d(PATCH)

    def forward(self, gd: Tensor, raw_mask: Tensor) -> Tensor:
        k, _, h, w = raw_mask.shape
        pooled = self.pool(raw_mask)  # (K,1,h',w')
        modulated = gd.unsqueeze(-1).unsqueeze(-1) * pooled
        encoded = self.mask_encoder(raw_mask)
        pe = sinusoidal_grid(
            h // PATCH, w // PATCH, PE_CHANNELS, dtype=gd.dtype, device=gd.device
        )
        pe = pe.unsqueeze(0).expand(k, *pe.shape)
        x = torch.cat([modulated, encoded, pe], dim=1)
        x = self.blocks(self.inproj(x))
        return torch.sigmoid(self.up(self.act(self.expand(x))))


class RGBDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        s = cfg.segment_width
        trunk = _w(s, 2)
        self.mask_encoder = _MaskEncoder(s)
        self.depth_encoder = nn.Sequential(
            nn.Conv2d(1, s, PATCH, stride=PATCH),
            nn.SiLU(),
            nn.Conv2d(s, _w(s, 4), 1),
        )
        self.concat_channels = s + self.mask_encoder.out_channels + _w(s, 4) + PE_CHANNELS
        self.inproj = nn.Conv2d(self.concat_channels, trunk, 1)
        self.blocks = nn.Sequential(
            *[ConvNeXtBlock(trunk, kernel_size=cfg.kernel_size, padding_mode=cfg.padding_mode)
              for _ in range(5)]
        )
        self.expand = nn.Conv2d(trunk, 2 * s, 1)
        self.act = nn.SiLU()
        self.up = phase_uniform_init_(nn.ConvTranspose2d(2 * s, 3, PATCH, stride=PATCH))
        self.pool = nn.MaxPool2d(PATCH)

    def forward(self, gr: Tensor, raw_mask: Tensor, depth: Tensor) -> Tensor:
        k, _, h, w = raw_mask.shape
        pooled = self.pool(raw_mask)
        modulated = gr.unsqueeze(-1).unsqueeze(-1) * pooled
        encoded = self.mask_encoder(raw_mask)
        enc_depth = self.depth_encoder(depth)
        pe = sinusoidal_grid(
            h // PATCH, w // PATCH, PE_CHANNELS, dtype=gr.dtype, device=gr.device
        )
        pe = pe.unsqueeze(0).expand(k, *pe.shape)
        x = torch.cat([modulated, encoded, enc_depth, pe], dim=1)
        x = self.blocks(self.inproj(x))
        return torch.sigmoid(self.up(self.act(self.expand(x))))


class SlotDecoder(nn.Module):
    """Full cascade over a batch of slots, plus the mask-only fast path."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.mask_decoder = MaskDecoder(cfg)
        self.depth_decoder = DepthDecoder(cfg)
        self.rgb_decoder = RGBDecoder(cfg)

    def _split(self, gestalt: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        s = self.cfg.segment_width
        return gestalt[:, :s], gestalt[:, s : 2 * s], gestalt[:, 2 * s :]

    def decode_mask(
        self, gestalt: Tensor, position: Tensor, occupied: Tensor | None = None
    ) -> Tensor:
        """Mask-only fast path. gestalt (K, 3S), position (K, 4) -> (K, 1, H, W)."""
        gm, _, _ = self._split(gestalt)
        out = self.mask_decoder(gm, position, self.cfg.image_h, self.cfg.image_w)
        if occupied is not None:
            out = out * occupied.reshape(-1, 1, 1, 1).to(out.dtype)
        return out

    def forward(
        self, gestalt: Tensor, position: Tensor, occupied: Tensor | None = None
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Cascade: returns (raw_mask, depth, rgb, position_map), each (K, ., H, W)."""
        h, w = self.cfg.image_h, self.cfg.image_w
        gm, gd, gr = self._split(gestalt)
        raw_mask = self.mask_decoder(gm, position, h, w)
        depth = self.depth_decoder(gd, raw_mask)
        rgb = self.rgb_decoder(gr, raw_mask, depth)
        pos_map = gaussian_map(position, h, w)
        if occupied is not None:
            occ = occupied.reshape(-1, 1, 1, 1).to(raw_mask.dtype)
            raw_mask = raw_mask * occ
            depth = depth * occ
            rgb = rgb * occ
            pos_map = pos_map * occ
        return raw_mask, depth, rgb, pos_map


def decode_slot(decoder: SlotDecoder, state: SlotState) -> SlotDecodeResult:
    """Decode one slot into raw outputs; visibility is set by the composer."""
    h, w = decoder.cfg.image_h, decoder.cfg.image_w
    if not state.occupied:
        return SlotDecodeResult.empty(h, w, dtype=state.gestalt.dtype)
    occ = torch.ones(1, dtype=state.gestalt.dtype)
    raw_mask, depth, rgb, pos_map = decoder(
        state.gestalt.unsqueeze(0), state.position.unsqueeze(0), occ
    )
    return SlotDecodeResult(
        raw_mask=raw_mask[0],
        visibility_mask=torch.zeros_like(raw_mask[0]),
        depth=depth[0],
        rgb=rgb[0],
        position_map=pos_map[0],
    )


def decode_slots(decoder: SlotDecoder, states: list[SlotState]) -> list[SlotDecodeResult]:
    from .core import stack_states

    g, p, occ, _ = stack_states(states)
    raw_mask, depth, rgb, pos_map = decoder(g, p, occ)
    return [
        SlotDecodeResult(
            raw_mask=raw_mask[i],
            visibility_mask=torch.zeros_like(raw_mask[i]),
            depth=depth[i],
            rgb=rgb[i],
            position_map=pos_map[i],
        )
        for i in range(len(states))
    ]
