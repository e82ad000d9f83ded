"""Slot-wise encoder: shared weights, per-slot inputs, top-down kernel residuals.

Each slot sees the common planes (frame, errors, uncertainty, background mask)
stacked with its own feedback planes (previous decode outputs and gaussian
position). The predicted gestalt code additionally modulates every depthwise
kernel through the blocks' hyper-networks (the inner feedback loop).
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .blocks import HyperConvNeXtBlock, ResidualPatchEmbedding, ordered_sum
from .config import ModelConfig
from .core import FramePacket, SlotDecodeResult, SlotState
from .position import features_to_position, gaussian_map, position_pool


def summed_other_masks(visibility: Tensor) -> Tensor:
    """Per slot, clamp(sum of the other slots' visibility masks, 0, 1).

    visibility: (K, 1, H, W) -> (K, 1, H, W).
    """
    total = ordered_sum(visibility, dim=0).unsqueeze(0)
    return (total - visibility).clamp(0.0, 1.0)


def build_common_planes(frame: FramePacket, cfg: ModelConfig) -> Tensor:
    planes = [frame.rgb]
    if cfg.depth_input:
        if frame.depth is None:
            raise ValueError("config has depth_input=True but frame has no depth")
        planes.append(frame.depth)
    planes.append(frame.plane("prediction_error"))
    if cfg.depth_input:
        planes.append(frame.plane("depth_error"))
    planes.append(frame.plane("uncertainty"))
    planes.append(frame.plane("background_mask"))
    return torch.cat(planes, dim=0)


def build_slot_planes(
    frame: FramePacket,
    states: list[SlotState],
    decodes: list[SlotDecodeResult] | None,
    cfg: ModelConfig,
) -> Tensor:
    """Per-slot feedback planes (K, Cs, H, W).

    Unoccupied slots get all-zero planes. With outer feedback disabled every
    plane except the gaussian position is zeroed.
    """
    h, w = frame.h, frame.w
    k = len(states)
    dtype = frame.rgb.dtype
    if decodes is not None and len(decodes) != k:
        raise ValueError(f"expected {k} decode results, got {len(decodes)}")
    vis = (
        torch.stack([d.visibility_mask for d in decodes])
        if decodes is not None
        else torch.zeros(k, 1, h, w, dtype=dtype)
    )
    others = summed_other_masks(vis)
    rows = []
    for i, state in enumerate(states):
        if not state.occupied:
            rows.append(torch.zeros(cfg.slot_planes(), h, w, dtype=dtype))
            continue
        q = gaussian_map(state.position.to(dtype), h, w)
        if decodes is None or not cfg.outer_feedback:
            zero = torch.zeros(1, h, w, dtype=dtype)
            planes = [torch.zeros(3, h, w, dtype=dtype)]
            if cfg.depth_input:
                planes.append(zero)
            planes.extend([zero, zero, zero, q])
        else:
            d = decodes[i]
            planes = [d.rgb]
            if cfg.depth_input:
                planes.append(d.depth)
            planes.extend([d.raw_mask, d.visibility_mask, others[i], q])
        rows.append(torch.cat(planes, dim=0))
    return torch.stack(rows)


class SlotEncoder(nn.Module):
    """Maps stacked input planes to observed gestalt and position codes."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        _, w1, w2, w3, w4 = cfg.encoder_widths
        seg = cfg.segment_width
        code = cfg.gestalt_width
        k = cfg.kernel_size
        pm = cfg.padding_mode

        def block(cin, cout=None):
            return HyperConvNeXtBlock(cin, cout, code_dim=code, kernel_size=k, padding_mode=pm)

        self.stem = ResidualPatchEmbedding(cfg.input_planes(), w1, 4)
        self.base = nn.ModuleList(
            [block(w1), ResidualPatchEmbedding(w1, w2, 2), block(w2),
             ResidualPatchEmbedding(w2, w3, 2), block(w3), block(w3), block(w3)]
        )
        self.position_head = nn.ModuleList([block(w3), block(w3), block(w3, 4)])
        self.gestalt_base = nn.ModuleList([block(w3), block(w3)])
        heads = {}
        for name in ("mask", "depth", "rgb"):
            heads[name] = nn.ModuleList(
                [ResidualPatchEmbedding(w3, w4, 2),
                 block(w4), block(w4), block(w4), block(w4, seg)]
            )
        self.heads = nn.ModuleDict(heads)

    def _run(self, blocks: nn.ModuleList, x: Tensor, code: Tensor | None) -> Tensor:
        for mod in blocks:
            if isinstance(mod, HyperConvNeXtBlock):
                x = mod(x, code)
            else:
                x = mod(x)
        return x

    def forward(
        self, planes: Tensor, top_down_gestalt: Tensor | None = None
    ) -> tuple[Tensor, Tensor]:
        """planes: (K, C, H, W); top_down_gestalt: (K, 3S) or None.

        Returns (gestalt (K, 3S) in (0, 1), position (K, 4)).
        """
        code = top_down_gestalt if self.cfg.inner_feedback else None
        if code is not None and code.shape[0] != planes.shape[0]:
            raise ValueError(
                f"top-down code count {code.shape[0]} != slot count {planes.shape[0]}"
            )
        x = self.stem(planes)
        x = self._run(self.base, x, code)
        pos_map = self._run(self.position_head, x, code)
        position = features_to_position(
            pos_map, sigma_min=self.cfg.sigma_min, sigma_scale=self.cfg.sigma_scale
        )
        g = self._run(self.gestalt_base, x, code)
        pooled = [
            position_pool(self._run(self.heads[name], g, code), position)
            for name in ("mask", "depth", "rgb")
        ]
        gestalt = torch.sigmoid(torch.cat(pooled, dim=1))
        return gestalt, position


def encode_all_slots(
    encoder: SlotEncoder,
    frame: FramePacket,
    prior: list[SlotState],
    decode_feedback: list[SlotDecodeResult] | None,
    cfg: ModelConfig,
    top_down_gestalt: Tensor | None = None,
) -> list[tuple[Tensor, Tensor]]:
    """Shared-weight encoding of every slot; returns [(gestalt, position)]."""
    if len(prior) != cfg.num_slots:
        raise ValueError(f"expected {cfg.num_slots} slots, got {len(prior)}")
    common = build_common_planes(frame, cfg)
    slot_planes = build_slot_planes(frame, prior, decode_feedback, cfg)
    k = len(prior)
    planes = torch.cat([common.unsqueeze(0).expand(k, *common.shape), slot_planes], dim=1)
    if top_down_gestalt is None:
        top_down_gestalt = torch.stack([s.gestalt for s in prior])
    gestalt, position = encoder(planes, top_down_gestalt)
    return [(gestalt[i], position[i]) for i in range(k)]


def encode_slot(
    encoder: SlotEncoder,
    frame: FramePacket,
    state: SlotState,
    decode: SlotDecodeResult | None,
    cfg: ModelConfig,
) -> tuple[Tensor, Tensor]:
    """Single-slot encode with the other-slot mask sum fixed at zero."""
    common = build_common_planes(frame, cfg)
    slot_planes = build_slot_planes(frame, [state], [decode] if decode else None, cfg)
    planes = torch.cat([common.unsqueeze(0), slot_planes], dim=1)
    gestalt, position = encoder(planes, state.gestalt.unsqueeze(0))
    return gestalt[0], position[0]
