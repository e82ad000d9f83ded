"""Shared data model: slot states, frame packets, and decode results.

All tensors are channel-first torch tensors. Types here are immutable value
objects; modules never mutate them in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
from torch import Tensor

POSITION_DIM = 4  # (x, y, size_sigma, priority_rho)
AUX_DIM = 2  # (occupancy flag, last percept-gate opening)


@dataclass(frozen=True)
class GestaltCode:
    """Per-slot appearance code: three equal-width segments (mask/depth/rgb)."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError(f"gestalt must be 1-D, got shape {tuple(self.values.shape)}")
        if self.values.numel() % 3 != 0:
            raise ValueError(f"gestalt length {self.values.numel()} not divisible by 3")
        if not torch.isfinite(self.values).all():
            raise ValueError("gestalt contains non-finite values")

    @property
    def segment_width(self) -> int:
        return self.values.numel() // 3

    @property
    def mask_segment(self) -> Tensor:
        return self.values[: self.segment_width]

    @property
    def depth_segment(self) -> Tensor:
        return self.values[self.segment_width : 2 * self.segment_width]

    @property
    def rgb_segment(self) -> Tensor:
        return self.values[2 * self.segment_width :]

    @classmethod
    def from_segments(cls, mask: Tensor, depth: Tensor, rgb: Tensor) -> "GestaltCode":
        if not (mask.numel() == depth.numel() == rgb.numel()):
            raise ValueError("gestalt segments must have equal width")
        return cls(torch.cat([mask, depth, rgb]))

    @classmethod
    def zeros(cls, segment_width: int, dtype=torch.float32) -> "GestaltCode":
        return cls(torch.zeros(3 * segment_width, dtype=dtype))


@dataclass(frozen=True)
class PositionCode:
    """Slot position: image-normalized (x, y) in [-1, 1], size, priority logit."""

    x: float
    y: float
    size_sigma: float
    priority_rho: float = 0.0

    def clamped(self, sigma_min: float = 1e-3) -> "PositionCode":
        return PositionCode(
            x=min(1.0, max(-1.0, self.x)),
            y=min(1.0, max(-1.0, self.y)),
            size_sigma=max(sigma_min, self.size_sigma),
            priority_rho=self.priority_rho,
        )

    def as_tensor(self, dtype=torch.float32) -> Tensor:
        return torch.tensor(
            [self.x, self.y, self.size_sigma, self.priority_rho], dtype=dtype
        )

    @classmethod
    def from_tensor(cls, t: Tensor) -> "PositionCode":
        if t.numel() != POSITION_DIM:
            raise ValueError(f"position tensor must have {POSITION_DIM} entries")
        vals = t.detach().reshape(-1).tolist()
        return cls(x=vals[0], y=vals[1], size_sigma=vals[2], priority_rho=vals[3])


@dataclass(frozen=True)
class SlotState:
    """One slot: gestalt tensor (3 * segment_width), position tensor (4,)."""

    gestalt: Tensor
    position: Tensor
    occupied: bool = True
    last_alpha: float = 0.0

    def __post_init__(self):
        if self.gestalt.ndim != 1 or self.gestalt.numel() % 3 != 0:
            raise ValueError(f"bad gestalt shape {tuple(self.gestalt.shape)}")
        if self.position.numel() != POSITION_DIM:
            raise ValueError(f"position must have {POSITION_DIM} entries")

    @property
    def segment_width(self) -> int:
        return self.gestalt.numel() // 3

    @property
    def gestalt_code(self) -> GestaltCode:
        return GestaltCode(self.gestalt)

    @property
    def position_code(self) -> PositionCode:
        return PositionCode.from_tensor(self.position)

    def detached(self) -> "SlotState":
        return SlotState(
            gestalt=self.gestalt.detach(),
            position=self.position.detach(),
            occupied=self.occupied,
            last_alpha=self.last_alpha,
        )

    @classmethod
    def empty(cls, segment_width: int, dtype=torch.float32) -> "SlotState":
        return cls(
            gestalt=torch.zeros(3 * segment_width, dtype=dtype),
            position=torch.zeros(POSITION_DIM, dtype=dtype),
            occupied=False,
            last_alpha=0.0,
        )


def pack_slot_state(state: SlotState) -> Tensor:
    """Flatten a slot state to gestalt + position + (occupancy, last alpha)."""
    aux = torch.tensor(
        [1.0 if state.occupied else 0.0, state.last_alpha],
        dtype=state.gestalt.dtype,
    )
    return torch.cat([state.gestalt, state.position.to(state.gestalt.dtype), aux])


def unpack_slot_state(vec: Tensor, segment_width: int) -> SlotState:
    expected = 3 * segment_width + POSITION_DIM + AUX_DIM
    if vec.numel() != expected:
        raise ValueError(f"packed state length {vec.numel()} != expected {expected}")
    g = vec[: 3 * segment_width]
    p = vec[3 * segment_width : 3 * segment_width + POSITION_DIM]
    occ = bool(vec[-2].item() > 0.5)
    alpha = float(vec[-1].item())
    return SlotState(gestalt=g, position=p, occupied=occ, last_alpha=alpha)


def stack_states(states: list[SlotState]) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Stack K slot states into (gestalt (K,3S), position (K,4), occ (K,), alpha (K,))."""
    g = torch.stack([s.gestalt for s in states])
    p = torch.stack([s.position for s in states])
    occ = torch.tensor([1.0 if s.occupied else 0.0 for s in states], dtype=g.dtype)
    alpha = torch.tensor([s.last_alpha for s in states], dtype=g.dtype)
    return g, p, occ, alpha


def states_from_stacked(
    gestalt: Tensor, position: Tensor, occupied, last_alpha
) -> list[SlotState]:
    out = []
    for k in range(gestalt.shape[0]):
        occ = occupied[k] if not torch.is_tensor(occupied) else bool(occupied[k] > 0.5)
        alpha = last_alpha[k]
        if torch.is_tensor(alpha):
            alpha = float(alpha.item())
        out.append(
            SlotState(
                gestalt=gestalt[k], position=position[k], occupied=occ, last_alpha=alpha
            )
        )
    return out


def _check_plane(t: Tensor, channels: int, h: int, w: int, name: str):
    if t.shape != (channels, h, w):
        raise ValueError(f"{name}: expected shape {(channels, h, w)}, got {tuple(t.shape)}")


@dataclass(frozen=True)
class FramePacket:
    """One time step's observation planes plus derived encoder inputs."""

    rgb: Tensor  # (3, H, W) in [0, 1]
    depth: Tensor | None = None  # (1, H, W) in (0, 1), scene-relative
    instance_masks: Tensor | None = None  # (H, W) int64, 0 = background
    prediction_error: Tensor | None = None  # (1, H, W) >= 0
    depth_error: Tensor | None = None  # (1, H, W) >= 0
    background_mask: Tensor | None = None  # (1, H, W) in [0, 1]
    uncertainty: Tensor | None = None  # (1, H, W) in [0, 1]

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb: expected (3, H, W), got {tuple(self.rgb.shape)}")
        h, w = self.rgb.shape[1], self.rgb.shape[2]
        if h % 16 != 0 or w % 16 != 0:
            raise ValueError(f"frame size {h}x{w} not divisible by 16")
        if self.depth is not None:
            _check_plane(self.depth, 1, h, w, "depth")
        if self.instance_masks is not None and self.instance_masks.shape != (h, w):
            raise ValueError(
                f"instance_masks: expected {(h, w)}, got {tuple(self.instance_masks.shape)}"
            )
        for name in ("prediction_error", "depth_error", "background_mask", "uncertainty"):
            t = getattr(self, name)
            if t is not None:
                _check_plane(t, 1, h, w, name)

    @property
    def h(self) -> int:
        return self.rgb.shape[1]

    @property
    def w(self) -> int:
        return self.rgb.shape[2]

    def plane(self, name: str) -> Tensor:
        """Return the named derived plane, defaulting absent ones sensibly."""
        t = getattr(self, name)
        if t is not None:
            return t
        if name == "background_mask":
            return torch.ones(1, self.h, self.w, dtype=self.rgb.dtype)
        return torch.zeros(1, self.h, self.w, dtype=self.rgb.dtype)

    def with_updates(self, **kwargs) -> "FramePacket":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class SlotDecodeResult:
    """Raw per-slot decoder outputs; visibility is filled in by the composer."""

    raw_mask: Tensor  # (1, H, W) amodal mask in [0, 1]
    visibility_mask: Tensor  # (1, H, W) <= raw_mask
    depth: Tensor  # (1, H, W) in [0, 1]
    rgb: Tensor  # (3, H, W) in [0, 1]
    position_map: Tensor  # (1, H, W) gaussian

    def with_visibility(self, visibility: Tensor) -> "SlotDecodeResult":
        return replace(self, visibility_mask=visibility)

    @classmethod
    def empty(cls, h: int, w: int, dtype=torch.float32) -> "SlotDecodeResult":
        z1 = torch.zeros(1, h, w, dtype=dtype)
        return cls(
            raw_mask=z1,
            visibility_mask=z1.clone(),
            depth=z1.clone(),
            rgb=torch.zeros(3, h, w, dtype=dtype),
            position_map=z1.clone(),
        )
