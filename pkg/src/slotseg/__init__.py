"""Slot-based scene segmentation: encoder with top-down kernel residuals,
cascaded mask/depth/rgb decoding, gated recurrent dynamics, and a learned
background model, plus the synthetic data and metrics to exercise it all."""

from .config import (
    ConfigError,
    LossWeights,
    ModelConfig,
    Schedule,
    desk_config,
    gradcheck_config,
    paper_config,
    validate_config,
)
from .core import (
    FramePacket,
    GestaltCode,
    PositionCode,
    SlotDecodeResult,
    SlotState,
    pack_slot_state,
    unpack_slot_state,
)

__all__ = [
    "ConfigError",
    "LossWeights",
    "ModelConfig",
    "Schedule",
    "desk_config",
    "gradcheck_config",
    "paper_config",
    "validate_config",
    "FramePacket",
    "GestaltCode",
    "PositionCode",
    "SlotDecodeResult",
    "SlotState",
    "pack_slot_state",
    "unpack_slot_state",
]
