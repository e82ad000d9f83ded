"""Model, schedule, and loss configuration.

All tunable numbers live here so that the rest of the code base reads its
constants from one validated record. Presets cover the full-scale wiring
(`paper_config`) and small CPU-friendly models used by the test suite.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, replace


class ConfigError(ValueError):
    """Raised with the name of the first violated config field."""


VALID_INIT_STRATEGIES = ("rnd", "reg", "seg")


@dataclass(frozen=True)
class ModelConfig:
    # resolution / capacity
    image_h: int = 64
    image_w: int = 64
    num_slots: int = 4
    segment_width: int = 16
    # encoder_widths = (nominal input planes, stage1, stage2, stage3, head)
    encoder_widths: tuple[int, ...] = (16, 8, 16, 32, 32)
    predictor_width: int = 64

    # feature flags
    inner_feedback: bool = True
    outer_feedback: bool = True
    depth_input: bool = True
    init_strategy: str = "reg"

    # schedule knobs (§ mirrored into Schedule)
    warmup_train: int = 3
    warmup_infer: int = 10
    bptt_len: int = 2
    image_cycles: int = 3
    image_infer_cycles: int = 10
    seeds: int = 5

    # architectural details
    kernel_size: int = 7
    padding_mode: str = "zeros"
    sigma_min: float = 1e-3
    sigma_scale: float = 2.0
    attention_heads: int = 0  # 0 = predictor_width // 128, at least 1
    gatel0rd_layers: int = 5
    background_widths: tuple[int, ...] = (16, 32, 64, 128)
    background_token_width: int = 64
    seg_widths: tuple[int, ...] = (16, 32, 48, 64)
    seg_instance_channels: int = 16
    seg_head_width: int = 32

    # slot initialization
    sigma_init: float = 0.1
    theta_dup: float = 0.7
    p_kill: float = 0.5
    lambda_pos: float = 0.2
    w_pos: float = 0.5
    w_gestalt: float = 0.5
    min_area_frac: float = 0.001
    jitter_std: float = 0.1

    # background module
    mask_patch_threshold: float = 0.3

    # percept gate / predictor
    gate_noise_std: float = 0.1
    gate_q: float = 0.5

    # optimization
    learning_rate: float = 2e-3
    freeze_background: bool = True

    @property
    def gestalt_width(self) -> int:
        return 3 * self.segment_width

    @property
    def position_dim(self) -> int:
        return 4

    @property
    def aux_dim(self) -> int:
        # occupancy flag + last percept-gate opening
        return 2

    @property
    def packed_state_dim(self) -> int:
        return self.gestalt_width + self.position_dim + self.aux_dim

    @property
    def gate_input_dim(self) -> int:
        state = self.gestalt_width + self.position_dim
        return 2 * state + self.position_dim + self.aux_dim

    @property
    def heads(self) -> int:
        if self.attention_heads > 0:
            return self.attention_heads
        return max(1, self.predictor_width // 128)

    def common_planes(self) -> int:
        # rgb + rgb prediction error + uncertainty + background mask
        planes = 3 + 1 + 1 + 1
        if self.depth_input:
            planes += 2  # depth + depth prediction error
        return planes

    def slot_planes(self) -> int:
        # slot rgb, amodal mask, visibility mask, summed other masks, gaussian
        planes = 3 + 1 + 1 + 1 + 1
        if self.depth_input:
            planes += 1  # slot depth
        return planes

    def input_planes(self) -> int:
        return self.common_planes() + self.slot_planes()


@dataclass(frozen=True)
class Schedule:
    warmup_train: int = 3
    bptt_len: int = 2
    image_cycles: int = 3
    warmup_infer: int = 10
    image_infer_cycles: int = 10

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "Schedule":
        return cls(
            warmup_train=cfg.warmup_train,
            bptt_len=cfg.bptt_len,
            image_cycles=cfg.image_cycles,
            warmup_infer=cfg.warmup_infer,
            image_infer_cycles=cfg.image_infer_cycles,
        )


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    depth: float = 1.0
    mask: float = 1.0
    position: float = 0.1
    gate_l0: float = 0.01


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Return cfg unchanged if consistent, else raise ConfigError naming the field."""
    if cfg.image_h <= 0 or cfg.image_h % 16 != 0:
        raise ConfigError(f"image_h: {cfg.image_h} not divisible by 16")
    if cfg.image_w <= 0 or cfg.image_w % 16 != 0:
        raise ConfigError(f"image_w: {cfg.image_w} not divisible by 16")
    if cfg.num_slots < 1:
        raise ConfigError(f"num_slots: must be >= 1, got {cfg.num_slots}")
    if cfg.segment_width < 1:
        raise ConfigError(f"segment_width: must be >= 1, got {cfg.segment_width}")
    if len(cfg.encoder_widths) != 5:
        raise ConfigError(
            f"encoder_widths: expected 5 entries (input, 3 stages, head), got {len(cfg.encoder_widths)}"
        )
    if any(w < 1 for w in cfg.encoder_widths):
        raise ConfigError(f"encoder_widths: all entries must be >= 1, got {cfg.encoder_widths}")
    if cfg.predictor_width < 1:
        raise ConfigError(f"predictor_width: must be >= 1, got {cfg.predictor_width}")
    if cfg.init_strategy not in VALID_INIT_STRATEGIES:
        raise ConfigError(
            f"init_strategy: {cfg.init_strategy!r} not one of {VALID_INIT_STRATEGIES}"
        )
    if cfg.warmup_train < 0:
        raise ConfigError(f"warmup_train: must be >= 0, got {cfg.warmup_train}")
    if cfg.warmup_infer < 0:
        raise ConfigError(f"warmup_infer: must be >= 0, got {cfg.warmup_infer}")
    if cfg.bptt_len < 1:
        raise ConfigError(f"bptt_len: must be >= 1, got {cfg.bptt_len}")
    if cfg.kernel_size < 1 or cfg.kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size: must be odd and >= 1, got {cfg.kernel_size}")
    if cfg.padding_mode not in ("zeros", "circular"):
        raise ConfigError(f"padding_mode: {cfg.padding_mode!r} not one of ('zeros', 'circular')")
    if cfg.sigma_min <= 0:
        raise ConfigError(f"sigma_min: must be > 0, got {cfg.sigma_min}")
    if cfg.sigma_scale <= 0:
        raise ConfigError(f"sigma_scale: must be > 0, got {cfg.sigma_scale}")
    if cfg.sigma_init <= 0:
        raise ConfigError(f"sigma_init: must be > 0, got {cfg.sigma_init}")
    if len(cfg.background_widths) != 4 or any(w < 1 for w in cfg.background_widths):
        raise ConfigError(f"background_widths: expected 4 positive entries, got {cfg.background_widths}")
    if len(cfg.seg_widths) != 4 or any(w < 1 for w in cfg.seg_widths):
        raise ConfigError(f"seg_widths: expected 4 positive entries, got {cfg.seg_widths}")
    if cfg.gatel0rd_layers < 1:
        raise ConfigError(f"gatel0rd_layers: must be >= 1, got {cfg.gatel0rd_layers}")
    if not 0.0 < cfg.gate_q <= 1.0:
        raise ConfigError(f"gate_q: must be in (0, 1], got {cfg.gate_q}")
    if not 0.0 <= cfg.p_kill <= 1.0:
        raise ConfigError(f"p_kill: must be in [0, 1], got {cfg.p_kill}")
    if not 0.0 <= cfg.mask_patch_threshold <= 1.0:
        raise ConfigError(
            f"mask_patch_threshold: must be in [0, 1], got {cfg.mask_patch_threshold}"
        )
    if cfg.learning_rate <= 0:
        raise ConfigError(f"learning_rate: must be > 0, got {cfg.learning_rate}")
    return cfg


def paper_config() -> ModelConfig:
    """Full-scale wiring: every width matches the reference layer tables."""
    return ModelConfig(
        image_h=256,
        image_w=256,
        num_slots=6,
        segment_width=256,
        encoder_widths=(16, 32, 64, 128, 256),
        predictor_width=1024,
        kernel_size=7,
        background_widths=(16, 32, 64, 128),
        background_token_width=64,
        seg_widths=(64, 128, 256, 512),
    )


def desk_config() -> ModelConfig:
    """Default small model: trains on CPU in minutes, same wiring shape."""
    return ModelConfig()


def gradcheck_config() -> ModelConfig:
    """Tiny double-precision-friendly model for finite-difference checks."""
    return ModelConfig(
        image_h=16,
        image_w=16,
        num_slots=2,
        segment_width=8,
        encoder_widths=(16, 4, 4, 8, 8),
        predictor_width=16,
        kernel_size=3,
        background_widths=(4, 8, 8, 8),
        background_token_width=8,
        seg_widths=(4, 8, 8, 8),
    )


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {"encoder_widths", "background_widths", "seg_widths"}
_BOOL_FIELDS = {
    "inner_feedback",
    "outer_feedback",
    "depth_input",
    "freeze_background",
}

_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_LOSS_FIELDS = {f"loss_{f.name}": f.name for f in dataclasses.fields(LossWeights)}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"{key}: cannot parse boolean from {raw!r}")


def parse_config_text(text: str) -> tuple[ModelConfig, Schedule, LossWeights]:
    """Parse a flat key=value config. Unknown keys raise with suggestions."""
    import difflib

    model_kwargs: dict = {}
    loss_kwargs: dict = {}
    valid_keys = sorted(list(_MODEL_FIELDS) + list(_LOSS_FIELDS))
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key in _LOSS_FIELDS:
            loss_kwargs[_LOSS_FIELDS[key]] = float(raw)
            continue
        if key not in _MODEL_FIELDS:
            close = difflib.get_close_matches(key, valid_keys, n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ConfigError(
                f"{key}: unknown config key{hint} (valid keys: {', '.join(valid_keys)})"
            )
        if key in _TUPLE_FIELDS:
            model_kwargs[key] = tuple(int(v) for v in raw.replace(",", " ").split())
        elif key in _BOOL_FIELDS:
            model_kwargs[key] = _parse_bool(raw, key)
        else:
            ftype = _MODEL_FIELDS[key].type
            if ftype == "int":
                model_kwargs[key] = int(raw)
            elif ftype == "float":
                model_kwargs[key] = float(raw)
            else:
                model_kwargs[key] = raw
    cfg = validate_config(ModelConfig(**model_kwargs))
    weights = LossWeights(**loss_kwargs)
    return cfg, Schedule.from_config(cfg), weights


def format_config_text(cfg: ModelConfig, weights: LossWeights | None = None) -> str:
    lines = []
    for f in dataclasses.fields(ModelConfig):
        value = getattr(cfg, f.name)
        if f.name in _TUPLE_FIELDS:
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    if weights is not None:
        for f in dataclasses.fields(LossWeights):
            lines.append(f"loss_{f.name}={getattr(weights, f.name)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(format_config_text(cfg).encode()).hexdigest()[:16]


def with_overrides(cfg: ModelConfig, **kwargs) -> ModelConfig:
    return validate_config(replace(cfg, **kwargs))
