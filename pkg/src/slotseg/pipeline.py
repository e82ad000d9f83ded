"""Training stages and inference schedules.

Stages: background pretraining (uncertainty + masked autoencoder), single-slot
object pretraining, proposal-net pretraining, then full training with a
warm-up phase (encoder/decoder only, frame 0) followed by rollout with the
predictor and percept gate under truncated backpropagation. Inference uses
longer warm-up and emits label maps via the composition weights.
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .background import (
    BackgroundExtractor,
    UncertaintyNet,
    background_pretrain_loss,
    uncertainty_bce_loss,
)
from .composer import ComposedScene, compose, prediction_error, visibility_masks
from .config import LossWeights, ModelConfig, Schedule, config_hash, format_config_text
from .core import FramePacket, SlotDecodeResult, SlotState
from .datagen import DatasetManifest, SequenceRecord, depth_normalize, read_manifest
from .decoder import SlotDecoder, decode_slots
from .encoder import SlotEncoder, encode_all_slots
from .initializer import init_random, regularize_slots, seg_init
from .metrics import slots_to_labelmap
from .predictor import (
    PerceptGate,
    SlotPredictor,
    blend_states,
    gate_l0_penalty,
    predictor_step,
)
from .segnet import SegmentationUNet, seg_unet_train_loss


class TrainingError(RuntimeError):
    pass


class SceneModel(nn.Module):
    """Encoder, decoder, predictor, and percept gate as one parameter bundle."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SlotEncoder(cfg)
        self.decoder = SlotDecoder(cfg)
        self.predictor = SlotPredictor(cfg)
        self.gate = PerceptGate(cfg)


class BackgroundModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.uncertainty = UncertaintyNet(cfg)
        self.extractor = BackgroundExtractor(cfg)

    def forward(
        self,
        rgb: Tensor,
        depth: Tensor | None,
        train: bool = False,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        u = self.uncertainty(rgb, depth if self.uncertainty.in_channels == 4 else None)
        bg_rgb, bg_depth, bg_mask = self.extractor(
            rgb, depth if self.extractor.in_channels == 4 else None, u, train, generator
        )
        return u, bg_rgb, bg_depth, bg_mask


@dataclass(frozen=True)
class LossReport:
    rgb_mse: float
    depth_mse: float
    mask_bce: float
    position_loss: float
    gate_l0: float
    total: float

    @classmethod
    def from_terms(cls, terms: dict[str, Tensor], weights: LossWeights) -> "LossReport":
        total = weighted_total(terms, weights)
        return cls(
            rgb_mse=float(terms["rgb_mse"].item()),
            depth_mse=float(terms["depth_mse"].item()),
            mask_bce=float(terms["mask_bce"].item()),
            position_loss=float(terms["position_loss"].item()),
            gate_l0=float(terms["gate_l0"].item()),
            total=float(total.item()),
        )


def weighted_total(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    return (
        weights.rgb * terms["rgb_mse"]
        + weights.depth * terms["depth_mse"]
        + weights.mask * terms["mask_bce"]
        + weights.position * terms["position_loss"]
        + weights.gate_l0 * terms["gate_l0"]
    )


def _bce(pred: Tensor, target: Tensor) -> Tensor:
    eps = 1e-7
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def _mask_centroids(raw_masks: Tensor) -> tuple[Tensor, Tensor]:
    """Centroids (K, 2) of decoded masks plus per-slot mass (K,)."""
    k, _, h, w = raw_masks.shape
    us = torch.linspace(-1 + 1 / w, 1 - 1 / w, w, dtype=raw_masks.dtype)
    vs = torch.linspace(-1 + 1 / h, 1 - 1 / h, h, dtype=raw_masks.dtype)
    mass = raw_masks.sum(dim=(1, 2, 3))
    safe = mass.clamp_min(1e-8)
    x = (raw_masks[:, 0] * us.reshape(1, 1, w)).sum(dim=(1, 2)) / safe
    y = (raw_masks[:, 0] * vs.reshape(1, h, 1)).sum(dim=(1, 2)) / safe
    return torch.stack([x, y], dim=1), mass


def scene_loss_terms(
    scene: ComposedScene,
    target_rgb: Tensor,
    target_depth: Tensor | None,
    uncertainty: Tensor,
    states: list[SlotState],
    decodes: list[SlotDecodeResult],
    gate_values: Tensor | None,
    cfg: ModelConfig,
) -> dict[str, Tensor]:
    """Self-supervised reconstruction objective for one processing step."""
    zero = scene.rgb.new_zeros(())
    terms = {
        "rgb_mse": ((scene.rgb - target_rgb) ** 2).mean(),
        "depth_mse": ((scene.depth - target_depth) ** 2).mean()
        if target_depth is not None
        else zero,
        # slots should claim exactly the foreground density
        "mask_bce": _bce(1.0 - scene.background_weight, uncertainty.detach().clamp(0, 1)),
        "gate_l0": gate_l0_penalty(gate_values, q=cfg.gate_q)
        if gate_values is not None
        else zero,
    }
    # self-supervised position target: decoded mask centroid
    raw_masks = torch.stack([d.raw_mask for d in decodes])
    centroids, mass = _mask_centroids(raw_masks.detach())
    occ = torch.tensor([s.occupied for s in states])
    keep = occ & (mass > 1.0)
    if keep.any():
        positions = torch.stack([s.position[:2] for s in states])
        terms["position_loss"] = ((positions[keep] - centroids[keep]) ** 2).mean()
    else:
        terms["position_loss"] = zero
    return terms


@dataclass
class StepState:
    """Everything carried from one processing step to the next."""

    states: list[SlotState]
    hidden: Tensor | None
    decodes: list[SlotDecodeResult] | None
    scene: ComposedScene | None
    prev_positions: Tensor

    def detached(self) -> "StepState":
        decodes = None
        if self.decodes is not None:
            decodes = [
                SlotDecodeResult(
                    raw_mask=d.raw_mask.detach(),
                    visibility_mask=d.visibility_mask.detach(),
                    depth=d.depth.detach(),
                    rgb=d.rgb.detach(),
                    position_map=d.position_map.detach(),
                )
                for d in self.decodes
            ]
        scene = None
        if self.scene is not None:
            scene = ComposedScene(
                rgb=self.scene.rgb.detach(),
                depth=self.scene.depth.detach(),
                visibility=self.scene.visibility.detach(),
                background_weight=self.scene.background_weight.detach(),
            )
        return StepState(
            states=[s.detached() for s in self.states],
            hidden=self.hidden.detach() if self.hidden is not None else None,
            decodes=decodes,
            scene=scene,
            prev_positions=self.prev_positions.detach(),
        )


def make_packet(
    rgb: Tensor,
    depth: Tensor | None,
    uncertainty: Tensor,
    bg_mask: Tensor,
    prev_scene: ComposedScene | None,
    cfg: ModelConfig,
) -> FramePacket:
    if prev_scene is not None:
        err = prediction_error(prev_scene.rgb.detach(), rgb)
        depth_err = (
            (prev_scene.depth.detach() - depth).abs() if depth is not None else None
        )
    else:
        err = torch.zeros(1, rgb.shape[1], rgb.shape[2], dtype=rgb.dtype)
        depth_err = torch.zeros_like(err) if depth is not None else None
    return FramePacket(
        rgb=rgb,
        depth=depth if cfg.depth_input else None,
        prediction_error=err,
        depth_error=depth_err if cfg.depth_input else None,
        background_mask=bg_mask,
        uncertainty=uncertainty,
    )


@dataclass
class FrameContext:
    rgb: Tensor
    depth: Tensor | None  # normalized scene-relative depth, if available
    uncertainty: Tensor
    bg_rgb: Tensor
    bg_depth: Tensor
    bg_mask: Tensor


def background_pass(
    background: BackgroundModel, rgb: Tensor, depth: Tensor | None
) -> FrameContext:
    with torch.no_grad():
        u, bg_rgb, bg_depth, bg_mask = background(rgb, depth)
    return FrameContext(
        rgb=rgb, depth=depth, uncertainty=u, bg_rgb=bg_rgb, bg_depth=bg_depth, bg_mask=bg_mask
    )


def encoder_pass(
    model: SceneModel, fc: FrameContext, step: StepState, cfg: ModelConfig
) -> list[SlotState]:
    """Encode every slot against the current frame; returns observed states."""
    packet = make_packet(fc.rgb, fc.depth, fc.uncertainty, fc.bg_mask, step.scene, cfg)
    results = encode_all_slots(model.encoder, packet, step.states, step.decodes, cfg)
    return [
        SlotState(
            gestalt=g,
            position=p,
            occupied=step.states[i].occupied,
            last_alpha=step.states[i].last_alpha,
        )
        for i, (g, p) in enumerate(results)
    ]


def decode_and_compose(
    model: SceneModel, states: list[SlotState], fc: FrameContext
) -> tuple[list[SlotDecodeResult], ComposedScene]:
    decodes = decode_slots(model.decoder, states)
    priorities = torch.stack([s.position[3] for s in states])
    scene = compose(decodes, priorities, fc.bg_rgb, fc.bg_depth, fc.bg_mask)
    decodes = visibility_masks(decodes, scene.visibility)
    return decodes, scene


def warmup_pass(
    model: SceneModel, fc: FrameContext, step: StepState, cfg: ModelConfig
) -> tuple[StepState, dict[str, Tensor]]:
    """One encoder/decoder-only iteration on a frame (predictor omitted)."""
    observed = encoder_pass(model, fc, step, cfg)
    decodes, scene = decode_and_compose(model, observed, fc)
    terms = scene_loss_terms(
        scene, fc.rgb, fc.depth, fc.uncertainty, observed, decodes, None, cfg
    )
    new_step = StepState(
        states=observed,
        hidden=step.hidden,
        decodes=decodes,
        scene=scene,
        prev_positions=torch.stack([s.position for s in observed]).detach(),
    )
    return new_step, terms


def full_pass(
    model: SceneModel,
    fc: FrameContext,
    step: StepState,
    cfg: ModelConfig,
    train: bool,
    generator: torch.Generator | None,
) -> tuple[StepState, dict[str, Tensor]]:
    """One full-architecture step: predict, observe, gate-blend, decode."""
    predicted, hidden, rnn_gates = predictor_step(
        step.states, step.hidden, model.predictor, cfg
    )
    pred_decodes, pred_scene = decode_and_compose(model, predicted, fc)
    pred_step = StepState(
        states=predicted,
        hidden=hidden,
        decodes=pred_decodes,
        scene=pred_scene,
        prev_positions=step.prev_positions,
    )
    observed = encoder_pass(model, fc, pred_step, cfg)
    alpha = model.gate(observed, predicted, step.prev_positions, train, generator)
    blended = blend_states(observed, predicted, alpha)
    decodes, scene = decode_and_compose(model, blended, fc)
    gate_values = torch.cat([rnn_gates.reshape(-1), alpha.reshape(-1)])
    terms = scene_loss_terms(
        scene, fc.rgb, fc.depth, fc.uncertainty, blended, decodes, gate_values, cfg
    )
    new_step = StepState(
        states=blended,
        hidden=hidden,
        decodes=decodes,
        scene=scene,
        prev_positions=torch.stack([s.position for s in blended]).detach(),
    )
    return new_step, terms


def initial_states(
    fc: FrameContext,
    cfg: ModelConfig,
    np_rng: np.random.Generator,
    segnet: SegmentationUNet | None,
    num_slots: int | None = None,
) -> list[SlotState]:
    k = num_slots or cfg.num_slots
    u_map = fc.uncertainty[0].detach().cpu().numpy()
    if cfg.init_strategy == "seg":
        if segnet is None:
            raise TrainingError("init_strategy 'seg' requires a trained proposal net")
        depth = fc.depth if fc.depth is not None else fc.uncertainty
        positions = seg_init(
            segnet, depth, k, cfg, np_rng,
            rgb=fc.rgb if segnet.use_rgb else None, uncertainty=u_map,
        )
    else:
        positions = init_random(u_map, k, np_rng, sigma_init=cfg.sigma_init)
    states = []
    for p in positions[:k]:
        states.append(
            SlotState(
                gestalt=torch.zeros(cfg.gestalt_width),
                position=p.as_tensor(),
                occupied=True,
            )
        )
    while len(states) < k:
        states.append(SlotState.empty(cfg.segment_width))
    return states


def _reseed_empty_slots(
    states: list[SlotState], fc: FrameContext, cfg: ModelConfig, np_rng: np.random.Generator
) -> list[SlotState]:
    empty = [i for i, s in enumerate(states) if not s.occupied]
    if not empty:
        return states
    u_map = fc.uncertainty[0].detach().cpu().numpy()
    fresh = init_random(u_map, len(empty), np_rng, sigma_init=cfg.sigma_init)
    out = list(states)
    for idx, pos in zip(empty, fresh):
        out[idx] = SlotState(
            gestalt=torch.zeros(cfg.gestalt_width),
            position=pos.as_tensor(),
            occupied=True,
        )
    return out


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def record_frames(
    record: SequenceRecord, manifest: DatasetManifest
) -> list[tuple[Tensor, Tensor, np.ndarray]]:
    """Per frame: (rgb (3,H,W), normalized depth (1,H,W), labels (H,W))."""
    frames = []
    for t in range(record.rgb.shape[0]):
        rgb = torch.tensor(record.rgb[t]).permute(2, 0, 1).contiguous().float()
        depth = torch.tensor(
            depth_normalize(record.raw_depth[t], manifest.mu, manifest.sigma)
        ).unsqueeze(0).float()
        frames.append((rgb, depth, record.labels[t]))
    return frames


def foreground_mask(labels: np.ndarray) -> Tensor:
    return torch.tensor((labels > 0).astype(np.float32)).unsqueeze(0)


def instance_masks(labels: np.ndarray, cap: int = 16) -> Tensor:
    ids = [i for i in np.unique(labels) if i > 0][:cap]
    if not ids:
        return torch.zeros(0, *labels.shape)
    return torch.stack([torch.tensor((labels == i).astype(np.float32)) for i in ids])


# ---------------------------------------------------------------------------
# pretraining stages
# ---------------------------------------------------------------------------


def _log(log_path: Path | None, line: str):
    if log_path is not None:
        with open(log_path, "a") as f:
            f.write(line + "\n")


def pretrain_background(
    dataset_root,
    cfg: ModelConfig,
    steps: int = 500,
    seed: int = 0,
    lr: float | None = None,
    log_path: Path | None = None,
) -> BackgroundModel:
    """Supervised foreground density + masked background reconstruction."""
    torch.manual_seed(seed)
    np_rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    manifest = read_manifest(dataset_root)
    from .datagen import read_dataset

    records = list(read_dataset(dataset_root, "train"))
    frames = [f for rec in records for f in record_frames(rec, manifest)]
    background = BackgroundModel(cfg)
    opt = torch.optim.Adam(background.parameters(), lr=lr or cfg.learning_rate)
    for step in range(steps):
        rgb, depth, labels = frames[int(np_rng.integers(len(frames)))]
        fg = foreground_mask(labels)
        u = background.uncertainty(rgb, depth if background.uncertainty.in_channels == 4 else None)
        loss_u = uncertainty_bce_loss(u, fg)
        bg_rgb, bg_depth, _ = background.extractor(
            rgb, depth if background.extractor.in_channels == 4 else None,
            fg, train=True, generator=gen,
        )
        loss_rec = background_pretrain_loss(bg_rgb, bg_depth, rgb, depth, fg)
        loss = loss_u + loss_rec
        if not torch.isfinite(loss):
            raise TrainingError(f"background pretrain diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            _log(log_path, f"step={step} loss_total={loss.item():.6f} "
                           f"loss_uncertainty={loss_u.item():.6f} loss_recon={loss_rec.item():.6f}")
    return background


def sample_object_position(
    target_mask: np.ndarray,
    cfg: ModelConfig,
    np_rng: np.random.Generator,
    max_tries: int = 20,
) -> tuple[float, float, float]:
    """Mask centroid jittered but confined within the mask. Returns (x, y, sigma)."""
    h, w = target_mask.shape
    ii, jj = np.nonzero(target_mask)
    cy = -1.0 + (2.0 * ii.mean() + 1.0) / h
    cx = -1.0 + (2.0 * jj.mean() + 1.0) / w
    area = len(ii)
    sigma = max(cfg.sigma_min, float(np.sqrt(area / np.pi) / min(h, w)))

    def inside(x, y):
        j = int(round((x + 1.0) * w / 2.0 - 0.5))
        i = int(round((y + 1.0) * h / 2.0 - 0.5))
        return 0 <= i < h and 0 <= j < w and target_mask[i, j]

    for _ in range(max_tries):
        x = cx + np_rng.normal(0.0, cfg.jitter_std)
        y = cy + np_rng.normal(0.0, cfg.jitter_std)
        if inside(x, y):
            return float(x), float(y), sigma
    # fall back to the mask pixel nearest the centroid (always inside)
    d2 = (ii - ii.mean()) ** 2 + (jj - jj.mean()) ** 2
    best = int(np.argmin(d2))
    y = -1.0 + (2.0 * ii[best] + 1.0) / h
    x = -1.0 + (2.0 * jj[best] + 1.0) / w
    return float(x), float(y), sigma


def pretrain_objects(
    dataset_root,
    cfg: ModelConfig,
    background: BackgroundModel,
    steps: int = 1000,
    seed: int = 0,
    lr: float | None = None,
    log_path: Path | None = None,
    cycles: int = 2,
    model: SceneModel | None = None,
) -> SceneModel:
    """Single-slot encode/decode training on individual ground-truth objects."""
    torch.manual_seed(seed)
    np_rng = np.random.default_rng(seed)
    manifest = read_manifest(dataset_root)
    from .datagen import read_dataset

    records = list(read_dataset(dataset_root, "train"))
    samples = []
    for rec in records:
        frames = record_frames(rec, manifest)
        for t, (rgb, depth, labels) in enumerate(frames):
            for oid in np.unique(labels):
                if oid > 0 and (labels == oid).sum() >= 4:
                    samples.append((rgb, depth, labels, int(oid)))
    if not samples:
        raise TrainingError("no object instances found for pretraining")
    model = model or SceneModel(cfg)
    background.eval()
    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    opt = torch.optim.Adam(params, lr=lr or cfg.learning_rate)
    single_cfg = cfg if cfg.num_slots == 1 else _with_num_slots(cfg, 1)
    for step in range(steps):
        rgb, depth, labels, oid = samples[int(np_rng.integers(len(samples)))]
        target = (labels == oid).astype(np.float32)
        x, y, sigma = sample_object_position(target > 0, cfg, np_rng)
        state = SlotState(
            gestalt=torch.zeros(cfg.gestalt_width),
            position=torch.tensor([x, y, sigma, 0.0]),
            occupied=True,
        )
        fc = background_pass(background, rgb, depth)
        step_state = StepState(
            states=[state], hidden=None, decodes=None, scene=None,
            prev_positions=state.position.unsqueeze(0),
        )
        loss_sum = None
        for _ in range(cycles):
            step_state, _ = warmup_pass(model, fc, step_state, single_cfg)
            tmask = torch.tensor(target).unsqueeze(0)
            decode = step_state.decodes[0]
            mask_loss = _bce(decode.raw_mask, tmask)
            denom = tmask.sum().clamp_min(1.0)
            rgb_loss = (((decode.rgb - rgb) ** 2).mean(dim=0, keepdim=True) * tmask).sum() / denom
            depth_loss = (((decode.depth - depth) ** 2) * tmask).sum() / denom
            loss = mask_loss + rgb_loss + depth_loss
            loss_sum = loss if loss_sum is None else loss_sum + loss
        if not torch.isfinite(loss_sum):
            raise TrainingError(f"object pretrain diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss_sum.backward()
        opt.step()
        if step % 100 == 0 or step == steps - 1:
            _log(log_path, f"step={step} loss_total={loss_sum.item():.6f}")
    return model


def _with_num_slots(cfg: ModelConfig, k: int) -> ModelConfig:
    from dataclasses import replace

    return replace(cfg, num_slots=k)


def pretrain_segnet(
    dataset_root,
    cfg: ModelConfig,
    steps: int = 500,
    seed: int = 0,
    lr: float | None = None,
    log_path: Path | None = None,
) -> SegmentationUNet:
    torch.manual_seed(seed)
    np_rng = np.random.default_rng(seed)
    manifest = read_manifest(dataset_root)
    from .datagen import read_dataset

    records = list(read_dataset(dataset_root, "train"))
    frames = [f for rec in records for f in record_frames(rec, manifest)]
    net = SegmentationUNet(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=lr or cfg.learning_rate)
    for step in range(steps):
        rgb, depth, labels = frames[int(np_rng.integers(len(frames)))]
        gt = instance_masks(labels, cap=cfg.seg_instance_channels)
        logits = net(depth)
        loss = seg_unet_train_loss(logits, gt)
        if not torch.isfinite(loss):
            raise TrainingError(f"segnet pretrain diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % 100 == 0 or step == steps - 1:
            _log(log_path, f"step={step} loss_total={loss.item():.6f}")
    return net


# ---------------------------------------------------------------------------
# full training
# ---------------------------------------------------------------------------


def _dump_terms(terms: dict[str, Tensor]) -> str:
    return " ".join(f"{k}={float(v.item()):.6f}" for k, v in sorted(terms.items()))


def train_sequence(
    model: SceneModel,
    background: BackgroundModel,
    segnet: SegmentationUNet | None,
    frames: list[tuple[Tensor, Tensor, np.ndarray]],
    cfg: ModelConfig,
    schedule: Schedule,
    weights: LossWeights,
    optimizer: torch.optim.Optimizer,
    np_rng: np.random.Generator,
    torch_gen: torch.Generator,
) -> list[LossReport]:
    """Warm-up on frame 0, then BPTT-truncated rollout over the sequence."""
    reports = []
    fc0 = background_pass(background, frames[0][0], frames[0][1] if cfg.depth_input else None)
    states = initial_states(fc0, cfg, np_rng, segnet)
    step = StepState(
        states=states, hidden=None, decodes=None, scene=None,
        prev_positions=torch.stack([s.position for s in states]),
    )
    for i in range(schedule.warmup_train):
        if cfg.init_strategy == "reg" and i > 0:
            step.states = _reseed_empty_slots(step.states, fc0, cfg, np_rng)
        step, terms = warmup_pass(model, fc0, step, cfg)
        total = weighted_total(terms, weights)
        if not torch.isfinite(total):
            raise TrainingError(f"warm-up loss diverged: {_dump_terms(terms)}")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        reports.append(LossReport.from_terms(terms, weights))
        step = step.detached()
        if cfg.init_strategy == "reg":
            step.states = regularize_slots(step.states, cfg, np_rng)

    pending: Tensor | None = None
    pending_count = 0
    for t in range(1, len(frames)):
        fc = background_pass(background, frames[t][0], frames[t][1] if cfg.depth_input else None)
        step, terms = full_pass(model, fc, step, cfg, train=True, generator=torch_gen)
        total = weighted_total(terms, weights)
        if not torch.isfinite(total):
            raise TrainingError(f"rollout loss diverged at frame {t}: {_dump_terms(terms)}")
        reports.append(LossReport.from_terms(terms, weights))
        pending = total if pending is None else pending + total
        pending_count += 1
        if pending_count >= schedule.bptt_len or t == len(frames) - 1:
            optimizer.zero_grad(set_to_none=True)
            pending.backward()
            optimizer.step()
            pending, pending_count = None, 0
            step = step.detached()
    return reports


def train_image(
    model: SceneModel,
    background: BackgroundModel,
    segnet: SegmentationUNet | None,
    rgb: Tensor,
    depth: Tensor | None,
    cfg: ModelConfig,
    schedule: Schedule,
    weights: LossWeights,
    optimizer: torch.optim.Optimizer,
    np_rng: np.random.Generator,
    torch_gen: torch.Generator,
) -> list[LossReport]:
    """Image regime: no warm-up, full-architecture cycles on the same image."""
    reports = []
    fc = background_pass(background, rgb, depth if cfg.depth_input else None)
    states = initial_states(fc, cfg, np_rng, segnet)
    step = StepState(
        states=states, hidden=None, decodes=None, scene=None,
        prev_positions=torch.stack([s.position for s in states]),
    )
    for _ in range(schedule.image_cycles):
        step, terms = full_pass(model, fc, step, cfg, train=True, generator=torch_gen)
        total = weighted_total(terms, weights)
        if not torch.isfinite(total):
            raise TrainingError(f"image cycle diverged: {_dump_terms(terms)}")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        reports.append(LossReport.from_terms(terms, weights))
        step = step.detached()
    return reports


def validation_loss(
    model: SceneModel,
    background: BackgroundModel,
    segnet: SegmentationUNet | None,
    dataset_root,
    cfg: ModelConfig,
    schedule: Schedule,
    weights: LossWeights,
    seed: int = 0,
    split: str = "val",
) -> float:
    from .datagen import read_dataset

    manifest = read_manifest(dataset_root)
    totals = []
    with torch.no_grad():
        for rec in read_dataset(dataset_root, split):
            frames = record_frames(rec, manifest)
            result = infer_sequence(
                model, background, segnet, frames, cfg, schedule, seed=seed
            )
            for rep in result.reports:
                totals.append(rep.total)
    return float(np.mean(totals)) if totals else math.inf


def train_full(
    dataset_root,
    cfg: ModelConfig,
    model: SceneModel,
    background: BackgroundModel,
    segnet: SegmentationUNet | None,
    weights: LossWeights,
    epochs: int = 1,
    seed: int = 0,
    lr: float | None = None,
    out_dir: Path | None = None,
    log_path: Path | None = None,
    freeze_background: bool | None = None,
) -> tuple[SceneModel, list[float]]:
    """Staged full training: per-sequence warm-up + rollout, epoch checkpoints."""
    schedule = Schedule.from_config(cfg)
    torch.manual_seed(seed)
    np_rng = np.random.default_rng(seed)
    torch_gen = torch.Generator().manual_seed(seed)
    freeze = cfg.freeze_background if freeze_background is None else freeze_background
    background.eval()
    for p in background.parameters():
        p.requires_grad_(not freeze)
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=lr or cfg.learning_rate
    )
    from .datagen import read_dataset

    manifest = read_manifest(dataset_root)
    val_losses = []
    best = math.inf
    step_counter = 0
    for epoch in range(epochs):
        for rec in read_dataset(dataset_root, "train"):
            frames = record_frames(rec, manifest)
            reports = train_sequence(
                model, background, segnet, frames, cfg, schedule, weights,
                optimizer, np_rng, torch_gen,
            )
            for rep in reports:
                _log(
                    log_path,
                    f"step={step_counter} loss_total={rep.total:.6f} rgb={rep.rgb_mse:.6f} "
                    f"depth={rep.depth_mse:.6f} mask={rep.mask_bce:.6f} "
                    f"position={rep.position_loss:.6f} gate_l0={rep.gate_l0:.6f}",
                )
                step_counter += 1
        try:
            val = validation_loss(
                model, background, segnet, dataset_root, cfg, schedule, weights, seed
            )
        except Exception:
            val = math.inf
        val_losses.append(val)
        _log(log_path, f"epoch={epoch} val_loss={val:.6f}")
        if out_dir is not None:
            save_bundle(
                Path(out_dir) / "last.ckpt", cfg, model, background, segnet,
                epoch=epoch, val_loss=val,
            )
            if val < best:
                best = val
                save_bundle(
                    Path(out_dir) / "best.ckpt", cfg, model, background, segnet,
                    epoch=epoch, val_loss=val,
                )
    return model, val_losses


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class SequenceResult:
    scenes: list[ComposedScene]
    labels: np.ndarray  # (T, H, W) predicted label maps
    states: list[list[SlotState]]
    decodes: list[list[SlotDecodeResult]]
    backgrounds: list[tuple[Tensor, Tensor]]  # (bg_rgb, bg_depth) per frame
    reports: list[LossReport]
    processing_steps: int


def infer_sequence(
    model: SceneModel,
    background: BackgroundModel,
    segnet: SegmentationUNet | None,
    frames: list[tuple[Tensor, Tensor, np.ndarray]],
    cfg: ModelConfig,
    schedule: Schedule | None = None,
    seed: int = 0,
    num_slots: int | None = None,
) -> SequenceResult:
    """Deterministic rollout: long warm-up on frame 0, then per-frame stepping."""
    schedule = schedule or Schedule.from_config(cfg)
    run_cfg = cfg if num_slots is None else _with_num_slots(cfg, num_slots)
    np_rng = np.random.default_rng(seed)
    weights = LossWeights()
    steps_done = 0
    with torch.no_grad():
        fc0 = background_pass(
            background, frames[0][0], frames[0][1] if cfg.depth_input else None
        )
        states = initial_states(fc0, run_cfg, np_rng, segnet)
        step = StepState(
            states=states, hidden=None, decodes=None, scene=None,
            prev_positions=torch.stack([s.position for s in states]),
        )
        for i in range(schedule.warmup_infer):
            if run_cfg.init_strategy == "reg" and i > 0:
                step.states = _reseed_empty_slots(step.states, fc0, run_cfg, np_rng)
            step, terms = warmup_pass(model, fc0, step, run_cfg)
            steps_done += 1
            if run_cfg.init_strategy == "reg":
                step.states = regularize_slots(step.states, run_cfg, np_rng)
        scenes, all_states, reports = [step.scene], [step.states], []
        all_decodes = [step.decodes]
        backgrounds = [(fc0.bg_rgb, fc0.bg_depth)]
        reports.append(LossReport.from_terms(
            scene_loss_terms(step.scene, fc0.rgb, fc0.depth, fc0.uncertainty,
                             step.states, step.decodes, None, run_cfg),
            weights,
        ))
        for t in range(1, len(frames)):
            fc = background_pass(
                background, frames[t][0], frames[t][1] if cfg.depth_input else None
            )
            step, terms = full_pass(model, fc, step, run_cfg, train=False, generator=None)
            steps_done += 1
            scenes.append(step.scene)
            all_states.append(step.states)
            all_decodes.append(step.decodes)
            backgrounds.append((fc.bg_rgb, fc.bg_depth))
            reports.append(LossReport.from_terms(terms, weights))
    labels = np.stack([
        slots_to_labelmap(
            scene.visibility.cpu().numpy(),
            scene.background_weight.cpu().numpy(),
            min_mass_frac=cfg.min_area_frac,
            )
        for scene in scenes
    ])
    return SequenceResult(
        scenes=scenes, labels=labels, states=all_states, decodes=all_decodes,
        backgrounds=backgrounds, reports=reports, processing_steps=steps_done,
    )


def infer_image(
    model: SceneModel,
    background: BackgroundModel,
    segnet: SegmentationUNet | None,
    rgb: Tensor,
    depth: Tensor | None,
    cfg: ModelConfig,
    schedule: Schedule | None = None,
    seed: int = 0,
    num_slots: int | None = None,
) -> SequenceResult:
    """Image regime: warm-up cycles then full-architecture cycles, one image."""
    schedule = schedule or Schedule.from_config(cfg)
    run_cfg = cfg if num_slots is None else _with_num_slots(cfg, num_slots)
    np_rng = np.random.default_rng(seed)
    weights = LossWeights()
    steps_done = 0
    with torch.no_grad():
        fc = background_pass(background, rgb, depth if cfg.depth_input else None)
        states = initial_states(fc, run_cfg, np_rng, segnet)
        step = StepState(
            states=states, hidden=None, decodes=None, scene=None,
            prev_positions=torch.stack([s.position for s in states]),
        )
        for i in range(schedule.warmup_infer):
            if run_cfg.init_strategy == "reg" and i > 0:
                step.states = _reseed_empty_slots(step.states, fc, run_cfg, np_rng)
            step, _ = warmup_pass(model, fc, step, run_cfg)
            steps_done += 1
            if run_cfg.init_strategy == "reg":
                step.states = regularize_slots(step.states, run_cfg, np_rng)
        for _ in range(schedule.image_infer_cycles):
            step, terms = full_pass(model, fc, step, run_cfg, train=False, generator=None)
            steps_done += 1
    labels = slots_to_labelmap(
        step.scene.visibility.cpu().numpy(),
        step.scene.background_weight.cpu().numpy(),
        min_mass_frac=cfg.min_area_frac,
    )[None]
    return SequenceResult(
        scenes=[step.scene], labels=labels, states=[step.states],
        decodes=[step.decodes], backgrounds=[(fc.bg_rgb, fc.bg_depth)],
        reports=[LossReport.from_terms(terms, weights)], processing_steps=steps_done,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def _weights_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_numpy_weights(module: nn.Module, blob: dict[str, np.ndarray]):
    module.load_state_dict({k: torch.tensor(v) for k, v in blob.items()})


def save_bundle(
    path,
    cfg: ModelConfig,
    model: SceneModel | None = None,
    background: BackgroundModel | None = None,
    segnet: SegmentationUNet | None = None,
    epoch: int = 0,
    val_loss: float = math.inf,
    rng_state: dict | None = None,
) -> Path:
    """Pickle the weight arrays plus a textual sidecar manifest. Deterministic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config_text": format_config_text(cfg),
        "config_hash": config_hash(cfg),
        "epoch": epoch,
        "val_loss": val_loss,
        "rng_state": rng_state,
        "components": {},
    }
    for name, module in (("model", model), ("background", background), ("segnet", segnet)):
        if module is not None:
            payload["components"][name] = _weights_to_numpy(module)
    path.write_bytes(pickle.dumps(payload, protocol=4))
    manifest = (
        f"config_hash={payload['config_hash']}\n"
        f"epoch={epoch}\n"
        f"val_loss={val_loss!r}\n"
        f"components={','.join(sorted(payload['components']))}\n"
    )
    Path(str(path) + ".manifest").write_text(manifest)
    return path


def load_bundle(
    path,
    cfg: ModelConfig,
    force: bool = False,
) -> tuple[SceneModel | None, BackgroundModel | None, SegmentationUNet | None, dict]:
    """Rebuild saved components under `cfg`; hash mismatch fails unless forced."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    payload = pickle.loads(path.read_bytes())
    if payload["config_hash"] != config_hash(cfg) and not force:
        raise CheckpointError(
            f"{path}: config hash {payload['config_hash']} does not match the "
            f"requested config {config_hash(cfg)} (use force to override)"
        )
    components = payload["components"]
    model = background = segnet = None
    if "model" in components:
        model = SceneModel(cfg)
        _load_numpy_weights(model, components["model"])
    if "background" in components:
        background = BackgroundModel(cfg)
        _load_numpy_weights(background, components["background"])
    if "segnet" in components:
        segnet = SegmentationUNet(cfg)
        _load_numpy_weights(segnet, components["segnet"])
    meta = {k: payload[k] for k in ("epoch", "val_loss", "config_hash", "rng_state")}
    return model, background, segnet, meta


def capture_rng(np_rng: np.random.Generator, torch_gen: torch.Generator) -> dict:
    return {
        "numpy": np_rng.bit_generator.state,
        "torch": torch_gen.get_state().numpy(),
        "torch_global": torch.get_rng_state().numpy(),
    }


def restore_rng(state: dict, np_rng: np.random.Generator, torch_gen: torch.Generator):
    np_rng.bit_generator.state = state["numpy"]
    torch_gen.set_state(torch.tensor(state["torch"], dtype=torch.uint8))
    torch.set_rng_state(torch.tensor(state["torch_global"], dtype=torch.uint8))
