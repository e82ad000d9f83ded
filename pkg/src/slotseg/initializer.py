"""Initial slot placement: random-by-uncertainty, regularized, or proposal-led.

All stochastic choices run through an explicit numpy generator so warm-up
behavior is reproducible. Slot nullification clears a duplicate's gestalt and
occupancy; the training loop may re-seed freed slots on the next pass.
"""

from __future__ import annotations

import numpy as np
import torch

from .config import ModelConfig
from .core import PositionCode, SlotState
from .segnet import SegmentationUNet


def init_random(
    uncertainty: np.ndarray,
    num_slots: int,
    rng: np.random.Generator,
    sigma_init: float = 0.1,
) -> list[PositionCode]:
    """Sample slot positions i.i.d. with probability proportional to U.

    An all-zero map falls back to a uniform distribution over the image.
    """
    u = np.asarray(uncertainty, dtype=np.float64)
    if u.ndim == 3:
        u = u[0]
    h, w = u.shape
    total = u.sum()
    if total > 0:
        probs = (u / total).ravel()
    else:
        probs = np.full(h * w, 1.0 / (h * w))
    flat = rng.choice(h * w, size=num_slots, p=probs)
    out = []
    for idx in flat:
        i, j = divmod(int(idx), w)
        x = -1.0 + (2.0 * j + 1.0) / w
        y = -1.0 + (2.0 * i + 1.0) / h
        out.append(PositionCode(x=x, y=y, size_sigma=sigma_init, priority_rho=0.0))
    return out


def _gestalt_correlation(a: torch.Tensor, b: torch.Tensor) -> float:
    av = a.double() - a.double().mean()
    bv = b.double() - b.double().mean()
    na, nb = av.norm().item(), bv.norm().item()
    if na == 0.0 or nb == 0.0:
        return 1.0 if torch.equal(a, b) else 0.0
    return float((av @ bv).item() / (na * nb))


def slot_similarity(a: SlotState, b: SlotState, cfg: ModelConfig) -> float:
    """Spatial proximity plus gestalt correlation, each weighted.

    Distance uses the (x, y) location only: size and priority are not spatial,
    and duplicates must be caught even when their priorities drifted apart.
    """
    dist = (a.position[:2].double() - b.position[:2].double()).norm().item()
    pos_term = float(np.exp(-dist / cfg.lambda_pos))
    gest_term = _gestalt_correlation(a.gestalt, b.gestalt)
    return cfg.w_pos * pos_term + cfg.w_gestalt * gest_term


def regularize_slots(
    states: list[SlotState], cfg: ModelConfig, rng: np.random.Generator
) -> list[SlotState]:
    """Stochastically nullify the lower-priority slot of near-duplicate pairs.

    Pairs whose similarity exceeds the duplicate threshold lose one member
    with probability p_kill; distant slots pass through untouched.
    """
    out = list(states)
    k = len(out)
    for i in range(k):
        for j in range(i + 1, k):
            if not (out[i].occupied and out[j].occupied):
                continue
            if slot_similarity(out[i], out[j], cfg) <= cfg.theta_dup:
                continue
            if rng.random() >= cfg.p_kill:
                continue
            # nullify the lower-priority member; ties drop the later slot
            rho_i = float(out[i].position[3].item())
            rho_j = float(out[j].position[3].item())
            victim = j if rho_j <= rho_i else i
            out[victim] = SlotState.empty(
                states[victim].segment_width, dtype=states[victim].gestalt.dtype
            )
    return out


def _mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    ii, jj = np.nonzero(mask)
    h, w = mask.shape
    y = -1.0 + (2.0 * ii.mean() + 1.0) / h
    x = -1.0 + (2.0 * jj.mean() + 1.0) / w
    return x, y


def seg_init(
    segnet: SegmentationUNet,
    depth: torch.Tensor,
    num_slots: int,
    cfg: ModelConfig,
    rng: np.random.Generator,
    rgb: torch.Tensor | None = None,
    uncertainty: np.ndarray | None = None,
) -> list[PositionCode]:
    """Slot positions from the proposal net's instance masks.

    Channels are thresholded at logit 0; masks below the minimum area are
    dropped; surviving instances are ordered by area (largest first). With no
    instance found, falls back to uncertainty-weighted random placement.
    """
    with torch.no_grad():
        logits = segnet(depth, rgb)
    masks = (logits > 0).cpu().numpy()
    h, w = masks.shape[-2], masks.shape[-1]
    min_area = max(1, int(round(cfg.min_area_frac * h * w)))
    found = []
    for ch in range(masks.shape[0]):
        area = int(masks[ch].sum())
        if area < min_area:
            continue
        x, y = _mask_centroid(masks[ch])
        sigma = max(cfg.sigma_min, float(np.sqrt(area / np.pi) / min(h, w)))
        found.append((area, PositionCode(x=x, y=y, size_sigma=sigma, priority_rho=0.0)))
    if not found:
        fallback = (
            uncertainty if uncertainty is not None else np.ones((h, w), dtype=np.float64)
        )
        return init_random(fallback, num_slots, rng, sigma_init=cfg.sigma_init)
    found.sort(key=lambda item: -item[0])
    return [p for _, p in found[:num_slots]]


def states_from_positions(
    positions: list[PositionCode], cfg: ModelConfig, dtype=torch.float32
) -> list[SlotState]:
    """Occupied zero-gestalt states at the given positions; pad with empties."""
    states = []
    for p in positions[: cfg.num_slots]:
        states.append(
            SlotState(
                gestalt=torch.zeros(cfg.gestalt_width, dtype=dtype),
                position=p.as_tensor(dtype=dtype),
                occupied=True,
            )
        )
    while len(states) < cfg.num_slots:
        states.append(SlotState.empty(cfg.segment_width, dtype=dtype))
    return states
