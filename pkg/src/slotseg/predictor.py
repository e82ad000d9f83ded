"""Temporal core: gated recurrent slot dynamics and the percept gate.

The predictor embeds each packed slot state, alternates strongly gated
recurrent cells (per slot) with self-attention (across slots), and maps back
to state space. The percept gate blends each observed state with its
prediction through a rectified-tanh weight that can close exactly to zero.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import ordered_sum
from .config import ModelConfig
from .core import SlotState, pack_slot_state


def retanh(x: Tensor) -> Tensor:
    """max(0, tanh(x)): reaches exactly 0 for x <= 0."""
    return torch.tanh(x).clamp_min(0.0)


class GateL0RDCell(nn.Module):
    """Recurrent cell with a rectified-tanh update gate.

    h' = h + gate * (candidate - h); a closed gate (exactly 0) leaves the
    hidden state bit-identical. The output net reads (input, new hidden).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.gate_x = nn.Linear(dim, dim)
        self.gate_h = nn.Linear(dim, dim, bias=False)
        self.cand_x = nn.Linear(dim, dim)
        self.cand_h = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(2 * dim, dim)

    def step(
        self, x: Tensor, h: Tensor, force_closed: bool = False, bypass_output: bool = False
    ) -> tuple[Tensor, Tensor, Tensor]:
        """x, h: (K, D). Returns (y, h', gate)."""
        if force_closed:
            gate = torch.zeros_like(h)
        else:
            gate = retanh(self.gate_x(x) + self.gate_h(h))
        cand = torch.tanh(self.cand_x(x) + self.cand_h(h))
        h_new = h + gate * (cand - h)
        y = x if bypass_output else self.out(torch.cat([x, h_new], dim=1))
        return y, h_new, gate


class SelfAttention(nn.Module):
    """Residual multi-head self-attention over the K slots as tokens.

    Reductions over the slot axis (softmax denominator, value aggregation)
    use order-canonical sums, so permuting the slots permutes the output
    bit-for-bit. No positional encoding: slots are a set.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        k_slots = x.shape[0]
        hd = self.dim // self.heads
        q, k, v = self.qkv(self.norm(x)).reshape(k_slots, 3, self.heads, hd).unbind(dim=1)
        # (H, K, hd): per-pair dot products contract over hd only
        q = q.permute(1, 0, 2) / math.sqrt(hd)
        k = k.permute(1, 0, 2)
        v = v.permute(1, 0, 2)
        scores = torch.einsum("hid,hjd->hij", q, k)
        scores = scores - scores.amax(dim=2, keepdim=True)
        e = torch.exp(scores)
        attn = e / ordered_sum(e, dim=2).unsqueeze(2)
        out = ordered_sum(attn.unsqueeze(3) * v.unsqueeze(1), dim=2)  # (H, K, hd)
        out = out.permute(1, 0, 2).reshape(k_slots, self.dim)
        return x + self.proj(out)


class SlotPredictor(nn.Module):
    """Packed-state transition: embed, [GateL0RD, attention]*, GateL0RD, project."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.predictor_width
        packed = cfg.packed_state_dim
        self.input_embed = nn.Sequential(
            nn.Linear(packed, d), nn.SiLU(), nn.Linear(d, d)
        )
        self.cells = nn.ModuleList([GateL0RDCell(d) for _ in range(cfg.gatel0rd_layers)])
        self.attns = nn.ModuleList(
            [SelfAttention(d, cfg.heads) for _ in range(cfg.gatel0rd_layers - 1)]
        )
        self.output_embed = nn.Sequential(
            nn.Linear(d, d), nn.SiLU(), nn.Linear(d, packed)
        )

    def init_hidden(self, num_slots: int, dtype=torch.float32) -> Tensor:
        return torch.zeros(len(self.cells), num_slots, self.cfg.predictor_width, dtype=dtype)

    def forward(
        self, packed: Tensor, hidden: Tensor | None = None, diagnostic_shield: bool = False
    ) -> tuple[Tensor, Tensor, Tensor]:
        """packed: (K, packed_dim); hidden: (L, K, D).

        Returns (raw output (K, packed_dim), hidden', gates (L, K, D)).
        """
        k = packed.shape[0]
        if hidden is None:
            hidden = self.init_hidden(k, dtype=packed.dtype)
        if hidden.shape[0] != len(self.cells) or hidden.shape[1] != k:
            raise ValueError(
                f"hidden shape {tuple(hidden.shape)} does not match "
                f"{len(self.cells)} layers x {k} slots"
            )
        x = self.input_embed(packed)
        new_hidden = []
        gates = []
        for i, cell in enumerate(self.cells):
            x, h_new, gate = cell.step(
                x, hidden[i], force_closed=diagnostic_shield, bypass_output=diagnostic_shield
            )
            new_hidden.append(h_new)
            gates.append(gate)
            if i < len(self.attns):
                x = self.attns[i](x)
        out = self.output_embed(x)
        return out, torch.stack(new_hidden), torch.stack(gates)


def _raw_to_state_parts(raw: Tensor, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Map raw predictor output rows into bounded gestalt and valid position."""
    g = torch.sigmoid(raw[:, : cfg.gestalt_width])
    xy = torch.tanh(raw[:, cfg.gestalt_width : cfg.gestalt_width + 2])
    sigma = cfg.sigma_min + cfg.sigma_scale * torch.sigmoid(
        raw[:, cfg.gestalt_width + 2 : cfg.gestalt_width + 3]
    )
    rho = raw[:, cfg.gestalt_width + 3 : cfg.gestalt_width + 4]
    return g, torch.cat([xy, sigma, rho], dim=1)


def predictor_step(
    states: list[SlotState],
    hidden: Tensor | None,
    model: SlotPredictor,
    cfg: ModelConfig,
    diagnostic_shield: bool = False,
) -> tuple[list[SlotState], Tensor, Tensor]:
    """Advance all slots one step. Returns (predicted states, hidden', gates)."""
    packed = torch.stack([pack_slot_state(s) for s in states])
    raw, hidden_new, gates = model(packed, hidden, diagnostic_shield=diagnostic_shield)
    gestalt, position = _raw_to_state_parts(raw, cfg)
    out = [
        SlotState(
            gestalt=gestalt[i],
            position=position[i],
            occupied=states[i].occupied,
            last_alpha=states[i].last_alpha,
        )
        for i in range(len(states))
    ]
    return out, hidden_new, gates


def gate_l0_penalty(openness: Tensor, q: float = 0.5) -> Tensor:
    """Relaxed L0 on gate openings: mean of openness**q, 0 exactly at 0.

    Values below 1e-4 contribute through a clamped power so the backward pass
    stays bounded near the rectifier's kink.
    """
    x = openness.clamp(0.0, 1.0)
    powed = x.clamp_min(1e-4) ** q
    return torch.where(x > 0, powed, torch.zeros_like(x)).mean()


class PerceptGate(nn.Module):
    """Produces blend weights (alpha_G, alpha_P) per slot from both states."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        hidden = max(16, cfg.predictor_width // 4)
        self.net = nn.Sequential(
            nn.Linear(cfg.gate_input_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, 2),
        )

    def preactivation(
        self,
        observed: list[SlotState],
        predicted: list[SlotState],
        prev_position: Tensor,
    ) -> Tensor:
        rows = []
        for i, (obs, pred) in enumerate(zip(observed, predicted)):
            aux = torch.tensor(
                [1.0 if obs.occupied else 0.0, obs.last_alpha], dtype=obs.gestalt.dtype
            )
            rows.append(
                torch.cat(
                    [obs.gestalt, obs.position, pred.gestalt, pred.position,
                     prev_position[i].to(obs.gestalt.dtype), aux]
                )
            )
        return self.net(torch.stack(rows))

    def forward(
        self,
        observed: list[SlotState],
        predicted: list[SlotState],
        prev_position: Tensor,
        train: bool = False,
        generator: torch.Generator | None = None,
    ) -> Tensor:
        """Returns alpha (K, 2) in [0, 1]; exact zeros are reachable."""
        z = self.preactivation(observed, predicted, prev_position)
        if train and self.cfg.gate_noise_std > 0:
            noise = torch.empty_like(z).normal_(
                0.0, self.cfg.gate_noise_std, generator=generator
            )
            z = z + noise
        return retanh(z)


def blend_states(
    observed: list[SlotState], predicted: list[SlotState], alpha: Tensor
) -> list[SlotState]:
    """Per-slot linear blend alpha*obs + (1-alpha)*pred, exact at alpha 0 and 1."""
    out = []
    for i, (obs, pred) in enumerate(zip(observed, predicted)):
        a_g, a_p = alpha[i, 0], alpha[i, 1]
        gestalt = a_g * obs.gestalt + (1.0 - a_g) * pred.gestalt
        position = a_p * obs.position + (1.0 - a_p) * pred.position
        out.append(
            SlotState(
                gestalt=gestalt,
                position=position,
                occupied=pred.occupied or obs.occupied,
                last_alpha=float(0.5 * (a_g + a_p).item()),
            )
        )
    return out


def percept_gate_blend(
    observed: SlotState,
    predicted: SlotState,
    prev_position: Tensor,
    gate: PerceptGate,
    train: bool = False,
    generator: torch.Generator | None = None,
) -> tuple[SlotState, float, float]:
    """Single-slot observation/prediction fusion; returns (state, a_G, a_P)."""
    alpha = gate([observed], [predicted], prev_position.unsqueeze(0), train, generator)
    blended = blend_states([observed], [predicted], alpha)[0]
    return blended, float(alpha[0, 0].item()), float(alpha[0, 1].item())
