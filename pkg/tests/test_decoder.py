import numpy as np
import pytest
import torch

from slotseg.config import ModelConfig, paper_config, validate_config
from slotseg.core import SlotState
from slotseg.decoder import MaskDecoder, SlotDecoder, decode_slot, decode_slots


def small_cfg(**kwargs) -> ModelConfig:
    base = dict(
        image_h=32,
        image_w=32,
        num_slots=2,
        segment_width=8,
        encoder_widths=(16, 4, 8, 8, 8),
        predictor_width=32,
        kernel_size=3,
    )
    base.update(kwargs)
    return validate_config(ModelConfig(**base))


def _gestalt(cfg, rng):
    return torch.tensor(rng.uniform(0.05, 0.95, (2, cfg.gestalt_width)), dtype=torch.float32)


def _position(rng, k=2):
    p = torch.tensor(rng.uniform(-0.5, 0.5, (k, 4)), dtype=torch.float32)
    p[:, 2] = 0.4
    return p


class TestCascadeStructure:
    def test_paper_scale_channel_trace(self):
        cfg = paper_config()
        dec = SlotDecoder(cfg)
        mask_convs = [m for m in dec.mask_decoder.net if isinstance(m, torch.nn.Conv2d)]
        assert [(c.in_channels, c.out_channels) for c in mask_convs] == [
            (256, 128),
            (128, 64),
            (64, 32),
            (32, 128),
        ]
        up = dec.mask_decoder.net[-1]
        assert isinstance(up, torch.nn.ConvTranspose2d)
        assert (up.in_channels, up.out_channels) == (128, 1)
        assert up.kernel_size == (16, 16) and up.stride == (16, 16)

        assert dec.depth_decoder.concat_channels == 304  # 256 + 32 + 16
        assert dec.depth_decoder.inproj.out_channels == 64
        assert (dec.depth_decoder.up.in_channels, dec.depth_decoder.up.out_channels) == (256, 1)

        assert dec.rgb_decoder.concat_channels == 368  # 256 + 32 + 64 + 16
        assert dec.rgb_decoder.inproj.out_channels == 128
        assert (dec.rgb_decoder.up.in_channels, dec.rgb_decoder.up.out_channels) == (512, 3)

    def test_output_shapes_and_bounds(self, rng):
        cfg = small_cfg()
        dec = SlotDecoder(cfg)
        g, p = _gestalt(cfg, rng), _position(rng)
        raw_mask, depth, rgb, pos_map = dec(g, p)
        h, w = cfg.image_h, cfg.image_w
        assert raw_mask.shape == (2, 1, h, w)
        assert depth.shape == (2, 1, h, w)
        assert rgb.shape == (2, 3, h, w)
        assert pos_map.shape == (2, 1, h, w)
        for t in (raw_mask, depth, rgb):
            assert (t >= 0).all() and (t <= 1).all()


class TestCascadeCausality:
    def test_mask_invariant_to_depth_and_rgb_segments(self, rng):
        cfg = small_cfg()
        dec = SlotDecoder(cfg)
        g, p = _gestalt(cfg, rng), _position(rng)
        base_mask, _, _, _ = dec(g, p)
        g2 = g.clone()
        g2[:, cfg.segment_width :] = torch.rand_like(g2[:, cfg.segment_width :])
        mask2, _, _, _ = dec(g2, p)
        assert (base_mask - mask2).abs().max().item() < 1e-6

    def test_depth_invariant_to_rgb_segment(self, rng):
        cfg = small_cfg()
        dec = SlotDecoder(cfg)
        g, p = _gestalt(cfg, rng), _position(rng)
        _, base_depth, _, _ = dec(g, p)
        g2 = g.clone()
        g2[:, 2 * cfg.segment_width :] = torch.rand_like(g2[:, 2 * cfg.segment_width :])
        _, depth2, _, _ = dec(g2, p)
        assert (base_depth - depth2).abs().max().item() < 1e-6

    def test_rgb_depends_on_depth_input(self, rng):
        cfg = small_cfg()
        dec = SlotDecoder(cfg)
        g, p = _gestalt(cfg, rng), _position(rng)
        raw_mask, depth, rgb, _ = dec(g, p)
        gr = g[:, 2 * cfg.segment_width :]
        perturbed = dec.rgb_decoder(gr, raw_mask, depth + 0.1)
        assert (perturbed - rgb).abs().max().item() > 0

    def test_zero_mask_blocks_gestalt(self, rng):
        cfg = small_cfg()
        dec = SlotDecoder(cfg)
        zero_mask = torch.zeros(2, 1, cfg.image_h, cfg.image_w)
        gd1 = torch.rand(2, cfg.segment_width)
        gd2 = torch.rand(2, cfg.segment_width)
        d1 = dec.depth_decoder(gd1, zero_mask)
        d2 = dec.depth_decoder(gd2, zero_mask)
        assert (d1 - d2).abs().max().item() < 1e-6
        gr1, gr2 = torch.rand(2, cfg.segment_width), torch.rand(2, cfg.segment_width)
        depth = torch.rand(2, 1, cfg.image_h, cfg.image_w)
        r1 = dec.rgb_decoder(gr1, zero_mask, depth)
        r2 = dec.rgb_decoder(gr2, zero_mask, depth)
        assert (r1 - r2).abs().max().item() < 1e-6


class TestMaskPath:
    def test_modulation_peak_moves_with_position(self, rng):
        cfg = small_cfg()
        gm = torch.full((1, cfg.segment_width), 0.8)
        h, w = cfg.image_h, cfg.image_w
        grid_a = MaskDecoder.modulation_grid(gm, torch.tensor([[-0.5, 0.0, 0.3, 0.0]]), h, w)
        grid_b = MaskDecoder.modulation_grid(gm, torch.tensor([[0.5, 0.0, 0.3, 0.0]]), h, w)
        ga = grid_a[0].sum(dim=0)
        gb = grid_b[0].sum(dim=0)
        ja = int(ga.argmax()) % ga.shape[1]
        jb = int(gb.argmax()) % gb.shape[1]
        # moving x by +1.0 shifts the peak right by half the grid width
        assert jb - ja == ga.shape[1] // 2

    def test_mask_fast_path_equals_cascade(self, rng):
        cfg = small_cfg()
        dec = SlotDecoder(cfg)
        g, p = _gestalt(cfg, rng), _position(rng)
        occ = torch.ones(2)
        full_mask, _, _, _ = dec(g, p, occ)
        fast = dec.decode_mask(g, p, occ)
        assert torch.equal(full_mask, fast)
        # twice in a row is bit-identical
        assert torch.equal(fast, dec.decode_mask(g, p, occ))

    def test_empty_slot_decodes_to_zero(self):
        cfg = small_cfg()
        dec = SlotDecoder(cfg)
        result = decode_slot(dec, SlotState.empty(cfg.segment_width))
        assert result.raw_mask.abs().max().item() == 0.0
        assert result.rgb.abs().max().item() == 0.0
        assert result.depth.abs().max().item() == 0.0
        assert result.position_map.abs().max().item() == 0.0

    def test_decode_slots_batches_like_single(self, rng):
        cfg = small_cfg()
        dec = SlotDecoder(cfg)
        states = [
            SlotState(
                gestalt=torch.rand(cfg.gestalt_width),
                position=torch.tensor([0.1, -0.2, 0.3, 0.0]),
                occupied=True,
            ),
            SlotState.empty(cfg.segment_width),
        ]
        batched = decode_slots(dec, states)
        single = decode_slot(dec, states[0])
        assert torch.allclose(batched[0].raw_mask, single.raw_mask, atol=1e-6)
        assert batched[1].raw_mask.abs().max().item() == 0.0


class TestDepthGradient:
    def test_finite_difference_gradient_on_depth_segment(self, rng):
        cfg = small_cfg(segment_width=8, encoder_widths=(16, 4, 4, 8, 8), image_h=16, image_w=16)
        dec = SlotDecoder(cfg).double()
        torch.manual_seed(0)
        gd = torch.tensor(rng.uniform(0.2, 0.8, (1, 8)), dtype=torch.float64, requires_grad=True)
        raw_mask = torch.tensor(rng.uniform(0, 1, (1, 1, 16, 16)), dtype=torch.float64)
        out = dec.depth_decoder(gd, raw_mask).mean()
        out.backward()
        analytic = gd.grad.clone()
        eps = 1e-6
        for i in range(8):
            plus = gd.detach().clone()
            plus[0, i] += eps
            minus = gd.detach().clone()
            minus[0, i] -= eps
            fd = (
                dec.depth_decoder(plus, raw_mask).mean()
                - dec.depth_decoder(minus, raw_mask).mean()
            ).item() / (2 * eps)
            denom = max(abs(fd), abs(analytic[0, i].item()), 1e-8)
            assert abs(fd - analytic[0, i].item()) / denom < 1e-4
