import numpy as np
import pytest
import torch

from slotseg.background import (
    BackgroundExtractor,
    UncertaintyNet,
    background_pretrain_loss,
    binarize,
    uncertainty_bce_loss,
)
from slotseg.config import ModelConfig, paper_config, validate_config


def small_cfg(**kwargs) -> ModelConfig:
    base = dict(
        image_h=64,
        image_w=64,
        num_slots=2,
        segment_width=8,
        encoder_widths=(16, 4, 8, 8, 8),
        predictor_width=32,
        kernel_size=3,
        background_widths=(4, 8, 8, 8),
        background_token_width=16,
    )
    base.update(kwargs)
    return validate_config(ModelConfig(**base))


class TestUncertaintyNet:
    def test_output_shape_and_bounds(self, rng):
        cfg = small_cfg()
        net = UncertaintyNet(cfg)
        rgb = torch.tensor(rng.uniform(0, 1, (3, 64, 64)), dtype=torch.float32)
        depth = torch.tensor(rng.uniform(0, 1, (1, 64, 64)), dtype=torch.float32)
        u = net(rgb, depth)
        assert u.shape == (1, 64, 64)
        assert (u >= 0).all() and (u <= 1).all()

    def test_resolution_not_divisible_raises(self, rng):
        cfg = small_cfg()
        net = UncertaintyNet(cfg)
        rgb = torch.zeros(3, 48, 48)
        depth = torch.zeros(1, 48, 48)
        with pytest.raises(ValueError, match="divisible by 64"):
            net(rgb, depth)

    def test_constant_input_near_constant_interior(self):
        cfg = small_cfg()
        net = UncertaintyNet(cfg)
        rgb = torch.full((3, 64, 64), 0.5)
        depth = torch.full((1, 64, 64), 0.5)
        u = net(rgb, depth)[0]
        interior = u[16:-16, 16:-16]
        assert (interior.max() - interior.min()).item() < 0.2

    def test_rgb_only_variant(self, rng):
        cfg = small_cfg(depth_input=False)
        net = UncertaintyNet(cfg)
        assert net.in_channels == 3
        u = net(torch.rand(3, 64, 64))
        assert u.shape == (1, 64, 64)

    def test_paper_scale_widths(self):
        cfg = paper_config()
        net = UncertaintyNet(cfg)
        assert net.down1[0].conv.in_channels == 4
        assert net.down1[0].conv.out_channels == 16
        assert net.down1[0].conv.kernel_size == (4, 4)
        assert net.bottom[0].conv.out_channels == 128
        assert net.head.conv.out_channels == 1

    def test_bce_loss_basics(self):
        fg = torch.zeros(1, 8, 8)
        fg[0, :4] = 1.0
        perfect = fg.clamp(1e-6, 1 - 1e-6)
        assert uncertainty_bce_loss(perfect, fg).item() < 1e-4
        assert uncertainty_bce_loss(1.0 - perfect, fg).item() > 1.0


class TestBackgroundExtractor:
    def test_full_masking_makes_output_input_independent(self, rng):
        cfg = small_cfg()
        net = BackgroundExtractor(cfg)
        ones = torch.ones(1, 64, 64)
        rgb1 = torch.tensor(rng.uniform(0, 1, (3, 64, 64)), dtype=torch.float32)
        rgb2 = torch.tensor(rng.uniform(0, 1, (3, 64, 64)), dtype=torch.float32)
        d1 = torch.tensor(rng.uniform(0, 1, (1, 64, 64)), dtype=torch.float32)
        d2 = torch.tensor(rng.uniform(0, 1, (1, 64, 64)), dtype=torch.float32)
        out1 = net(rgb1, d1, ones)
        out2 = net(rgb2, d2, ones)
        assert (out1[0] - out2[0]).abs().max().item() < 1e-6
        assert (out1[1] - out2[1]).abs().max().item() < 1e-6

    def test_no_masking_keeps_input_dependence(self, rng):
        cfg = small_cfg()
        net = BackgroundExtractor(cfg)
        zeros = torch.zeros(1, 64, 64)
        rgb1 = torch.tensor(rng.uniform(0, 1, (3, 64, 64)), dtype=torch.float32)
        rgb2 = torch.tensor(rng.uniform(0, 1, (3, 64, 64)), dtype=torch.float32)
        depth = torch.tensor(rng.uniform(0, 1, (1, 64, 64)), dtype=torch.float32)
        out1 = net(rgb1, depth, zeros)
        out2 = net(rgb2, depth, zeros)
        assert (out1[0] - out2[0]).abs().max().item() > 0

    def test_bg_mask_is_inverse_uncertainty(self, rng):
        cfg = small_cfg()
        net = BackgroundExtractor(cfg)
        u = torch.tensor(rng.uniform(0, 1, (1, 64, 64)), dtype=torch.float32)
        _, _, bg = net(torch.rand(3, 64, 64), torch.rand(1, 64, 64), u)
        assert torch.allclose(bg, 1.0 - u)

    def test_binarize_eval_is_identity(self, rng):
        x = torch.tensor(rng.uniform(0, 1, 32), dtype=torch.float32)
        assert torch.equal(binarize(x, train=False), x)

    def test_binarize_train_seeded_determinism(self, rng):
        cfg = small_cfg()
        net = BackgroundExtractor(cfg)
        rgb = torch.tensor(rng.uniform(0, 1, (3, 64, 64)), dtype=torch.float32)
        depth = torch.tensor(rng.uniform(0, 1, (1, 64, 64)), dtype=torch.float32)
        u = torch.tensor(rng.uniform(0, 0.2, (1, 64, 64)), dtype=torch.float32)
        g1 = torch.Generator().manual_seed(3)
        g2 = torch.Generator().manual_seed(3)
        out1 = net(rgb, depth, u, train=True, generator=g1)
        out2 = net(rgb, depth, u, train=True, generator=g2)
        assert torch.equal(out1[0], out2[0])
        assert torch.equal(out1[1], out2[1])
        g3 = torch.Generator().manual_seed(4)
        out3 = net(rgb, depth, u, train=True, generator=g3)
        assert not torch.equal(out1[1], out3[1])

    def test_paper_scale_patch_embed(self):
        cfg = paper_config()
        net = BackgroundExtractor(cfg)
        first = net.patch_embed[0]
        assert first.in_channels == 4 and first.out_channels == 256
        assert first.kernel_size == (16, 16) and first.stride == (16, 16)
        assert net.patch_embed[2].out_channels == 64


class TestPretrainLoss:
    def test_fully_masked_is_zero(self, rng):
        t = lambda *s: torch.tensor(rng.uniform(0, 1, s), dtype=torch.float64)
        loss = background_pretrain_loss(
            t(3, 8, 8), t(1, 8, 8), t(3, 8, 8), t(1, 8, 8), torch.ones(1, 8, 8)
        )
        assert loss.item() == 0.0

    def test_perfect_reconstruction_is_zero(self, rng):
        rgb = torch.tensor(rng.uniform(0, 1, (3, 8, 8)), dtype=torch.float64)
        depth = torch.tensor(rng.uniform(0, 1, (1, 8, 8)), dtype=torch.float64)
        loss = background_pretrain_loss(rgb, depth, rgb, depth, torch.zeros(1, 8, 8))
        assert loss.item() == 0.0

    def test_half_masked_constant_error(self):
        h = w = 8
        target = torch.zeros(3, h, w, dtype=torch.float64)
        pred = torch.full((3, h, w), 0.2, dtype=torch.float64)  # err^2 = 0.04/channel
        depth = torch.zeros(1, h, w, dtype=torch.float64)
        fg = torch.zeros(1, h, w, dtype=torch.float64)
        fg[:, :, : w // 2] = 1.0
        loss = background_pretrain_loss(pred, depth, target, depth, fg)
        assert loss.item() == pytest.approx(0.04, abs=1e-12)

    def test_gradient_masked_out_on_foreground(self, rng):
        pred = torch.tensor(rng.uniform(0, 1, (3, 4, 4)), requires_grad=True)
        depth = torch.zeros(1, 4, 4)
        target = torch.zeros(3, 4, 4)
        fg = torch.zeros(1, 4, 4)
        fg[0, 0, 0] = 1.0
        loss = background_pretrain_loss(pred, depth, target, depth, fg)
        loss.backward()
        assert pred.grad[:, 0, 0].abs().max().item() == 0.0
        assert pred.grad.abs().max().item() > 0.0
