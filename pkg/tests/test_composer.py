import numpy as np
import pytest
import torch

from slotseg.composer import (
    ComposedScene,
    compose,
    composition_weights,
    prediction_error,
    visibility_masks,
)
from slotseg.core import SlotDecodeResult


def _decode_result(rng, h=8, w=8, dtype=torch.float64, mask=None):
    def t(*shape):
        return torch.tensor(rng.uniform(0, 1, shape), dtype=dtype)

    raw = t(1, h, w) if mask is None else mask
    return SlotDecodeResult(
        raw_mask=raw,
        visibility_mask=torch.zeros_like(raw),
        depth=t(1, h, w),
        rgb=t(3, h, w),
        position_map=t(1, h, w),
    )


def _random_scene(rng, k=3, h=8, w=8):
    slots = [_decode_result(rng, h, w) for _ in range(k)]
    rho = torch.tensor(rng.uniform(-2, 2, k), dtype=torch.float64)
    bg_rgb = torch.tensor(rng.uniform(0, 1, (3, h, w)), dtype=torch.float64)
    bg_depth = torch.tensor(rng.uniform(0, 1, (1, h, w)), dtype=torch.float64)
    bg_mask = torch.tensor(rng.uniform(0, 1, (1, h, w)), dtype=torch.float64)
    return slots, rho, bg_rgb, bg_depth, bg_mask


class TestCompose:
    def test_single_full_slot_dominates(self, rng):
        h = w = 8
        slot = _decode_result(rng, h, w, mask=torch.ones(1, h, w, dtype=torch.float64))
        scene = compose(
            [slot],
            torch.zeros(1, dtype=torch.float64),
            bg_rgb=torch.full((3, h, w), 0.2, dtype=torch.float64),
            bg_depth=torch.zeros(1, h, w, dtype=torch.float64),
            bg_mask=torch.zeros(1, h, w, dtype=torch.float64),
        )
        assert (scene.rgb - slot.rgb).abs().max().item() < 1e-5

    def test_priority_saturation(self, rng):
        h = w = 8
        ones = torch.ones(1, h, w, dtype=torch.float64)
        s1 = _decode_result(rng, h, w, mask=ones)
        s2 = _decode_result(rng, h, w, mask=ones.clone())
        scene = compose(
            [s1, s2],
            torch.tensor([20.0, 0.0], dtype=torch.float64),
            bg_rgb=torch.zeros(3, h, w, dtype=torch.float64),
            bg_depth=torch.zeros(1, h, w, dtype=torch.float64),
            bg_mask=torch.zeros(1, h, w, dtype=torch.float64),
        )
        assert (scene.rgb - s1.rgb).abs().max().item() < 1e-6

    def test_priority_shift_invariance(self, rng):
        slots, rho, bg_rgb, bg_depth, bg_mask = _random_scene(rng)
        a = compose(slots, rho, bg_rgb, bg_depth, bg_mask, rho_bg=0.0)
        c = 3.7
        b = compose(slots, rho + c, bg_rgb, bg_depth, bg_mask, rho_bg=c)
        assert (a.visibility - b.visibility).abs().max().item() < 1e-9
        assert (a.background_weight - b.background_weight).abs().max().item() < 1e-9

    def test_weights_sum_to_one(self, rng):
        for _ in range(20):
            slots, rho, bg_rgb, bg_depth, bg_mask = _random_scene(rng)
            scene = compose(slots, rho, bg_rgb, bg_depth, bg_mask)
            total = scene.visibility.sum(dim=0) + scene.background_weight
            assert (total - 1.0).abs().max().item() < 1e-5

    def test_weights_sum_to_one_all_zero_pixel(self, rng):
        h = w = 4
        zeros = torch.zeros(1, h, w, dtype=torch.float64)
        slots = [_decode_result(rng, h, w, mask=zeros)]
        scene = compose(
            slots,
            torch.zeros(1, dtype=torch.float64),
            bg_rgb=torch.zeros(3, h, w, dtype=torch.float64),
            bg_depth=zeros,
            bg_mask=zeros,
        )
        total = scene.visibility.sum(dim=0) + scene.background_weight
        assert torch.allclose(total, torch.ones_like(total))
        # background absorbs the empty pixel entirely
        assert torch.allclose(scene.background_weight, torch.ones_like(scene.background_weight))

    def test_visibility_zero_where_mask_zero(self, rng):
        slots, rho, bg_rgb, bg_depth, bg_mask = _random_scene(rng)
        sparse = slots[0].raw_mask.clone()
        sparse[:, ::2] = 0.0
        slots[0] = slots[0].with_visibility(slots[0].visibility_mask)
        slots[0] = SlotDecodeResult(
            raw_mask=sparse,
            visibility_mask=slots[0].visibility_mask,
            depth=slots[0].depth,
            rgb=slots[0].rgb,
            position_map=slots[0].position_map,
        )
        scene = compose(slots, rho, bg_rgb, bg_depth, bg_mask)
        assert (scene.visibility[0][sparse == 0] == 0).all()

    def test_slot_permutation_equivariance(self, rng):
        slots, rho, bg_rgb, bg_depth, bg_mask = _random_scene(rng, k=4)
        perm = [2, 0, 3, 1]
        a = compose(slots, rho, bg_rgb, bg_depth, bg_mask)
        b = compose([slots[i] for i in perm], rho[perm], bg_rgb, bg_depth, bg_mask)
        assert torch.equal(a.visibility[perm], b.visibility)
        assert torch.equal(a.rgb, b.rgb)

    def test_visibility_mask_bounded_by_raw(self, rng):
        slots, rho, bg_rgb, bg_depth, bg_mask = _random_scene(rng)
        scene = compose(slots, rho, bg_rgb, bg_depth, bg_mask)
        updated = visibility_masks(slots, scene.visibility)
        for s in updated:
            assert (s.visibility_mask <= s.raw_mask + 1e-12).all()


class TestPredictionError:
    def test_perfect_prediction_zero(self, rng):
        x = torch.tensor(rng.uniform(0, 1, (3, 8, 8)))
        assert prediction_error(x, x).abs().max().item() == 0.0

    def test_unit_error(self):
        e = prediction_error(torch.zeros(3, 4, 4), torch.ones(3, 4, 4))
        assert torch.equal(e, torch.ones(1, 4, 4))

    def test_matches_direct_oracle(self, rng):
        a = torch.tensor(rng.uniform(0, 1, (3, 8, 8)), dtype=torch.float64)
        b = torch.tensor(rng.uniform(0, 1, (3, 8, 8)), dtype=torch.float64)
        e = prediction_error(a, b).numpy()
        oracle = np.abs(a.numpy() - b.numpy()).mean(axis=0, keepdims=True)
        assert np.abs(e - oracle).max() < 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            prediction_error(torch.zeros(3, 4, 4), torch.zeros(3, 8, 8))
