import math

import numpy as np
import pytest
import torch

from slotseg.core import PositionCode
from slotseg.position import (
    coordinate_grid,
    features_to_position,
    gaussian_map,
    pixel_centers,
    position_pool,
    position_to_gaussian,
)


class TestGaussianMap:
    def test_centered_map_symmetric(self):
        q = position_to_gaussian(PositionCode(0.0, 0.0, 0.5), 16, 16)[0]
        # the four central pixels tie for the maximum
        m = q.max()
        centers = torch.tensor([q[7, 7], q[7, 8], q[8, 7], q[8, 8]])
        assert torch.allclose(centers, m.expand(4))
        assert (q <= m).all()
        # symmetric under 90-degree rotation
        assert torch.allclose(q, torch.rot90(q), atol=1e-7)

    def test_huge_sigma_approaches_ones(self):
        q = position_to_gaussian(PositionCode(0.0, 0.0, 100.0), 16, 16)
        assert (q.max() - q.min()).item() < 1e-3

    def test_argmax_at_nearest_pixel_brute_force(self):
        p = PositionCode(0.5, -0.5, 0.1)
        q = position_to_gaussian(p, 32, 32, dtype=torch.float64)[0]
        # independent exhaustive scan over all pixel centers
        best, best_d = None, math.inf
        us = pixel_centers(32, dtype=torch.float64)
        for i in range(32):
            for j in range(32):
                d = (us[j] - p.x) ** 2 + (us[i] - p.y) ** 2
                if d < best_d:
                    best_d, best = d, (i, j)
        flat_argmax = int(q.argmax())
        assert (flat_argmax // 32, flat_argmax % 32) == best

    def test_strictly_positive(self):
        # float64 keeps the exponential tail representable across the grid
        q = position_to_gaussian(PositionCode(0.9, 0.9, 0.2), 16, 16, dtype=torch.float64)
        assert (q > 0).all()

    def test_ignores_priority(self):
        a = gaussian_map(torch.tensor([0.1, 0.2, 0.3, 0.0]), 8, 8)
        b = gaussian_map(torch.tensor([0.1, 0.2, 0.3, 5.0]), 8, 8)
        assert torch.equal(a, b)

    def test_bad_size_raises(self):
        with pytest.raises(ValueError):
            position_to_gaussian(PositionCode(0, 0, 0.1), 0, 4)


class TestFeaturesToPosition:
    def test_one_hot_activation_reads_cell_center(self):
        fmap = torch.zeros(4, 8, 8, dtype=torch.float64)
        fmap[0, 2, 5] = 500.0
        fmap[1, 2, 5] = 500.0
        pos = features_to_position(fmap)
        us = pixel_centers(8, dtype=torch.float64)
        assert abs(pos[0].item() - us[5].item()) < 1e-6
        assert abs(pos[1].item() - us[2].item()) < 1e-6

    def test_uniform_map_reads_center(self):
        pos = features_to_position(torch.full((4, 8, 8), 0.7, dtype=torch.float64))
        assert abs(pos[0].item()) < 1e-12
        assert abs(pos[1].item()) < 1e-12

    def test_matches_direct_summation_oracle(self, rng):
        fmap = torch.tensor(rng.standard_normal((4, 8, 8)))
        pos = features_to_position(fmap, sigma_min=1e-3)
        # independent direct-summation oracle in numpy
        f = fmap.numpy()
        logits = (f[0] + f[1]).ravel()
        w = np.exp(logits - logits.max())
        w = w / w.sum()
        us = np.array([-1 + (2 * j + 1) / 8 for j in range(8)])
        uu = np.tile(us, 8)
        vv = np.repeat(us, 8)
        x = (w * uu).sum()
        y = (w * vv).sum()
        size_raw = (w * f[2].ravel()).sum()
        sigma = 1e-3 + 2.0 / (1.0 + math.exp(-size_raw))
        rho = (w * f[3].ravel()).sum()
        assert abs(pos[0].item() - x) < 1e-10
        assert abs(pos[1].item() - y) < 1e-10
        assert abs(pos[2].item() - sigma) < 1e-10
        assert abs(pos[3].item() - rho) < 1e-10

    def test_all_neg_inf_falls_back_to_uniform(self):
        fmap = torch.full((4, 8, 8), -math.inf)
        fmap[2] = 0.0
        fmap[3] = 1.0
        pos = features_to_position(fmap)
        assert abs(pos[0].item()) < 1e-6
        assert abs(pos[1].item()) < 1e-6
        assert torch.isfinite(pos).all()

    def test_wrong_channels_raises(self):
        with pytest.raises(ValueError, match="4 channels"):
            features_to_position(torch.zeros(3, 8, 8))


class TestPositionPool:
    def test_constant_map_returns_constant(self):
        fmap = torch.full((3, 5, 5), 2.5, dtype=torch.float64)
        pos = torch.tensor([0.3, -0.2, 0.4, 0.0], dtype=torch.float64)
        pooled = position_pool(fmap, pos)
        assert torch.allclose(pooled, torch.full((3,), 2.5, dtype=torch.float64), atol=1e-8)

    def test_small_sigma_reads_nearest_pixel(self):
        fmap = torch.tensor(np.random.default_rng(7).standard_normal((2, 6, 6)))
        pos = torch.tensor([0.5, -0.5, 1e-4, 0.0], dtype=torch.float64)
        pooled = position_pool(fmap, pos)
        us = pixel_centers(6, dtype=torch.float64)
        j = int(torch.argmin((us - 0.5) ** 2))
        i = int(torch.argmin((us + 0.5) ** 2))
        assert torch.allclose(pooled, fmap[:, i, j], atol=1e-8)

    def test_matches_direct_weighted_sum_oracle(self, rng):
        fmap = torch.tensor(rng.standard_normal((3, 4, 4)))
        pos = torch.tensor([0.25, -0.1, 0.3, 1.0], dtype=torch.float64)
        pooled = position_pool(fmap, pos)
        us = np.array([-1 + (2 * j + 1) / 4 for j in range(4)])
        w = np.zeros((4, 4))
        for i in range(4):
            for j in range(4):
                w[i, j] = math.exp(-((us[j] - 0.25) ** 2 + (us[i] + 0.1) ** 2) / (2 * 0.3**2))
        w /= w.sum()
        expected = (fmap.numpy() * w[None]).sum(axis=(1, 2))
        assert np.abs(pooled.numpy() - expected).max() < 1e-10

    def test_weights_sum_to_one(self):
        # pooling a constant-ones map must return exactly ~1 in every channel
        fmap = torch.ones(4, 7, 9, dtype=torch.float64)
        for x, y, s in [(0.9, 0.9, 0.05), (-0.3, 0.4, 2.0), (0.0, 0.0, 0.2)]:
            pooled = position_pool(fmap, torch.tensor([x, y, s, 0.0], dtype=torch.float64))
            assert torch.allclose(pooled, torch.ones(4, dtype=torch.float64), atol=1e-8)


class TestRoundTrip:
    def test_gaussian_then_readout_recovers_position(self, rng):
        # peaked attention from the heatmap recovers (x, y) within a pixel
        for _ in range(25):
            x, y = rng.uniform(-0.5, 0.5, 2)
            sigma = rng.uniform(0.05, 0.25)
            h = w = 16
            q = gaussian_map(torch.tensor([x, y, sigma, 0.0], dtype=torch.float64), h, w)
            fmap = torch.zeros(4, h, w, dtype=torch.float64)
            fmap[0] = 20.0 * q[0]
            fmap[1] = 20.0 * q[0]
            pos = features_to_position(fmap)
            pitch = 2.0 / w
            assert abs(pos[0].item() - x) <= pitch
            assert abs(pos[1].item() - y) <= pitch

    def test_batched_matches_single(self, rng):
        fmap = torch.tensor(rng.standard_normal((3, 4, 6, 6)))
        single = torch.stack([features_to_position(fmap[i]) for i in range(3)])
        batched = features_to_position(fmap)
        assert torch.allclose(single, batched)
        pos = torch.tensor(rng.uniform(-0.5, 0.5, (3, 4)))
        pos[:, 2] = 0.3
        feat = torch.tensor(rng.standard_normal((3, 5, 6, 6)))
        single_pool = torch.stack([position_pool(feat[i], pos[i]) for i in range(3)])
        assert torch.allclose(single_pool, position_pool(feat, pos))
