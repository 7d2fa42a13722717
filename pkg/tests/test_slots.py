import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from voxparts.errors import DimensionError
from voxparts.grids import DenseGrid
from voxparts.slots import (
    SlotState,
    entropy_loss,
    map_features,
    recon_loss,
    semantic_labels,
    slot_attend,
)


@pytest.fixture
def slots(gen64):
    return SlotState(n_slots=5, d_sem=8, d_latent=16, feature_channels=8,
                     generator=gen64, dtype=torch.float64)


class TestSlotAttend:
    def test_zero_feature_uniform_attention(self, slots):
        a, f = slot_attend(torch.zeros(8, dtype=torch.float64), slots)
        assert torch.allclose(a, torch.full((5,), 0.2, dtype=torch.float64), atol=1e-12)
        mean_slot = slots.features.data.mean(dim=0)
        assert torch.allclose(f, mean_slot, atol=1e-12)

    def test_low_temperature_snaps_to_matching_slot(self, slots):
        # query equal to a scaled slot row maximizes the dot product with it
        row = slots.features.data[3].detach()
        with torch.no_grad():
            slots.log_temp.data.fill_(math.log(1e-3))
        a, f = slot_attend(10.0 * row, slots)
        dots = (10.0 * row) @ slots.features.data.t()
        assert dots.argmax().item() == 3
        assert a[3].item() > 0.999
        assert torch.allclose(f, slots.features.data[3], atol=1e-2)

    def test_matches_scalar_oracle(self, slots, gen64):
        x = torch.randn(8, generator=gen64, dtype=torch.float64)
        a, f = slot_attend(x, slots)
        s = slots.features.numpy()
        tau = float(slots.temperature.item())
        logits = x.numpy() @ s.T / tau
        e = np.exp(logits - logits.max())
        a_ref = e / e.sum()
        np.testing.assert_allclose(a.detach().numpy(), a_ref, atol=1e-12)
        np.testing.assert_allclose(f.detach().numpy(), a_ref @ s, atol=1e-12)

    def test_attention_in_convex_hull(self, slots, gen64):
        x = torch.randn((40, 8), generator=gen64, dtype=torch.float64)
        a, f = slot_attend(x, slots)
        assert (a.sum(dim=-1) - 1).abs().max() <= 1e-9
        s = slots.features.data
        lo, hi = s.min(dim=0).values, s.max(dim=0).values
        assert (f >= lo - 1e-9).all() and (f <= hi + 1e-9).all()

    @given(st.floats(0.5, 4.0))
    @settings(max_examples=20, deadline=None)
    def test_joint_scaling_invariance(self, scale):
        g = torch.Generator().manual_seed(3)
        slots = SlotState(4, 6, 8, 6, g, dtype=torch.float64)
        x = torch.randn(6, generator=g, dtype=torch.float64)
        a1, _ = slot_attend(x, slots)
        with torch.no_grad():
            slots.log_temp.data += math.log(scale)
        a2, _ = slot_attend(x * scale, slots)
        assert torch.allclose(a1, a2, atol=1e-9)

    def test_dimension_mismatch(self, slots):
        with pytest.raises(DimensionError):
            slot_attend(torch.zeros(7, dtype=torch.float64), slots)


class TestReconLoss:
    def test_perfect_reconstruction_zero(self):
        f = torch.rand((10, 4), dtype=torch.float64)
        assert recon_loss(f, f.clone()).item() == 0.0

    def test_constant_offset(self):
        f = torch.zeros((10, 4), dtype=torch.float64)
        eps = 0.25
        assert abs(recon_loss(f + eps, f).item() - eps * 4) < 1e-12

    def test_matches_elementwise_oracle(self, gen64):
        a = torch.randn((12, 5), generator=gen64, dtype=torch.float64)
        b = torch.randn((12, 5), generator=gen64, dtype=torch.float64)
        ref = np.abs(a.numpy() - b.numpy()).sum(axis=1).mean()
        assert abs(recon_loss(a, b).item() - ref) < 1e-12

    def test_mismatch_raises(self):
        with pytest.raises(DimensionError):
            recon_loss(torch.zeros((3, 4)), torch.zeros((3, 5)))


class TestEntropyLoss:
    def test_one_hot_zero(self):
        a = torch.zeros((6, 4), dtype=torch.float64)
        a[:, 2] = 1.0
        assert entropy_loss(a).item() < 1e-8

    def test_uniform_two_way(self):
        a = torch.full((3, 2), 0.5, dtype=torch.float64)
        assert abs(entropy_loss(a).item() - math.log(2)) < 1e-9

    def test_direct_evaluation(self):
        a = torch.tensor([[0.5, 0.25, 0.25]], dtype=torch.float64)
        assert abs(entropy_loss(a).item() - 1.5 * math.log(2)) < 1e-9

    @given(st.integers(2, 6))
    @settings(max_examples=20, deadline=None)
    def test_bounds_for_normalized_input(self, n):
        g = torch.Generator().manual_seed(n)
        a = torch.rand((20, n), generator=g, dtype=torch.float64)
        a = a / a.sum(dim=-1, keepdim=True)
        val = entropy_loss(a).item()
        assert 0.0 <= val <= math.log(n) + 1e-9


class TestSemanticLabels:
    def _grid(self, vals):
        n = vals.shape[1:]
        return DenseGrid("sem", vals.shape[0], n, [0.0, 0.0, 0.0], [1.0, 1.0, 1.0],
                         vals, dtype=torch.float64)

    def test_equal_slots_tie_breaks_low(self, gen64):
        slots = SlotState(4, 8, 8, 8, gen64, dtype=torch.float64)
        with torch.no_grad():
            slots.features.data.copy_(torch.ones((4, 8), dtype=torch.float64))
        grid = self._grid(torch.rand((8, 3, 3, 3), dtype=torch.float64))
        labels = semantic_labels(grid, slots, torch.rand((20, 3), dtype=torch.float64))
        assert (labels == 0).all()

    def test_two_region_grid_partitions(self, gen64):
        slots = SlotState(2, 4, 8, 4, gen64, dtype=torch.float64)
        with torch.no_grad():
            slots.features.data.copy_(torch.tensor(
                [[4.0, 0.0, 0.0, 0.0], [0.0, 4.0, 0.0, 0.0]], dtype=torch.float64))
        vals = torch.zeros((4, 4, 3, 3), dtype=torch.float64)
        vals[0, :2] = 1.0   # low-x half points at slot 0
        vals[1, 2:] = 1.0   # high-x half points at slot 1
        grid = self._grid(vals)
        pos = torch.tensor([[0.05, 0.5, 0.5], [0.95, 0.5, 0.5]], dtype=torch.float64)
        labels = semantic_labels(grid, slots, pos)
        assert labels.tolist() == [0, 1]

    def test_deterministic(self, gen64):
        slots = SlotState(3, 6, 8, 6, gen64, dtype=torch.float64)
        grid = self._grid(torch.randn((6, 4, 4, 4), generator=gen64, dtype=torch.float64))
        pos = torch.rand((50, 3), generator=gen64, dtype=torch.float64)
        l1 = semantic_labels(grid, slots, pos)
        l2 = semantic_labels(grid, slots, pos)
        assert np.array_equal(l1, l2)
