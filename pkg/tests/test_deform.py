import numpy as np
import pytest
import torch

from voxparts.autodiff import grad_check, mlp_apply, pe_encode
from voxparts.deform import (
    build_deform_net,
    cycle_loss,
    deform_backward,
    deform_forward,
    displacement,
    voxel_velocity,
)


@pytest.fixture
def nets(gen64):
    bwd = build_deform_net("backward", "bwd", gen64, width=16, depth=2, dtype=torch.float64)
    fwd = build_deform_net("forward", "fwd", gen64, width=16, depth=2, dtype=torch.float64)
    return bwd, fwd


def set_constant_output(net, value):
    """Zero all layers, then set the final bias to a constant displacement."""
    with torch.no_grad():
        for p in net.params:
            p.data.zero_()
        net.params[-1].data.copy_(torch.tensor(value, dtype=net.params[-1].data.dtype))


class TestIdentityAnchors:
    def test_t_zero_is_exact_identity(self, nets):
        bwd, fwd = nets
        x = torch.randn((10, 3), dtype=torch.float64)
        assert torch.equal(deform_backward(bwd, x, torch.zeros(10, dtype=torch.float64)), x)
        assert torch.equal(deform_forward(fwd, x, torch.tensor(0.0, dtype=torch.float64)), x)

    def test_zero_weights_identity(self, nets):
        bwd, _ = nets
        set_constant_output(bwd, [0.0, 0.0, 0.0])
        x = torch.randn((7, 3), dtype=torch.float64)
        out = deform_backward(bwd, x, torch.full((7,), 0.6, dtype=torch.float64))
        assert torch.allclose(out, x, atol=1e-12)

    def test_fixed_net_matches_compositional_oracle(self, nets):
        bwd, _ = nets
        x = torch.tensor([[0.2, -0.4, 0.9]], dtype=torch.float64)
        t = torch.tensor([0.35], dtype=torch.float64)
        out = deform_backward(bwd, x, t)
        enc = torch.cat(
            (pe_encode(x, bwd.pe_x_freqs), pe_encode(t.unsqueeze(-1), bwd.pe_t_freqs)),
            dim=-1,
        )
        ref = x + mlp_apply(bwd.spec, bwd.params, enc)
        assert torch.allclose(out, ref, atol=1e-12)


class TestCycleLoss:
    def test_zero_nets_zero_loss(self, nets):
        bwd, fwd = nets
        set_constant_output(bwd, [0.0, 0.0, 0.0])
        set_constant_output(fwd, [0.0, 0.0, 0.0])
        x = torch.randn((20, 3), dtype=torch.float64)
        t = torch.full((20,), 0.5, dtype=torch.float64)
        assert cycle_loss(bwd, fwd, x, t).item() == 0.0

    def test_exact_inverse_pair_zero(self, nets):
        bwd, fwd = nets
        set_constant_output(bwd, [0.3, -0.2, 0.1])
        set_constant_output(fwd, [-0.3, 0.2, -0.1])
        x = torch.randn((20, 3), dtype=torch.float64)
        t = torch.full((20,), 0.7, dtype=torch.float64)
        assert cycle_loss(bwd, fwd, x, t).item() <= 1e-30

    def test_unmatched_displacement_gives_norm_squared(self, nets):
        bwd, fwd = nets
        d = [0.3, -0.2, 0.1]
        set_constant_output(bwd, d)
        set_constant_output(fwd, [0.0, 0.0, 0.0])
        x = torch.randn((20, 3), dtype=torch.float64)
        t = torch.full((20,), 0.7, dtype=torch.float64)
        expected = float(np.sum(np.array(d) ** 2))
        assert abs(cycle_loss(bwd, fwd, x, t).item() - expected) < 1e-12

    def test_nonnegative(self, nets):
        bwd, fwd = nets
        x = torch.randn((50, 3), dtype=torch.float64)
        t = torch.rand(50, dtype=torch.float64)
        assert cycle_loss(bwd, fwd, x, t).item() >= 0.0

    def test_gradients_flow_to_both_nets(self, nets):
        bwd, fwd = nets
        x0 = torch.randn((4, 3), dtype=torch.float64)
        t = torch.full((4,), 0.4, dtype=torch.float64)

        for net in (bwd, fwd):
            w0 = net.params[0]
            flat0 = w0.data.detach().clone().reshape(-1)

            def fn(v):
                old = w0.data
                w0.data = v.reshape(w0.shape).requires_grad_(True)
                try:
                    return cycle_loss(bwd, fwd, x0, t)
                finally:
                    w0.data = old

            err = grad_check(fn, flat0)
            assert err <= 1e-4

    def test_stop_gradient_mode_blocks_one_side(self, nets):
        bwd, fwd = nets
        x = torch.randn((6, 3), dtype=torch.float64)
        t = torch.full((6,), 0.5, dtype=torch.float64)
        loss = cycle_loss(bwd, fwd, x, t, mode="stop_gradient")
        loss.backward()
        assert all(p.data.grad is not None for p in bwd.params[:1])
        assert all(p.data.grad is not None for p in fwd.params[:1])

    def test_separate_mode_gives_backward_no_gradient(self, nets):
        bwd, fwd = nets
        x = torch.randn((6, 3), dtype=torch.float64)
        t = torch.full((6,), 0.5, dtype=torch.float64)
        loss = cycle_loss(bwd, fwd, x, t, mode="separate")
        loss.backward()
        assert bwd.params[0].data.grad is None
        assert fwd.params[0].data.grad is not None


class TestVoxelVelocity:
    def test_static_scene_zero_velocity(self, nets):
        _, fwd = nets
        set_constant_output(fwd, [0.0, 0.0, 0.0])
        x = torch.randn((5, 3), dtype=torch.float64)
        for t in range(1, 10):
            v = voxel_velocity(fwd, x, t, 10)
            assert torch.allclose(v, torch.zeros_like(v), atol=1e-12)

    def test_linear_motion_constant_velocity(self, gen64):
        # hand-build a net whose displacement is exactly s * t * (T-1): the raw
        # time channel of the encoding feeds one relu unit (t >= 0 so relu is
        # identity) scaled into the output layer
        fwd = build_deform_net("forward", "fwd", gen64, width=4, depth=1,
                               pe_x_freqs=1, pe_t_freqs=1, dtype=torch.float64)
        s = torch.tensor([0.2, -0.1, 0.05], dtype=torch.float64)
        frame_count = 6
        t_channel = 3 * (1 + 2 * 1)  # raw time sits right after the position block
        with torch.no_grad():
            for p in fwd.params:
                p.data.zero_()
            fwd.params[0].data[t_channel, 0] = 1.0
            fwd.params[2].data[0, :] = s * (frame_count - 1)
        x = torch.randn((8, 3), dtype=torch.float64)
        for t in range(1, frame_count):
            v = voxel_velocity(fwd, x, t, frame_count)
            assert (v - s).abs().max().item() < 1e-9

    def test_out_of_range_raises(self, nets):
        _, fwd = nets
        x = torch.zeros((1, 3), dtype=torch.float64)
        with pytest.raises(IndexError):
            voxel_velocity(fwd, x, 0, 10)
        with pytest.raises(IndexError):
            voxel_velocity(fwd, x, 10, 10)
