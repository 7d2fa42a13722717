"""Bi-directional canonical-space deformation fields.

Two small MLPs map (position, time) to a displacement: the backward field
carries observed points at time t into the canonical frame (t = 0), the
forward field carries canonical points to time t. Displacements are gated to
zero at t = 0 so the canonical anchor holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .autodiff import MlpSpec, ParamTensor, init_mlp_params, mlp_apply, pe_encode
from .errors import DimensionError, UsageError

__all__ = [
    "DeformNet",
    "build_deform_net",
    "displacement",
    "deform_backward",
    "deform_forward",
    "cycle_loss",
    "voxel_velocity",
]


@dataclass
class DeformNet:
    direction: str  # "backward" (t -> canonical) or "forward" (canonical -> t)
    spec: MlpSpec
    params: list[ParamTensor]
    pe_x_freqs: int = 5
    pe_t_freqs: int = 5


def build_deform_net(direction, name, generator, width=128, depth=3,
                     pe_x_freqs=5, pe_t_freqs=5, dtype=torch.float32) -> DeformNet:
    if direction not in ("backward", "forward"):
        raise UsageError(f"unknown deformation direction '{direction}'")
    in_dim = 3 * (1 + 2 * pe_x_freqs) + (1 + 2 * pe_t_freqs)
    spec = MlpSpec(in_dim, 3, hidden_layers=depth, hidden_width=width)
    params = init_mlp_params(spec, name, generator, dtype=dtype)
    return DeformNet(direction, spec, params, pe_x_freqs, pe_t_freqs)


def displacement(net: DeformNet, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Predicted displacement at (x, t); identically zero at t = 0."""
    if x.shape[-1] != 3:
        raise DimensionError("positions must have 3 channels")
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if t.dim() == 0:
        t = t.expand(x.shape[:-1])
    enc = torch.cat(
        (pe_encode(x, net.pe_x_freqs), pe_encode(t.unsqueeze(-1), net.pe_t_freqs)),
        dim=-1,
    )
    delta = mlp_apply(net.spec, net.params, enc)
    # hard canonical anchor: no motion at the initial timestamp
    return delta * (t > 0).to(x.dtype).unsqueeze(-1)


def deform_backward(net: DeformNet, x: torch.Tensor, t) -> torch.Tensor:
    if net.direction != "backward":
        raise UsageError("deform_backward requires a backward-direction network")
    return x + displacement(net, x, t)


def deform_forward(net: DeformNet, x0: torch.Tensor, t) -> torch.Tensor:
    if net.direction != "forward":
        raise UsageError("deform_forward requires a forward-direction network")
    return x0 + displacement(net, x0, t)


def cycle_loss(bwd: DeformNet, fwd: DeformNet, x: torch.Tensor, t,
               mode: str = "co_train", ray_ids=None, n_rays: int | None = None) -> torch.Tensor:
    """Squared residual of the forward field undoing the backward field.

    With ray structure given, the mean is taken per ray first and then over
    rays; otherwise it is a flat mean over the point batch.
    """
    if x.numel() == 0:
        raise DimensionError("cycle_loss requires a non-empty point batch")
    d_b = displacement(bwd, x, t)
    if mode == "co_train":
        d_f = displacement(fwd, x + d_b, t)
        res = (d_b + d_f).square().sum(dim=-1)
    elif mode == "stop_gradient":
        d_f = displacement(fwd, x + d_b.detach(), t)
        res = (d_b.detach() + d_f).square().sum(dim=-1) \
            + (d_b + d_f.detach()).square().sum(dim=-1)
    elif mode == "separate":
        # backward field is supervised by rendering only; cycle trains forward
        d_f = displacement(fwd, x + d_b.detach(), t)
        res = (d_b.detach() + d_f).square().sum(dim=-1)
    else:
        raise UsageError(f"unknown cycle-training mode '{mode}'")
    if ray_ids is None:
        return res.mean()
    return _per_ray_mean(res, ray_ids, n_rays)


def _per_ray_mean(per_point: torch.Tensor, ray_ids: torch.Tensor, n_rays: int) -> torch.Tensor:
    sums = torch.zeros(n_rays, dtype=per_point.dtype).index_add(0, ray_ids, per_point)
    counts = torch.zeros(n_rays, dtype=per_point.dtype).index_add(
        0, ray_ids, torch.ones_like(per_point)
    )
    nonempty = counts > 0
    if not nonempty.any():
        return per_point.sum() * 0.0
    return (sums[nonempty] / counts[nonempty]).mean()


def voxel_velocity(fwd: DeformNet, x: torch.Tensor, t: int, frame_count: int) -> torch.Tensor:
    """Forward-displacement difference between consecutive frames.

    ``t`` is a 1-based frame index in [1, T-1]; frame k maps to normalized
    time k/(T-1) with frame 0 at the canonical timestamp.
    """
    if not 1 <= t <= frame_count - 1:
        raise IndexError(f"velocity frame index {t} outside [1, {frame_count - 1}]")
    tau_hi = t / (frame_count - 1)
    tau_lo = (t - 1) / (frame_count - 1)
    return displacement(fwd, x, torch.tensor(tau_hi, dtype=x.dtype)) - displacement(
        fwd, x, torch.tensor(tau_lo, dtype=x.dtype)
    )
