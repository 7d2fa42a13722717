"""Projection-free slot attention over semantic voxel features.

N global slot vectors compete for every queried point feature through a
temperature softmax on raw dot products; there are no query/key/value
projections. The module also owns the feature reconstruction and entropy
losses and the per-voxel semantic labeling used by grid initialization.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .autodiff import ParamTensor, softmax
from .errors import DimensionError
from .grids import DenseGrid, trilinear_interp

__all__ = [
    "SlotState",
    "slot_attend",
    "recon_loss",
    "entropy_loss",
    "semantic_labels",
]


class SlotState:
    """Global slot features, learnable temperature, output map and latents."""

    def __init__(self, n_slots, d_sem, d_latent, feature_channels, generator,
                 dtype=torch.float32):
        self.n_slots = int(n_slots)
        self.d_sem = int(d_sem)
        self.d_latent = int(d_latent)
        scale = 1.0 / math.sqrt(d_sem)
        self.features = ParamTensor(
            "slots.features",
            torch.randn((n_slots, d_sem), generator=generator, dtype=torch.float64).to(dtype)
            * scale,
        )
        # temperature stored as log so it stays positive
        self.log_temp = ParamTensor(
            "slots.log_temp", torch.full((1,), math.log(math.sqrt(d_sem)), dtype=dtype)
        )
        bound = math.sqrt(6.0 / d_sem)
        self.out_w = ParamTensor(
            "slots.out_w",
            ((torch.rand((d_sem, feature_channels), generator=generator,
                         dtype=torch.float64) * 2 - 1) * bound).to(dtype),
        )
        self.out_b = ParamTensor("slots.out_b", torch.zeros(feature_channels, dtype=dtype))
        self.latents = ParamTensor(
            "slots.latents",
            torch.randn((n_slots, d_latent), generator=generator, dtype=torch.float64).to(dtype)
            * 0.1,
        )

    @property
    def temperature(self) -> torch.Tensor:
        return torch.exp(self.log_temp.data)

    def parameters(self) -> list[ParamTensor]:
        return [self.features, self.log_temp, self.out_w, self.out_b, self.latents]


def slot_attend(f_s0: torch.Tensor, slots: SlotState):
    """Bind point features to slots.

    Returns ``(A, f_s)`` where A are the per-slot probabilities from the
    temperature softmax of raw dot products and f_s is the attention-weighted
    slot mixture.
    """
    if f_s0.shape[-1] != slots.d_sem:
        raise DimensionError(
            f"point features have {f_s0.shape[-1]} channels, slots expect {slots.d_sem}"
        )
    s = slots.features.data.to(f_s0.dtype)
    logits = f_s0 @ s.t()
    a = softmax(logits, slots.temperature.to(f_s0.dtype), dim=-1)
    return a, a @ s


def map_features(f_hat: torch.Tensor, slots: SlotState) -> torch.Tensor:
    """Linear map from slot-feature space to the observed feature channels."""
    return f_hat @ slots.out_w.data.to(f_hat.dtype) + slots.out_b.data.to(f_hat.dtype)


def recon_loss(f_mapped: torch.Tensor, f_target: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the L1 norm between predicted and observed features."""
    if f_mapped.shape != f_target.shape:
        raise DimensionError(
            f"feature shapes differ: {tuple(f_mapped.shape)} vs {tuple(f_target.shape)}"
        )
    return (f_mapped - f_target).abs().sum(dim=-1).mean()


def entropy_loss(a_hat: torch.Tensor, floor: float = 1e-10) -> torch.Tensor:
    """Mean over rays of the entropy of the rendered slot probabilities."""
    a = a_hat.clamp(min=floor)
    return (-(a * a.log()).sum(dim=-1)).mean()


def semantic_labels(sem_grid: DenseGrid, slots: SlotState,
                    positions: torch.Tensor) -> np.ndarray:
    """Argmax slot per canonical position; ties break to the lowest index."""
    with torch.no_grad():
        f = trilinear_interp(sem_grid, positions)
        a, _ = slot_attend(f, slots)
    return np.argmax(a.detach().cpu().numpy(), axis=-1)
