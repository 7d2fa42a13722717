"""Bundle of every learnable piece of the scene representation.

One SceneModel owns the four voxel grids, the two deformation fields, the
slot state and the two renderer MLPs, and knows which parameters each
training stage optimizes.
"""

from __future__ import annotations

import torch

from .autodiff import MlpSpec, ParamTensor, init_mlp_params
from .deform import build_deform_net
from .grids import DenseGrid, OccupancyGrid
from .slots import SlotState

__all__ = ["SceneModel"]


class SceneModel:
    def __init__(
        self,
        extents,
        bbox_min,
        bbox_max,
        n_slots=8,
        d_color=6,
        d_sem=16,
        d_latent=64,
        feature_channels=16,
        color_strides=(2, 4),
        density_shift=-10.0,
        deform_width=128,
        deform_depth=3,
        pe_x_freqs=5,
        pe_t_freqs=5,
        renderer_width=128,
        renderer_depth=2,
        pe_feat_freqs=0,
        pe_dir_freqs=2,
        generator=None,
        dtype=torch.float32,
    ):
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        self.extents = tuple(int(n) for n in extents)
        self.n_slots = int(n_slots)
        self.d_color = int(d_color)
        self.d_sem = int(d_sem)
        self.d_latent = int(d_latent)
        self.color_strides = tuple(int(s) for s in color_strides)
        self.density_shift = float(density_shift)
        self.pe_feat_freqs = int(pe_feat_freqs)
        self.pe_dir_freqs = int(pe_dir_freqs)
        self.dtype = dtype

        def noise(shape, scale):
            return torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype) * scale

        # opacity raw values start at zero: with the softplus shift this
        # renders the scene as empty space
        self.opacity = DenseGrid("grid.opacity", 1, extents, bbox_min, bbox_max, dtype=dtype)
        self.color = DenseGrid(
            "grid.color", d_color, extents, bbox_min, bbox_max,
            noise((d_color, *self.extents), 0.01), dtype=dtype,
        )
        self.semantic = DenseGrid(
            "grid.semantic", d_sem, extents, bbox_min, bbox_max,
            noise((d_sem, *self.extents), 0.01), dtype=dtype,
        )
        self.occupancy = OccupancyGrid(
            "grid.occupancy", n_slots, extents, bbox_min, bbox_max, dtype=dtype
        )

        self.bwd_deform = build_deform_net(
            "backward", "deform.backward", generator, width=deform_width,
            depth=deform_depth, pe_x_freqs=pe_x_freqs, pe_t_freqs=pe_t_freqs, dtype=dtype,
        )
        self.fwd_deform = build_deform_net(
            "forward", "deform.forward", generator, width=deform_width,
            depth=deform_depth, pe_x_freqs=pe_x_freqs, pe_t_freqs=pe_t_freqs, dtype=dtype,
        )
        self.slots = SlotState(n_slots, d_sem, d_latent, feature_channels, generator, dtype=dtype)

        d_feat = d_color * (1 + len(self.color_strides))
        feat_enc = d_feat * (1 + 2 * pe_feat_freqs)
        dir_enc = 3 * (1 + 2 * pe_dir_freqs)
        self._renderer_shape = (renderer_depth, renderer_width)
        self.warmup_mlp_spec = MlpSpec(feat_enc + dir_enc, 3, renderer_depth, renderer_width)
        self.warmup_mlp = init_mlp_params(self.warmup_mlp_spec, "render.warmup", generator, dtype)
        self.comp_mlp_spec = MlpSpec(
            feat_enc + dir_enc + d_latent, 3, renderer_depth, renderer_width
        )
        self.comp_mlp = init_mlp_params(self.comp_mlp_spec, "render.comp", generator, dtype)

    @property
    def bbox_min(self):
        return self.opacity.bbox_min

    @property
    def bbox_max(self):
        return self.opacity.bbox_max

    def reinit_joint_head(self, generator) -> None:
        """Fresh latent codes and compositional renderer for the joint stage."""
        depth, width = self._renderer_shape
        self.comp_mlp = init_mlp_params(self.comp_mlp_spec, "render.comp", generator, self.dtype)
        with torch.no_grad():
            fresh = torch.randn(
                (self.n_slots, self.d_latent), generator=generator, dtype=torch.float64
            ).to(self.dtype) * 0.1
            self.slots.latents.data.copy_(fresh)

    def param_dict(self) -> dict[str, ParamTensor]:
        params: list[ParamTensor] = [
            self.opacity.values,
            self.color.values,
            self.semantic.values,
            self.occupancy.values,
        ]
        params += self.bwd_deform.params
        params += self.fwd_deform.params
        params += self.slots.parameters()
        params += self.warmup_mlp
        params += self.comp_mlp
        return {p.name: p for p in params}

    def warmup_groups(self):
        """(grid params, network params) optimized during the warmup stage."""
        grids = [self.opacity.values, self.color.values, self.semantic.values]
        nets = (
            self.bwd_deform.params
            + self.fwd_deform.params
            + [self.slots.features, self.slots.log_temp, self.slots.out_w, self.slots.out_b]
            + self.warmup_mlp
        )
        return grids, nets

    def joint_groups(self):
        """(grid params, network params) optimized during joint optimization."""
        grids = [self.opacity.values, self.color.values, self.occupancy.values]
        nets = self.bwd_deform.params + [self.slots.latents] + self.comp_mlp
        return grids, nets
