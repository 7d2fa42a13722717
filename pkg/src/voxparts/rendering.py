"""Ray generation, sampling and the four rendering heads.

All heads share one quadrature. Ray batches are kept flat (one long point
list with per-point ray ids) so rays of different lengths never pad; per-ray
reductions run through index_add, which is deterministic on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .autodiff import mlp_apply, pe_encode, softmax
from .deform import deform_backward
from .errors import ConfigError, DimensionError
from .grids import multi_distance_interp, occupancy_probs, trilinear_interp, world_to_grid
from .model import SceneModel
from .slots import slot_attend

__all__ = [
    "Camera",
    "RaySamples",
    "RenderSettings",
    "generate_rays",
    "ray_bbox_range",
    "sample_points",
    "query_density",
    "composite",
    "background_weight",
    "render_scene_rays",
    "render_pixel_warmup",
    "render_pixel_compositional",
    "render_masks",
    "render_semantics",
    "view_independent_color",
    "labels_from_masks",
    "WorldOccupancyMask",
]


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: torch.Tensor  # 4x4 camera-to-world
    height: int
    width: int

    def __post_init__(self):
        self.pose = torch.as_tensor(self.pose, dtype=torch.float64)
        if self.pose.shape != (4, 4):
            raise DimensionError("camera pose must be a 4x4 matrix")
        r = self.pose[:3, :3]
        if (r @ r.t() - torch.eye(3, dtype=r.dtype)).abs().max() > 1e-5:
            raise DimensionError("camera rotation block is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise DimensionError("focal lengths must be positive")


def generate_rays(cam: Camera, pixels: torch.Tensor, dtype=torch.float32):
    """Pinhole rays through (row, col) pixel coordinates.

    Directions are ``normalize(R @ [(u-cx)/fx, (v-cy)/fy, 1])`` with u the
    column and v the row; origins are the camera position.
    """
    px = torch.as_tensor(pixels, dtype=torch.float64)
    if px.dim() == 1:
        px = px.unsqueeze(0)
    v, u = px[:, 0], px[:, 1]
    d_cam = torch.stack(
        ((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, torch.ones_like(u)), dim=-1
    )
    r = cam.pose[:3, :3]
    d = d_cam @ r.t()
    d = d / d.norm(dim=-1, keepdim=True)
    o = cam.pose[:3, 3].expand_as(d)
    return o.to(dtype), d.to(dtype)


@dataclass
class RaySamples:
    positions: torch.Tensor  # (M, 3) world points ordered by depth per ray
    deltas: torch.Tensor  # (M,) inter-sample distances
    ray_ids: torch.Tensor  # (M,) owning ray of each point
    n_rays: int
    t_depth: torch.Tensor | None = None  # (M,) distance from the origin

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def offsets(self) -> torch.Tensor:
        counts = torch.bincount(self.ray_ids, minlength=self.n_rays)
        return torch.cat((torch.zeros(1, dtype=torch.long), counts.cumsum(0)))


def ray_bbox_range(origins, dirs, bbox_min, bbox_max, near_min=0.0):
    """Entry/exit distances of each ray through the bounding box."""
    bmin = bbox_min.to(origins.dtype)
    bmax = bbox_max.to(origins.dtype)
    inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    t0 = (bmin - origins) * inv
    t1 = (bmax - origins) * inv
    near = torch.minimum(t0, t1).max(dim=-1).values.clamp(min=near_min)
    far = torch.maximum(t0, t1).min(dim=-1).values
    hit = far > near
    return near, far, hit


def sample_points(origins, dirs, near, far, step, jitter_gen=None) -> RaySamples:
    """Uniform samples at the given spacing inside [near, far] per ray.

    Every delta equals the step, the last sample included. Jitter, when a
    generator is supplied, shifts each sample uniformly within its stratum.
    """
    if step <= 0:
        raise ConfigError("sampling step must be positive")
    span = far - near
    counts = torch.where(
        span >= 0,
        (span / step + 1e-6).floor().long() + 1,
        torch.zeros_like(span, dtype=torch.long),
    )
    n_rays = origins.shape[0]
    total = int(counts.sum())
    ray_ids = torch.repeat_interleave(torch.arange(n_rays), counts)
    offsets = torch.cat((torch.zeros(1, dtype=torch.long), counts.cumsum(0)))
    within = torch.arange(total) - offsets[ray_ids]
    t = near[ray_ids] + within.to(origins.dtype) * step
    if jitter_gen is not None:
        t = t + torch.rand(total, generator=jitter_gen, dtype=origins.dtype) * step
    positions = origins[ray_ids] + dirs[ray_ids] * t.unsqueeze(-1)
    deltas = torch.full((total,), float(step), dtype=origins.dtype)
    return RaySamples(positions, deltas, ray_ids, n_rays, t_depth=t)


def query_density(opac_grid, x_canonical, shift) -> torch.Tensor:
    """Shifted-softplus density; exactly zero outside the bounding box."""
    raw = trilinear_interp(opac_grid, x_canonical).squeeze(-1)
    _, inb = world_to_grid(opac_grid, x_canonical)
    return torch.nn.functional.softplus(raw + shift) * inb.to(raw.dtype)


def composite(sigma, delta, values, ray_ids, n_rays, value_ids=None):
    """Quadrature accumulation over flat per-ray point lists.

    ``values`` may cover a subset of the points (``value_ids`` giving their
    flat indices); skipped points still absorb light but contribute nothing.
    Returns (accumulated (R,C), weights (M,), final transmittance (R,)).
    """
    tau = (sigma * delta).to(torch.float64)
    cz = torch.cat((torch.zeros(1, dtype=torch.float64), tau.cumsum(0)))
    counts = torch.bincount(ray_ids, minlength=n_rays)
    offsets = torch.cat((torch.zeros(1, dtype=torch.long), counts.cumsum(0)))
    base = cz[offsets[:-1]][ray_ids]
    trans = torch.exp(-(cz[:-1] - base)).to(sigma.dtype)
    alpha = 1.0 - torch.exp(-sigma * delta)
    weights = trans * alpha
    trans_final = torch.exp(-(cz[offsets[1:]] - cz[offsets[:-1]])).to(sigma.dtype)
    if values is None:
        return None, weights, trans_final
    out = torch.zeros((n_rays, values.shape[-1]), dtype=values.dtype)
    w = weights if value_ids is None else weights[value_ids]
    ids = ray_ids if value_ids is None else ray_ids[value_ids]
    out = out.index_add(0, ids, w.unsqueeze(-1) * values)
    return out, weights, trans_final


def background_weight(sigma, delta, ray_ids, n_rays) -> torch.Tensor:
    """Quadrature weight of the last sample on each ray (0 for empty rays)."""
    _, weights, _ = composite(sigma, delta, None, ray_ids, n_rays)
    counts = torch.bincount(ray_ids, minlength=n_rays)
    offsets = torch.cat((torch.zeros(1, dtype=torch.long), counts.cumsum(0)))
    out = torch.zeros(n_rays, dtype=sigma.dtype)
    nonempty = counts > 0
    if nonempty.any():
        last = offsets[1:][nonempty] - 1
        out = out.index_add(
            0, torch.arange(n_rays)[nonempty], weights[last]
        )
    return out


@dataclass
class RenderSettings:
    step: float
    near_min: float = 0.05
    jitter: bool = False
    skip_alpha: float = 0.0  # color branch skipped below this alpha; 0 = exact


class WorldOccupancyMask:
    """Per-frame boolean grids marking world regions worth sampling.

    Refreshed from the current density field a few times per stage; pruned
    points are treated as empty space. Purely an acceleration: thresholds sit
    well below any density that contributes visibly.
    """

    def __init__(self, extents, bbox_min, bbox_max, times, sigma_thresh=1e-4, dilate=2):
        self.extents = tuple(extents)
        self.bbox_min = bbox_min
        self.bbox_max = bbox_max
        self.times = list(times)
        self.sigma_thresh = sigma_thresh
        self.dilate = dilate
        self.keep = None  # inactive until the first refresh

    def refresh(self, model: SceneModel) -> None:
        with torch.no_grad():
            pos = model.opacity.node_positions()
            keep = torch.zeros((len(self.times), *self.extents), dtype=torch.bool)
            for f, tau in enumerate(self.times):
                sig = torch.empty(pos.shape[0], dtype=pos.dtype)
                for lo in range(0, pos.shape[0], 65536):
                    chunk = pos[lo : lo + 65536]
                    xc = deform_backward(
                        model.bwd_deform, chunk, torch.tensor(tau, dtype=pos.dtype)
                    )
                    sig[lo : lo + 65536] = query_density(
                        model.opacity, xc, model.density_shift
                    )
                k = (sig > self.sigma_thresh).reshape(self.extents)
                if self.dilate > 0:
                    kf = k.to(torch.float32)[None, None]
                    for _ in range(self.dilate):
                        kf = torch.nn.functional.max_pool3d(kf, 3, stride=1, padding=1)
                    k = kf[0, 0] > 0
                keep[f] = k
            self.keep = keep

    def filter(self, positions, frame_ids) -> torch.Tensor:
        """Boolean keep-mask for flat sample points at their frames."""
        if self.keep is None:
            return torch.ones(positions.shape[0], dtype=torch.bool)
        n = torch.tensor([e - 1 for e in self.extents], dtype=positions.dtype)
        bmin = self.bbox_min.to(positions.dtype)
        bmax = self.bbox_max.to(positions.dtype)
        g = (positions - bmin) / (bmax - bmin) * n
        inb = ((g >= 0) & (g <= n)).all(dim=-1)
        gi = g.round().long()
        for a in range(3):
            gi[:, a].clamp_(0, self.extents[a] - 1)
        flat = (gi[:, 0] * self.extents[1] + gi[:, 1]) * self.extents[2] + gi[:, 2]
        kept = self.keep.reshape(len(self.times), -1)[frame_ids, flat]
        return kept & inb


def _renderer_input(model, x_canonical, dirs_per_point, dtype):
    f_c = multi_distance_interp(model.color, x_canonical, model.color_strides)
    feat_enc = pe_encode(f_c, model.pe_feat_freqs)
    dir_enc = pe_encode(dirs_per_point, model.pe_dir_freqs)
    return torch.cat((feat_enc, dir_enc), dim=-1)


def render_scene_rays(
    model: SceneModel,
    origins,
    dirs,
    times,
    settings: RenderSettings,
    head: str = "warmup",
    want_semantics: bool = False,
    want_masks: bool = False,
    mask_cache: WorldOccupancyMask | None = None,
    frame_ids=None,
    jitter_gen=None,
):
    """Shared quadrature for every rendering head.

    ``times`` holds one normalized timestamp per ray. Returns a dict with
    rgb, per-point colors, weights and whichever optional heads were asked
    for, all keyed by ray.
    """
    n_rays = origins.shape[0]
    dtype = origins.dtype
    near, far, hit = ray_bbox_range(
        origins, dirs, model.bbox_min, model.bbox_max, settings.near_min
    )
    far = torch.where(hit, far, near - 1.0)  # miss -> zero samples
    samples = sample_points(
        origins, dirs, near, far, settings.step,
        jitter_gen if settings.jitter else None,
    )
    pts, ray_ids = samples.positions, samples.ray_ids
    t_pt = times[ray_ids] if times.dim() > 0 else times.expand(samples.count)

    if mask_cache is not None and mask_cache.keep is not None:
        keep = mask_cache.filter(pts, frame_ids[ray_ids])
        pts, ray_ids, t_pt = pts[keep], ray_ids[keep], t_pt[keep]
        deltas = samples.deltas[keep]
    else:
        deltas = samples.deltas

    x_canon = deform_backward(model.bwd_deform, pts, t_pt)
    sigma = query_density(model.opacity, x_canon, model.density_shift)

    alpha = 1.0 - torch.exp(-sigma.detach() * deltas)
    if settings.skip_alpha > 0:
        sel = torch.nonzero(alpha > settings.skip_alpha, as_tuple=False).squeeze(-1)
    else:
        sel = torch.arange(pts.shape[0])

    x_sel = x_canon[sel]
    if head in ("warmup", "comp"):
        d_sel = dirs[ray_ids[sel]]
        base_in = _renderer_input(model, x_sel, d_sel, dtype)

    probs = None
    if head == "comp" or want_masks:
        probs = occupancy_probs(model.occupancy, x_sel)
    if head == "comp":
        z_mix = probs @ model.slots.latents.data.to(dtype)
        mlp_in = torch.cat((base_in, z_mix), dim=-1)
        point_rgb = torch.sigmoid(mlp_apply(model.comp_mlp_spec, model.comp_mlp, mlp_in))
    elif head == "warmup":
        point_rgb = torch.sigmoid(mlp_apply(model.warmup_mlp_spec, model.warmup_mlp, base_in))
    elif head == "density":
        point_rgb = torch.zeros((sel.shape[0], 3), dtype=dtype)
    else:
        raise ConfigError(f"unknown rendering head '{head}'")

    rgb, weights, trans_final = composite(
        sigma, deltas, point_rgb, ray_ids, n_rays, value_ids=sel
    )
    acc = torch.zeros(n_rays, dtype=dtype).index_add(0, ray_ids, weights)
    counts = torch.bincount(ray_ids, minlength=n_rays)
    offsets = torch.cat((torch.zeros(1, dtype=torch.long), counts.cumsum(0)))
    nonempty = counts > 0
    w_last = torch.zeros(n_rays, dtype=dtype)
    if nonempty.any():
        w_last = w_last.index_add(
            0, torch.arange(n_rays)[nonempty], weights[offsets[1:][nonempty] - 1]
        )

    out = {
        "rgb": rgb,
        "acc": acc,
        "w_last": w_last,
        "trans_final": trans_final,
        "weights": weights,
        "point_rgb": point_rgb,
        "point_ray_ids": ray_ids[sel],
        "ray_ids": ray_ids,
        "sel": sel,
        "positions": pts,
        "x_canonical": x_canon,
        "t_points": t_pt,
        "deltas": deltas,
        "n_rays": n_rays,
    }

    if want_masks:
        masks = torch.zeros((n_rays, model.n_slots), dtype=dtype).index_add(
            0, ray_ids[sel], weights[sel].unsqueeze(-1) * probs
        )
        out["masks"] = masks
    if want_semantics:
        f_sem = trilinear_interp(model.semantic, x_sel)
        a_pt, f_slot = slot_attend(f_sem, model.slots)
        out["sem_features"] = torch.zeros((n_rays, model.d_sem), dtype=dtype).index_add(
            0, ray_ids[sel], weights[sel].unsqueeze(-1) * f_slot
        )
        out["sem_probs"] = torch.zeros((n_rays, model.n_slots), dtype=dtype).index_add(
            0, ray_ids[sel], weights[sel].unsqueeze(-1) * a_pt
        )
    return out


def render_pixel_warmup(model, origin, direction, t, settings) -> torch.Tensor:
    out = render_scene_rays(
        model, origin.reshape(1, 3), direction.reshape(1, 3),
        torch.as_tensor([t], dtype=origin.dtype), settings, head="warmup",
    )
    return out["rgb"][0]


def render_pixel_compositional(model, origin, direction, t, settings) -> torch.Tensor:
    out = render_scene_rays(
        model, origin.reshape(1, 3), direction.reshape(1, 3),
        torch.as_tensor([t], dtype=origin.dtype), settings, head="comp",
    )
    return out["rgb"][0]


def render_masks(model, origins, dirs, times, settings, mask_cache=None, frame_ids=None):
    """Per-slot contribution of each ray plus hard labels with background 0."""
    out = render_scene_rays(
        model, origins, dirs, times, settings, head="density",
        want_masks=True, mask_cache=mask_cache, frame_ids=frame_ids,
    )
    return out["masks"], labels_from_masks(out["masks"])


def labels_from_masks(masks: torch.Tensor) -> torch.Tensor:
    """Argmax labeling over slots augmented with a leading background score.

    Returns values in 0..N where 0 is background; ties break to the lowest
    index, so empty rays are background.
    """
    bg = (1.0 - masks.sum(dim=-1, keepdim=True)).clamp(min=0.0)
    full = torch.cat((bg, masks), dim=-1)
    return full.argmax(dim=-1)


def render_semantics(model, origins, dirs, times, settings):
    out = render_scene_rays(
        model, origins, dirs, times, settings, head="warmup", want_semantics=True
    )
    return out["sem_features"], out["sem_probs"]


def view_independent_color(model: SceneModel, x_canonical) -> torch.Tensor:
    """Warmup renderer color with the view-direction encoding zeroed."""
    dtype = x_canonical.dtype
    f_c = multi_distance_interp(model.color, x_canonical, model.color_strides)
    feat_enc = pe_encode(f_c, model.pe_feat_freqs)
    dir_enc = torch.zeros(
        (*x_canonical.shape[:-1], 3 * (1 + 2 * model.pe_dir_freqs)), dtype=dtype
    )
    mlp_in = torch.cat((feat_enc, dir_enc), dim=-1)
    return torch.sigmoid(mlp_apply(model.warmup_mlp_spec, model.warmup_mlp, mlp_in))
