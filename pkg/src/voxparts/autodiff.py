"""Reverse-mode gradient core: parameters, MLPs, softmax, Adam, grad checks.

Differentiable operations are expressed as torch tensor programs; the
recorded computation (the autograd graph hanging off a result tensor) plays
the role of the tape. Everything exposed here is dtype-agnostic so the same
code paths run in float32 for training and float64 for finite-difference
verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "ParamTensor",
    "MlpSpec",
    "AdamState",
    "pe_encode",
    "mlp_apply",
    "init_mlp_params",
    "backward",
    "softmax",
    "adam_step",
    "grad_check",
]


class ParamTensor:
    """A named trainable tensor with an accumulating gradient."""

    def __init__(self, name: str, data: torch.Tensor, trainable: bool = True):
        if not torch.isfinite(data).all():
            raise NumericError(f"parameter '{name}' initialized with non-finite values")
        self.name = name
        self.data = data.detach().clone().requires_grad_(trainable)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def grad(self) -> torch.Tensor:
        if self.data.grad is None:
            return torch.zeros_like(self.data)
        return self.data.grad

    def zero_grad(self) -> None:
        self.data.grad = None

    def set_trainable(self, flag: bool) -> None:
        self.data.requires_grad_(flag)

    def numpy(self):
        return self.data.detach().cpu().numpy()

    def copy_from(self, other: torch.Tensor) -> None:
        with torch.no_grad():
            self.data.copy_(other)

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.shape})"


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a fully connected ReLU stack with a linear output layer."""

    in_dim: int
    out_dim: int
    hidden_layers: int
    hidden_width: int
    activation: str = "relu"

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise DimensionError("MlpSpec requires hidden_layers >= 1 and hidden_width >= 1")
        if self.activation != "relu":
            raise DimensionError(f"unsupported activation '{self.activation}'")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden_width] * self.hidden_layers + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


def init_mlp_params(
    spec: MlpSpec,
    name: str,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> list[ParamTensor]:
    """Kaiming fan-in uniform weights, zero biases, named ``{name}.w{i}/.b{i}``."""
    params = []
    for i, (d_in, d_out) in enumerate(spec.layer_dims()):
        bound = math.sqrt(6.0 / d_in)
        w = (torch.rand((d_in, d_out), generator=generator, dtype=torch.float64) * 2 - 1) * bound
        params.append(ParamTensor(f"{name}.w{i}", w.to(dtype)))
        params.append(ParamTensor(f"{name}.b{i}", torch.zeros(d_out, dtype=dtype)))
    return params


def mlp_apply(spec: MlpSpec, params: list[ParamTensor], x: torch.Tensor) -> torch.Tensor:
    """Apply the affine+ReLU stack; the final layer is affine with no activation."""
    if x.shape[-1] != spec.in_dim:
        raise DimensionError(
            f"mlp input has {x.shape[-1]} channels, spec expects {spec.in_dim}"
        )
    layer_dims = spec.layer_dims()
    if len(params) != 2 * len(layer_dims):
        raise DimensionError(
            f"mlp expects {2 * len(layer_dims)} parameter tensors, got {len(params)}"
        )
    h = x
    for i, (d_in, d_out) in enumerate(layer_dims):
        w, b = params[2 * i], params[2 * i + 1]
        if w.shape != (d_in, d_out) or b.shape != (d_out,):
            raise DimensionError(
                f"layer {i} of mlp expects weight {(d_in, d_out)} and bias {(d_out,)}, "
                f"got {w.shape} and {b.shape}"
            )
        h = h @ w.data + b.data
        if i < len(layer_dims) - 1:
            h = torch.relu(h)
    return h


def pe_encode(x: torch.Tensor, num_freqs: int, include_input: bool = True) -> torch.Tensor:
    """Sinusoidal positional encoding grouped per input channel.

    For each channel v the output block is
    ``[v (optional), sin(pi v), cos(pi v), sin(2 pi v), cos(2 pi v), ...]``
    with frequencies ``2**k * pi`` for ``k = 0..num_freqs-1``.
    """
    if num_freqs < 0:
        raise DimensionError("num_freqs must be >= 0")
    blocks_per_channel = (1 if include_input else 0) + 2 * num_freqs
    if blocks_per_channel == 0:
        return x[..., :0]
    if num_freqs == 0:
        return x
    freqs = (2.0 ** torch.arange(num_freqs, dtype=x.dtype, device=x.device)) * math.pi
    ang = x.unsqueeze(-1) * freqs  # (..., D, F)
    trig = torch.stack((torch.sin(ang), torch.cos(ang)), dim=-1)  # (..., D, F, 2)
    trig = trig.reshape(*x.shape, 2 * num_freqs)
    if include_input:
        out = torch.cat((x.unsqueeze(-1), trig), dim=-1)
    else:
        out = trig
    return out.reshape(*x.shape[:-1], x.shape[-1] * blocks_per_channel)


def softmax(logits: torch.Tensor, temperature: float | torch.Tensor = 1.0, dim: int = -1) -> torch.Tensor:
    """Temperature softmax, stabilized by max subtraction."""
    if not torch.isfinite(logits).all():
        raise NumericError("softmax received non-finite logits")
    if isinstance(temperature, torch.Tensor):
        if (temperature <= 0).any():
            raise NumericError("softmax temperature must be positive")
    elif temperature <= 0:
        raise NumericError("softmax temperature must be positive")
    z = logits / temperature
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def backward(result: torch.Tensor, upstream: torch.Tensor | None = None) -> None:
    """Accumulate gradients of ``result`` into every participating parameter.

    ``result`` must come from a completed forward pass; repeated calls add
    into the existing ``.grad`` buffers.
    """
    if result.grad_fn is None and not result.requires_grad:
        raise UsageError("backward called on a tensor that records no computation")
    if upstream is None:
        if result.numel() != 1:
            raise UsageError("non-scalar result requires an explicit upstream gradient")
        upstream = torch.ones_like(result)
    if upstream.shape != result.shape:
        raise DimensionError(
            f"upstream gradient shape {tuple(upstream.shape)} does not match "
            f"result shape {tuple(result.shape)}"
        )
    torch.autograd.backward(result, grad_tensors=upstream, retain_graph=True)


class AdamState:
    """Bias-corrected Adam over named parameter groups with per-group rates."""

    def __init__(
        self,
        groups: list[tuple[list[ParamTensor], float]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        for params, _ in self.groups:
            for p in params:
                self.m[p.name] = torch.zeros_like(p.data)
                self.v[p.name] = torch.zeros_like(p.data)

    def set_lr(self, group_index: int, lr: float) -> None:
        params, _ = self.groups[group_index]
        self.groups[group_index] = (params, float(lr))

    def parameters(self) -> list[ParamTensor]:
        return [p for params, _ in self.groups for p in params]


def adam_step(state: AdamState) -> None:
    """One Adam update; the step counter increments before the update."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for params, lr in state.groups:
            for p in params:
                g = p.data.grad
                if g is None:
                    continue
                if not torch.isfinite(g).all():
                    raise NumericError(f"gradient of parameter '{p.name}' is not finite")
                m = state.m[p.name]
                v = state.v[p.name]
                m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
                v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
                denom = (v / bc2).sqrt_().add_(state.eps)
                p.data.addcdiv_(m, denom, value=-lr / bc1)


def grad_check(fn, point: torch.Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    Runs in float64 regardless of the input dtype; the relative error is
    ``|analytic - numeric| / max(1, |analytic|)`` per coordinate.
    """
    x = point.detach().to(torch.float64).requires_grad_(True)
    y = fn(x)
    if y.numel() != 1:
        raise UsageError("grad_check expects a scalar-valued function")
    if not torch.isfinite(y).all():
        raise NumericError("function evaluated to a non-finite value")
    (analytic,) = torch.autograd.grad(y, x)
    flat = x.detach().clone().reshape(-1)
    numeric = torch.zeros_like(flat)
    for i in range(flat.numel()):
        for sign in (1.0, -1.0):
            probe = flat.clone()
            probe[i] += sign * eps
            val = fn(probe.reshape(point.shape))
            if not torch.isfinite(val).all():
                raise NumericError("function evaluated to a non-finite value near the point")
            numeric[i] += sign * val.detach().reshape(())
    numeric /= 2.0 * eps
    analytic = analytic.reshape(-1)
    rel = (analytic - numeric).abs() / analytic.abs().clamp(min=1.0)
    return rel.max().item()
