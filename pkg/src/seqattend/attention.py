"""Moveable Gaussian-filter sensor.

A glimpse is an N x N grid of isotropic Gaussian filters (DRAW-style read)
placed at a continuous center with a grid spacing ``delta`` and filter width
``sigma``.  The same grid can be repeated at a 2x scale (double spacing and
width) for crude foveation; each scale has its own non-negative strength.

All functions accept an optional leading batch axis: images are ``(B, H, W)``
and every GlimpseParams field has shape ``(B,)`` (or ``(B, S)`` for gamma).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .ndcore import Tensor

NORM_FLOOR = 1e-8
SCALE_MULTIPLIERS = {"1x": 1.0, "2x": 2.0}


@dataclass
class GlimpseParams:
    center_x: Tensor
    center_y: Tensor
    delta: Tensor
    sigma: Tensor
    gamma: Tensor  # (..., n_scales)

    def validate(self):
        if bool((self.delta <= 0).any()) or bool((self.sigma <= 0).any()):
            raise ValueError("delta and sigma must be positive")
        if bool((self.gamma < 0).any()):
            raise ValueError("reading strengths must be non-negative")
        return self

    def detach(self) -> "GlimpseParams":
        return GlimpseParams(*(t.detach() for t in
                               (self.center_x, self.center_y, self.delta, self.sigma, self.gamma)))


@dataclass
class Filterbank:
    f_x: Tensor  # (..., N, W)
    f_y: Tensor  # (..., N, H)


def filter_means(center: Tensor, delta: Tensor, grid_side: int, extent: int) -> Tensor:
    """Pixel-coordinate means of the ``grid_side`` filters along one axis.

    Normalized coordinate -1 maps to pixel 0 and +1 to pixel ``extent - 1``.
    """
    offsets = torch.arange(1, grid_side + 1, dtype=center.dtype, device=center.device)
    offsets = offsets - grid_side / 2 - 0.5
    grid_center = (center + 1) * (extent - 1) / 2
    return grid_center.unsqueeze(-1) + offsets * delta.unsqueeze(-1)


def _axis_filters(mu: Tensor, sigma: Tensor, extent: int) -> Tensor:
    pix = torch.arange(extent, dtype=mu.dtype, device=mu.device)
    log_g = -(pix - mu.unsqueeze(-1)) ** 2 / (2 * sigma[..., None, None] ** 2)
    # Shift by the row max so a row far off-image still normalizes instead of
    # underflowing to all zeros; the floor then costs at most 1e-8 of mass.
    g = torch.exp(log_g - log_g.amax(dim=-1, keepdim=True))
    return g / (g.sum(dim=-1, keepdim=True) + NORM_FLOOR)


def build_filterbank(center_x: Tensor, center_y: Tensor, delta: Tensor, sigma: Tensor,
                     grid_side: int, image_extents: tuple[int, int]) -> Filterbank:
    H, W = image_extents
    if grid_side < 1 or H < 1 or W < 1:
        raise ValueError("grid_side and image extents must be >= 1")
    center_x, center_y, delta, sigma = (torch.as_tensor(v, dtype=torch.get_default_dtype())
                                        if not torch.is_tensor(v) else v
                                        for v in (center_x, center_y, delta, sigma))
    if bool((delta <= 0).any()) or bool((sigma <= 0).any()):
        raise ValueError("delta and sigma must be positive")
    f_x = _axis_filters(filter_means(center_x, delta, grid_side, W), sigma, W)
    f_y = _axis_filters(filter_means(center_y, delta, grid_side, H), sigma, H)
    return Filterbank(f_x, f_y)


def scale_filterbank(image_shape, params: GlimpseParams, multiplier: float,
                     grid_side: int = 2) -> Filterbank:
    H, W = image_shape[-2:]
    return build_filterbank(params.center_x, params.center_y, multiplier * params.delta,
                            multiplier * params.sigma, grid_side, (H, W))


def multiscale_filterbank(image_shape, params: GlimpseParams, scales=("1x",),
                          grid_side: int = 2) -> Filterbank:
    """Filterbanks for every scale at once; matrices gain a scale axis ``(…, S, N, extent)``."""
    if not scales:
        raise ValueError("at least one scale is required")
    H, W = image_shape[-2:]
    mult = torch.tensor([SCALE_MULTIPLIERS[s] for s in scales], dtype=params.delta.dtype)
    delta = params.delta.unsqueeze(-1) * mult
    sigma = params.sigma.unsqueeze(-1) * mult
    cx = params.center_x.unsqueeze(-1).expand_as(delta)
    cy = params.center_y.unsqueeze(-1).expand_as(delta)
    return build_filterbank(cx, cy, delta, sigma, grid_side, (H, W))


def apply_filterbank(image: Tensor, fb: Filterbank, gamma: Tensor) -> Tensor:
    """Reading of ``image`` (…, H, W) through a multiscale filterbank, scales concatenated."""
    patch = fb.f_y @ image.unsqueeze(-3) @ fb.f_x.transpose(-1, -2)
    return (gamma.unsqueeze(-1) * patch.flatten(-2)).flatten(-2)


def read_glimpse(image: Tensor, params: GlimpseParams, scales=("1x",),
                 grid_side: int = 2) -> Tensor:
    """Read ``grid_side**2 * len(scales)`` values from ``image``.

    Scale blocks are concatenated in the order given (1x before 2x by
    convention); within a block the layout is row-major over (y, x) filters.
    Scale ``m`` uses spacing ``m * delta`` and width ``m * sigma``.
    """
    fb = multiscale_filterbank(image.shape, params, scales, grid_side)
    return apply_filterbank(image, fb, params.gamma)


def reading_size(scales, grid_side: int = 2) -> int:
    return grid_side * grid_side * len(scales)


def glimpse_latent_size(n_scales: int) -> int:
    # 2 center + log-spacing + log-width + one log-strength per scale
    return 4 + n_scales


def decode_glimpse(z_c: Tensor, image_extents: tuple[int, int], n_scales: int) -> GlimpseParams:
    """Map a glimpse latent to sensor controls.

    Zero latent gives the reference glimpse: centered, spacing W/4, width W/8,
    unit strengths.
    """
    expected = glimpse_latent_size(n_scales)
    if z_c.shape[-1] != expected:
        raise ValueError(f"glimpse latent has size {z_c.shape[-1]}, expected {expected}")
    W = image_extents[1]
    delta_ref, sigma_ref = W / 4, W / 8
    return GlimpseParams(
        center_x=torch.tanh(z_c[..., 0]),
        center_y=torch.tanh(z_c[..., 1]),
        delta=delta_ref * torch.exp(z_c[..., 2]),
        sigma=sigma_ref * torch.exp(z_c[..., 3]),
        gamma=torch.exp(z_c[..., 4:]),
    )


def footprint(image_extents: tuple[int, int], params: GlimpseParams,
              grid_side: int = 2) -> Tensor:
    """Max-normalized 1x-scale sensitivity map of the whole filter grid, ``(…, H, W)``."""
    fb = scale_filterbank(image_extents, params, 1.0, grid_side)
    fmap = fb.f_y.sum(-2).unsqueeze(-1) * fb.f_x.sum(-2).unsqueeze(-2)
    peak = fmap.flatten(-2).amax(-1)[..., None, None]
    return fmap / torch.clamp(peak, min=math.ulp(1.0))
