"""Differentiable pixel-space transform kernels: flow warps and color affines.

Images are real tensors of shape (H, W, C) or (B, H, W, C) with values
nominally in [-1, 1].  A flow field stores, for every output pixel, the
absolute position in the reference image to sample from, in normalized
coordinates where -1 maps to row/col 0 and +1 maps to row H-1 / col W-1.
A color affine stores a per-pixel (scale, bias) shared across channels.

All operations are pure functions differentiable in every real-valued
input; they hold no state and are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

# Sampling positions within this distance (in pixels) of an exact pixel
# center snap onto it, so grid flows built from normalized coordinates
# survive the float round trip and warp bit-exactly.
CENTER_SNAP_EPS = 1e-4


def _normalized_axis(n: int, dtype: torch.dtype, device=None) -> Tensor:
    # linspace(-1, 1, 1) == [-1]: a single pixel sits at the -1 end.
    return torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)


def identity_flow(
    height: int,
    width: int,
    *,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> Tensor:
    """Flow field that samples every pixel from its own position.

    Returns an (H, W, 2) tensor of normalized (row, col) coordinates.
    Applying it with :func:`apply_flow` returns the input unchanged.
    """
    if height < 1 or width < 1:
        raise ValueError(f"flow dimensions must be positive, got {height}x{width}")
    rows = _normalized_axis(height, dtype, device).view(height, 1).expand(height, width)
    cols = _normalized_axis(width, dtype, device).view(1, width).expand(height, width)
    return torch.stack([rows, cols], dim=-1)


def hflip_flow(
    height: int,
    width: int,
    *,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> Tensor:
    """Flow field that mirrors an image left-right.

    Equal to the identity flow with the column coordinate negated.
    """
    flow = identity_flow(height, width, dtype=dtype, device=device).clone()
    flow[..., 1] = -flow[..., 1]
    return flow


def _as_batched(x: Tensor, ndim_single: int) -> tuple[Tensor, bool]:
    if x.dim() == ndim_single:
        return x.unsqueeze(0), True
    if x.dim() == ndim_single + 1:
        return x, False
    raise ValueError(
        f"expected a {ndim_single}-d or {ndim_single + 1}-d tensor, got shape {tuple(x.shape)}"
    )


def _to_pixel_coords(coords: Tensor, size: int) -> Tensor:
    # Unnormalize, snap near-integer positions onto pixel centers (value
    # snaps exactly, gradient passes through), then clamp to the border.
    x = (coords + 1.0) * ((size - 1) / 2.0)
    nearest = x.round()
    close = (x - nearest).abs() <= CENTER_SNAP_EPS
    x = torch.where(close, x + (nearest - x).detach(), x)
    return x.clamp(0.0, float(size - 1))


def apply_flow(ref: Tensor, flow: Tensor) -> Tensor:
    """Warp ``ref`` by sampling at the positions stored in ``flow``.

    Fractional positions are bilinearly interpolated; positions outside
    the image sample the nearest border pixel.  Differentiable in both
    the reference values and the flow coordinates.

    Args:
        ref: (H, W, C) or (B, H, W, C) image tensor.
        flow: matching (H, W, 2) or (B, H, W, 2) normalized positions.
    """
    ref_b, squeezed = _as_batched(ref, 3)
    flow_b, flow_squeezed = _as_batched(flow, 3)
    if squeezed != flow_squeezed:
        raise ValueError("ref and flow must both be batched or both single")
    if flow_b.shape[:3] != ref_b.shape[:3] or flow_b.shape[-1] != 2:
        raise ValueError(
            f"flow shape {tuple(flow.shape)} does not match image shape {tuple(ref.shape)}"
        )
    if not torch.isfinite(flow_b).all():
        raise ValueError("flow contains non-finite coordinates")

    batch, height, width, _ = ref_b.shape
    rows = _to_pixel_coords(flow_b[..., 0], height)
    cols = _to_pixel_coords(flow_b[..., 1], width)

    r0 = rows.floor()
    c0 = cols.floor()
    fr = (rows - r0).unsqueeze(-1)
    fc = (cols - c0).unsqueeze(-1)
    r0i = r0.long().clamp(0, height - 1)
    c0i = c0.long().clamp(0, width - 1)
    r1i = (r0i + 1).clamp(max=height - 1)
    c1i = (c0i + 1).clamp(max=width - 1)

    b = torch.arange(batch, device=ref_b.device).view(batch, 1, 1)
    v00 = ref_b[b, r0i, c0i]
    v01 = ref_b[b, r0i, c1i]
    v10 = ref_b[b, r1i, c0i]
    v11 = ref_b[b, r1i, c1i]

    top = v00 + (v01 - v00) * fc
    bottom = v10 + (v11 - v10) * fc
    out = top + (bottom - top) * fr
    return out.squeeze(0) if squeezed else out


def apply_color_affine(img: Tensor, affine: Tensor) -> Tensor:
    """Apply a per-pixel color affine: out = scale * img + bias.

    ``affine[..., 0]`` is the scale and ``affine[..., 1]`` the bias,
    shared across channels.  Differentiable in image, scale, and bias.
    """
    img_b, squeezed = _as_batched(img, 3)
    aff_b, aff_squeezed = _as_batched(affine, 3)
    if squeezed != aff_squeezed:
        raise ValueError("img and affine must both be batched or both single")
    if aff_b.shape[:3] != img_b.shape[:3] or aff_b.shape[-1] != 2:
        raise ValueError(
            f"affine shape {tuple(affine.shape)} does not match image shape {tuple(img.shape)}"
        )
    out = img_b * aff_b[..., 0:1] + aff_b[..., 1:2]
    return out.squeeze(0) if squeezed else out


@dataclass
class TransformPack:
    """An explicit image-to-image transform: a flow field plus a color affine.

    Serializes to a 4-plane raster ordered (flow-row, flow-col, scale, bias).
    """

    flow: Tensor
    affine: Tensor

    def __post_init__(self):
        if self.flow.shape[:-1] != self.affine.shape[:-1]:
            raise ValueError(
                f"flow {tuple(self.flow.shape)} and affine {tuple(self.affine.shape)} "
                "must share spatial dimensions"
            )
        if self.flow.shape[-1] != 2 or self.affine.shape[-1] != 2:
            raise ValueError("flow and affine must both have 2 trailing channels")

    def to_raster(self) -> Tensor:
        """Concatenate into an (..., H, W, 4) raster."""
        return torch.cat([self.flow, self.affine], dim=-1)

    @classmethod
    def from_raster(cls, raster: Tensor) -> "TransformPack":
        if raster.shape[-1] != 4:
            raise ValueError(f"expected 4 trailing channels, got {raster.shape[-1]}")
        return cls(flow=raster[..., :2], affine=raster[..., 2:])


def identity_affine(
    height: int,
    width: int,
    *,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> Tensor:
    """Color affine that leaves every pixel unchanged (scale 1, bias 0)."""
    if height < 1 or width < 1:
        raise ValueError(f"affine dimensions must be positive, got {height}x{width}")
    aff = torch.zeros(height, width, 2, dtype=dtype, device=device)
    aff[..., 0] = 1.0
    return aff


def identity_pack(
    height: int,
    width: int,
    *,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> TransformPack:
    """TransformPack whose application is the identity."""
    return TransformPack(
        flow=identity_flow(height, width, dtype=dtype, device=device),
        affine=identity_affine(height, width, dtype=dtype, device=device),
    )


def compose_transform(img: Tensor, pack: TransformPack) -> Tensor:
    """Apply a TransformPack: warp by the flow first, then the color affine."""
    return apply_color_affine(apply_flow(img, pack.flow), pack.affine)
