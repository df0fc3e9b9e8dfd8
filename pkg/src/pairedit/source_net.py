"""Dense transform predictor for the source domain.

A small encoder-decoder takes a (reference, target) image pair and emits
the explicit transform pack (flow field + color affine) that warps the
reference onto the target.  The output head is residual around the
identity transform and zero-initialized, so an untrained network
predicts exactly the identity pack.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .transforms import TransformPack, compose_transform, identity_flow

# Flow residuals span (-2, 2) so a full left-right flip (displacement 2 in
# normalized coordinates) stays representable; the final flow is clamped
# back to the valid [-1, 1] range.
FLOW_RESIDUAL_SCALE = 2.0


@dataclass
class SourceNetConfig:
    in_channels: int = 3
    base_channels: int = 24
    levels: int = 3


def _groups(channels: int) -> int:
    g = 8
    while channels % g:
        g //= 2
    return max(g, 1)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(_groups(cout), cout),
        nn.SiLU(),
    )


class SourceTransformNet(nn.Module):
    """Encoder-decoder over the channel-concatenated image pair.

    Emits a raw (B, 4, H, W) map of (flow-row, flow-col, scale, bias)
    residuals; bounding and the identity offset are applied by
    :func:`predict_transform`.
    """

    def __init__(self, cfg: SourceNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or SourceNetConfig()
        chans = [self.cfg.base_channels * 2**l for l in range(self.cfg.levels)]
        self.enc_blocks = nn.ModuleList()
        prev = 2 * self.cfg.in_channels
        for ch in chans:
            self.enc_blocks.append(_block(prev, ch))
            prev = ch
        self.dec_blocks = nn.ModuleList(
            [_block(chans[l + 1] + chans[l], chans[l]) for l in range(self.cfg.levels - 1)]
        )
        self.head = nn.Conv2d(chans[0], 4, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def min_multiple(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    def forward(self, x_i: Tensor, x_j: Tensor) -> Tensor:
        h = torch.cat([x_i, x_j], dim=1)
        skips = []
        for l, blk in enumerate(self.enc_blocks):
            h = blk(h)
            if l < self.cfg.levels - 1:
                skips.append(h)
                h = F.avg_pool2d(h, 2)
        for l in reversed(range(self.cfg.levels - 1)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.dec_blocks[l](torch.cat([h, skips[l]], dim=1))
        return self.head(h)


def predict_transform(x_i: Tensor, x_j: Tensor, net: SourceTransformNet) -> TransformPack:
    """Predict the transform pack mapping ``x_i`` onto ``x_j``.

    Flow coordinates are the identity grid plus a tanh-bounded residual,
    clamped to [-1, 1]; scale is 1 + tanh (range (0, 2)); bias is tanh.
    Deterministic given the network weights.
    """
    if x_i.shape != x_j.shape:
        raise ValueError(f"shape mismatch: {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
    single = x_i.dim() == 3
    if single:
        x_i, x_j = x_i.unsqueeze(0), x_j.unsqueeze(0)
    if x_i.dim() != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C) images, got {tuple(x_i.shape)}")
    if x_i.shape[-1] != net.cfg.in_channels:
        raise ValueError(f"expected {net.cfg.in_channels} channels, got {x_i.shape[-1]}")
    height, width = x_i.shape[1], x_i.shape[2]
    if height % net.min_multiple or width % net.min_multiple:
        raise ValueError(f"image dims must be divisible by {net.min_multiple}")

    raw = net(x_i.permute(0, 3, 1, 2), x_j.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
    grid = identity_flow(height, width, dtype=raw.dtype, device=raw.device)
    flow = (grid + FLOW_RESIDUAL_SCALE * torch.tanh(raw[..., 0:2])).clamp(-1.0, 1.0)
    scale = 1.0 + torch.tanh(raw[..., 2:3])
    bias = torch.tanh(raw[..., 3:4])
    affine = torch.cat([scale, bias], dim=-1)
    if single:
        flow, affine = flow.squeeze(0), affine.squeeze(0)
    return TransformPack(flow=flow, affine=affine)


def source_loss(x_i: Tensor, x_j: Tensor, pack: TransformPack) -> Tensor:
    """Pixel reconstruction loss: MSE between the transformed reference
    and the target."""
    if x_i.shape != x_j.shape:
        raise ValueError(f"shape mismatch: {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
    return F.mse_loss(compose_transform(x_i, pack), x_j)
