"""Jointly trained autoencoder with skip connections and decoder noise.

The encoder compresses images into a diagonal-Gaussian latent and keeps
per-level activations as a skip stack; the decoder reconstructs images
from a latent plus a skip stack, injecting learned-gain Gaussian noise
after each level to enrich high-frequency detail.  Both are trained
end-to-end with the rest of the framework, so the latent acts as a
dimension compressor rather than a semantic one.

Latents follow the channel-last convention at the public function
boundaries: (h, w, d) or (B, h, w, d).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass
class AutoencoderConfig:
    in_channels: int = 3
    base_channels: int = 24
    latent_channels: int = 4
    levels: int = 3

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class SkipStack:
    """Per-level encoder activations, finest resolution first.

    Tensors are internal (B, C, H, W) activations; treat the stack as an
    opaque handle produced by :func:`encode` and consumed by :func:`decode`.
    The finest level carries the raw input image as its leading channels,
    which the decoder uses as the base of its residual output.
    """

    features: tuple[Tensor, ...]

    def __len__(self) -> int:
        return len(self.features)

    def zeros_like(self) -> "SkipStack":
        """An all-zero stack with matching shapes (skip-path ablation).

        Zeros are allocated contiguously regardless of the source layout
        so ablated decodes are bitwise reproducible.
        """
        return SkipStack(
            tuple(torch.zeros(f.shape, dtype=f.dtype, device=f.device) for f in self.features)
        )


def _groups(channels: int) -> int:
    g = 8
    while channels % g:
        g //= 2
    return max(g, 1)


def _block(cin: int, cout: int, convs: int = 1) -> nn.Sequential:
    layers = []
    for k in range(convs):
        layers += [
            nn.Conv2d(cin if k == 0 else cout, cout, 3, padding=1),
            nn.GroupNorm(_groups(cout), cout),
            nn.SiLU(),
        ]
    return nn.Sequential(*layers)


def _skip_channels(cfg: AutoencoderConfig) -> list[int]:
    chans = [cfg.base_channels * 2**l for l in range(cfg.levels)]
    chans[0] += cfg.in_channels  # finest skip carries the raw image too
    return chans


class ImageEncoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or AutoencoderConfig()
        chans = [self.cfg.base_channels * 2**l for l in range(self.cfg.levels)]
        self.blocks = nn.ModuleList()
        prev = self.cfg.in_channels
        for ch in chans:
            self.blocks.append(_block(prev, ch))
            prev = ch
        self.head = nn.Conv2d(chans[-1], 2 * self.cfg.latent_channels, 1)
        self.level_channels = chans

    def forward(self, img: Tensor) -> tuple[Tensor, Tensor, SkipStack]:
        h = img
        skips = []
        for l, blk in enumerate(self.blocks):
            h = blk(h)
            skips.append(torch.cat([img, h], dim=1) if l == 0 else h)
            if l < self.cfg.levels - 1:
                h = F.avg_pool2d(h, 2)
        stats = self.head(h)
        mu, logvar = stats.chunk(2, dim=1)
        return mu, logvar, SkipStack(tuple(skips))


class _NoiseInjection(nn.Module):
    """Adds per-channel learned-gain Gaussian noise; gains start at zero."""

    def __init__(self, channels: int):
        super().__init__()
        self.gain = nn.Parameter(torch.zeros(channels))

    def forward(self, h: Tensor, noise_scale: float, rng: torch.Generator | None) -> Tensor:
        if noise_scale == 0.0:
            return h
        eps = torch.randn(h.shape, generator=rng, dtype=h.dtype, device=h.device)
        return h + noise_scale * self.gain.view(1, -1, 1, 1) * eps


class ImageDecoder(nn.Module):
    """Decodes a latent plus skip stack into an image.

    The output is a residual over the raw image carried in the finest
    skip level, so content untouched by the edit is reproduced exactly
    and the network only has to synthesize the change.
    """

    def __init__(self, cfg: AutoencoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or AutoencoderConfig()
        chans = [self.cfg.base_channels * 2**l for l in range(self.cfg.levels)]
        skip_chans = _skip_channels(self.cfg)
        self.stem = nn.Conv2d(self.cfg.latent_channels, chans[-1], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.noises = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = chans[-1]
        for l in reversed(range(self.cfg.levels)):
            self.blocks.append(_block(prev + skip_chans[l], chans[l], convs=2))
            self.noises.append(_NoiseInjection(chans[l]))
            if l > 0:
                # sub-pixel upsampling keeps per-phase channels so the
                # decoder can place details at sub-cell positions
                self.ups.append(
                    nn.Sequential(
                        nn.Conv2d(chans[l], 4 * chans[l - 1], 3, padding=1),
                        nn.PixelShuffle(2),
                    )
                )
                prev = chans[l - 1]
        self.out = nn.Conv2d(chans[0], self.cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.level_channels = chans
        self.skip_channels = skip_chans

    def forward(
        self,
        z: Tensor,
        skips: SkipStack | None,
        noise_scale: float = 0.0,
        rng: torch.Generator | None = None,
    ) -> Tensor:
        if skips is not None and len(skips) != self.cfg.levels:
            raise ValueError(f"expected {self.cfg.levels} skip levels, got {len(skips)}")
        h = self.stem(z)
        base = None
        for k, l in enumerate(reversed(range(self.cfg.levels))):
            skip = (
                skips.features[l]
                if skips is not None
                else h.new_zeros(h.shape[0], self.skip_channels[l], *h.shape[2:])
            )
            if skip.shape[0] != h.shape[0] or skip.shape[2:] != h.shape[2:]:
                raise ValueError(
                    f"skip level {l} shape {tuple(skip.shape)} incompatible with "
                    f"decoder state {tuple(h.shape)}"
                )
            if l == 0:
                base = skip[:, : self.cfg.in_channels]
            h = self.blocks[k](torch.cat([h, skip], dim=1))
            h = self.noises[k](h, noise_scale, rng)
            if l > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return base + self.out(h)


def _to_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected 3-d or 4-d tensor, got shape {tuple(x.shape)}")


def encode(img: Tensor, net: ImageEncoder) -> tuple[Tensor, Tensor, SkipStack]:
    """Encode an image into latent Gaussian parameters plus a skip stack.

    Returns (mu, logvar, skips) with mu/logvar of shape (h, w, d) for an
    (H, W, C) input, downsampled by the configured factor.
    """
    img_b, single = _to_batched(img)
    f = net.cfg.downsample_factor
    if img_b.shape[1] % f or img_b.shape[2] % f:
        raise ValueError(f"image dims must be divisible by {f}, got {tuple(img_b.shape[1:3])}")
    if img_b.shape[-1] != net.cfg.in_channels:
        raise ValueError(f"expected {net.cfg.in_channels} channels, got {img_b.shape[-1]}")
    mu, logvar, skips = net(img_b.permute(0, 3, 1, 2))
    mu = mu.permute(0, 2, 3, 1)
    logvar = logvar.permute(0, 2, 3, 1)
    if single:
        mu, logvar = mu.squeeze(0), logvar.squeeze(0)
    return mu, logvar, skips


def reparameterize(mu: Tensor, logvar: Tensor, rng: torch.Generator | None) -> Tensor:
    """Stochastic latent draw mu + exp(logvar/2) * eps.

    With ``rng=None`` the draw is disabled and mu is returned unchanged.
    """
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch: {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    if rng is None:
        return mu
    logvar = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)
    eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * eps


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean KL divergence of the diagonal posterior from a unit Gaussian."""
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch: {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    return 0.5 * (logvar.exp() + mu.square() - 1.0 - logvar).mean()


def decode(
    z: Tensor,
    skips: SkipStack | None,
    net: ImageDecoder,
    noise_scale: float = 0.0,
    rng: torch.Generator | None = None,
) -> Tensor:
    """Decode a latent plus skip stack into an image.

    ``noise_scale=0`` disables the decoder noise and makes the output a
    deterministic function of (z, skips, weights).  ``skips=None`` runs
    with an all-zero skip stack.
    """
    z_b, single = _to_batched(z)
    if z_b.shape[-1] != net.cfg.latent_channels:
        raise ValueError(f"expected {net.cfg.latent_channels} latent channels, got {z_b.shape[-1]}")
    out = net(z_b.permute(0, 3, 1, 2), skips, noise_scale, rng).permute(0, 2, 3, 1)
    return out.squeeze(0) if single else out
