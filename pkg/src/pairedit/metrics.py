"""Frequency-domain training constraint and evaluation metrics.

Provides the spectral reconstruction loss used during training and the
evaluation metrics reported by the CLI: PSNR, edit-mask extraction,
union-IoU over edit masks, and a Fréchet distance between feature
Gaussians with a pluggable feature extractor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

#: Default edit-mask threshold on [-1, 1] data.
DEFAULT_TAU = 0.1

#: PSNR value reported when the two images are identical.
PSNR_CAP = 99.0


def frequency_loss(a: Tensor, b: Tensor, focal: bool = False) -> Tensor:
    """Squared spectral distance between two images.

    Both images are transformed with an orthonormal 2D FFT per channel.
    Plain mode returns the mean squared magnitude of the spectrum
    difference, which by Parseval's identity equals the pixel MSE.
    Focal mode reweights each frequency bin by its normalized error
    magnitude (detached from the gradient), emphasizing the worst bins.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    fa = torch.fft.fft2(a, dim=(-3, -2), norm="ortho")
    fb = torch.fft.fft2(b, dim=(-3, -2), norm="ortho")
    diff = fa - fb
    power = diff.real**2 + diff.imag**2
    if not focal:
        return power.mean()
    mag = power.detach().sqrt()
    peak = mag.max()
    if peak == 0:
        return power.mean()
    weight = mag / peak
    return (weight * power).mean()


def psnr(a: Tensor, b: Tensor, peak: float = 2.0, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in decibels; ``cap`` when the MSE is 0.

    ``peak`` is the dynamic range of the data (2.0 for [-1, 1] images).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0.0:
        return float(cap)
    return 10.0 * math.log10(peak * peak / mse)


def edit_mask(x: Tensor, y: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Binary support of the edit between a source and its edited version.

    A pixel is marked when the max-over-channels absolute difference
    exceeds ``tau``.  Returns a bool tensor of shape (H, W) (or batched).
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return (y - x).abs().amax(dim=-1) > tau


def diou(gen_masks: Sequence[Tensor] | Tensor, ref_masks: Sequence[Tensor] | Tensor) -> float:
    """IoU between the union of generated edit masks and the union of
    reference edit masks.

    Higher means the generated edit support better matches the reference
    edit support.  Defined as 1.0 when both unions are empty.
    """
    if not torch.is_tensor(gen_masks):
        gen_masks = list(gen_masks)
    if not torch.is_tensor(ref_masks):
        ref_masks = list(ref_masks)
    if len(gen_masks) == 0 or len(ref_masks) == 0:
        raise ValueError("mask lists must be non-empty")
    gen = torch.stack(gen_masks) if not torch.is_tensor(gen_masks) else gen_masks
    ref = torch.stack(ref_masks) if not torch.is_tensor(ref_masks) else ref_masks
    if gen.shape[-2:] != ref.shape[-2:]:
        raise ValueError(
            f"mask shape mismatch: {tuple(gen.shape[-2:])} vs {tuple(ref.shape[-2:])}"
        )
    u_gen = gen.bool().any(dim=0)
    u_ref = ref.bool().any(dim=0)
    union = (u_gen | u_ref).sum().item()
    if union == 0:
        return 1.0
    inter = (u_gen & u_ref).sum().item()
    return inter / union


@dataclass
class FeatureGaussian:
    """Gaussian fit (mean, covariance) to a set of feature vectors."""

    mean: Tensor
    cov: Tensor

    def __post_init__(self):
        if self.mean.dim() != 1 or self.cov.shape != (self.mean.numel(), self.mean.numel()):
            raise ValueError(
                f"inconsistent Gaussian shapes: mean {tuple(self.mean.shape)}, "
                f"cov {tuple(self.cov.shape)}"
            )

    @classmethod
    def from_features(cls, features: Tensor) -> "FeatureGaussian":
        """Fit from an (N, d) feature matrix (unbiased covariance)."""
        if features.dim() != 2 or features.shape[0] < 1:
            raise ValueError(f"expected a non-empty (N, d) matrix, got {tuple(features.shape)}")
        feats = features.double()
        mean = feats.mean(dim=0)
        if feats.shape[0] == 1:
            cov = torch.zeros(feats.shape[1], feats.shape[1], dtype=torch.float64)
        else:
            centered = feats - mean
            cov = centered.t() @ centered / (feats.shape[0] - 1)
        return cls(mean=mean, cov=cov)


def _sqrtm_psd(mat: Tensor, tol: float) -> Tensor:
    # Symmetric eigendecomposition; eigenvalues below 0 are clamped.
    sym = 0.5 * (mat + mat.t())
    vals, vecs = torch.linalg.eigh(sym)
    if vals.min().item() < -tol:
        raise ValueError(f"matrix is not PSD within tolerance: min eigenvalue {vals.min().item()}")
    vals = vals.clamp(min=0.0)
    return (vecs * vals.sqrt()) @ vecs.t()


def frechet_distance(p: FeatureGaussian, q: FeatureGaussian, psd_tol: float = 1e-6) -> float:
    """Fréchet distance between two feature Gaussians.

    ||mu_p - mu_q||^2 + tr(S_p + S_q - 2 (S_p S_q)^{1/2}), with the matrix
    square root taken through symmetric eigendecompositions.
    """
    if p.mean.shape != q.mean.shape:
        raise ValueError("feature dimensions do not match")
    mp, mq = p.mean.double(), q.mean.double()
    sp, sq = p.cov.double(), q.cov.double()
    sq_root = _sqrtm_psd(sq, psd_tol)
    _sqrtm_psd(sp, psd_tol)  # validates PSD of the other covariance
    inner = sq_root @ sp @ sq_root
    vals = torch.linalg.eigvalsh(0.5 * (inner + inner.t()))
    tr_cross = vals.clamp(min=0.0).sqrt().sum()
    dist = (mp - mq).square().sum() + sp.trace() + sq.trace() - 2.0 * tr_cross
    return max(dist.item(), 0.0)


def pixel_features(images: Tensor, side: int = 8) -> Tensor:
    """Default feature extractor: grayscale images average-pooled to
    ``side`` x ``side`` and flattened.

    Accepts (H, W, C) or (N, H, W, C); returns (side*side,) or (N, side*side).
    """
    single = images.dim() == 3
    imgs = images.unsqueeze(0) if single else images
    gray = imgs.mean(dim=-1, keepdim=True).permute(0, 3, 1, 2)
    pooled = F.adaptive_avg_pool2d(gray, side).reshape(imgs.shape[0], -1)
    return pooled.squeeze(0) if single else pooled
