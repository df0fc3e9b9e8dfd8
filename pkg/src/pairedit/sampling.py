"""Group sampling and pair-consistent augmentation for few-shot paired data.

Training draws groups of pairs from the dataset and learns the directed
transformations between group members instead of the pairs themselves,
which expands the learnable signal from m pairs to m * C(m, n-1) group
combinations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .transforms import apply_flow, identity_flow


def seeded_rng(seed: int) -> torch.Generator:
    """A torch CPU generator seeded for reproducible sampling."""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


@dataclass
class PairedDataset:
    """An ordered set of aligned (source, target) image pairs.

    ``sources`` and ``targets`` are (m, H, W, C) tensors in [-1, 1];
    pair k is (sources[k], targets[k]).
    """

    sources: Tensor
    targets: Tensor
    names: tuple[str, ...] | None = None
    skipped: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.sources.dim() != 4 or self.targets.dim() != 4:
            raise ValueError("sources and targets must be (m, H, W, C) tensors")
        if self.sources.shape != self.targets.shape:
            raise ValueError(
                f"source shape {tuple(self.sources.shape)} != target shape "
                f"{tuple(self.targets.shape)}"
            )
        if self.sources.shape[0] < 1:
            raise ValueError("dataset must contain at least one pair")
        if self.sources.shape[-1] not in (1, 3):
            raise ValueError(f"images must have 1 or 3 channels, got {self.sources.shape[-1]}")
        if not (torch.isfinite(self.sources).all() and torch.isfinite(self.targets).all()):
            raise ValueError("dataset contains non-finite values")

    @property
    def m(self) -> int:
        return self.sources.shape[0]

    def __len__(self) -> int:
        return self.m

    def pair(self, k: int) -> tuple[Tensor, Tensor]:
        return self.sources[k], self.targets[k]


@dataclass
class SampleGroup:
    """A group of n pairs with designated (reference i, target j) roles.

    The role positions must differ, but the underlying pairs may coincide
    (sampling is with replacement), in which case the source transform is
    the identity.
    """

    members_x: Tensor  # (n, H, W, C)
    members_y: Tensor  # (n, H, W, C)
    i: int
    j: int
    indices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        n = self.members_x.shape[0]
        if n < 2:
            raise ValueError(f"group size must be at least 2, got {n}")
        if self.members_x.shape != self.members_y.shape:
            raise ValueError("member tensors must have identical shapes")
        if not (0 <= self.i < n and 0 <= self.j < n) or self.i == self.j:
            raise ValueError(f"role positions must be distinct and in range, got ({self.i}, {self.j})")

    @property
    def n(self) -> int:
        return self.members_x.shape[0]

    @property
    def x_i(self) -> Tensor:
        return self.members_x[self.i]

    @property
    def y_i(self) -> Tensor:
        return self.members_y[self.i]

    @property
    def x_j(self) -> Tensor:
        return self.members_x[self.j]

    @property
    def y_j(self) -> Tensor:
        return self.members_y[self.j]


def sample_group(ds: PairedDataset, n: int, rng: torch.Generator) -> SampleGroup:
    """Draw n pairs uniformly with replacement and assign (i, j) roles.

    Role positions are chosen uniformly among distinct positions.
    Deterministic given the generator state.
    """
    if n < 2:
        raise ValueError(f"group size must be at least 2, got {n}")
    idx = torch.randint(ds.m, (n,), generator=rng)
    roles = torch.randperm(n, generator=rng)[:2]
    return SampleGroup(
        members_x=ds.sources[idx],
        members_y=ds.targets[idx],
        i=int(roles[0]),
        j=int(roles[1]),
        indices=tuple(int(k) for k in idx),
    )


def identity_group(ds: PairedDataset, rng: torch.Generator) -> SampleGroup:
    """Degenerate one-source-to-one-target draw: both roles on one pair.

    Used by the expansion ablation; bypasses the distinct-role invariant
    by duplicating the drawn pair in both member slots.
    """
    idx = int(torch.randint(ds.m, (1,), generator=rng))
    x, y = ds.pair(idx)
    return SampleGroup(
        members_x=torch.stack([x, x]),
        members_y=torch.stack([y, y]),
        i=0,
        j=1,
        indices=(idx, idx),
    )


def expansion_count(m: int, n: int) -> int:
    """Number of learnable group combinations: m * C(m, n-1)."""
    if m < 1:
        raise ValueError(f"pair count must be positive, got {m}")
    if n < 2 or n > m + 1:
        raise ValueError(f"group size must satisfy 2 <= n <= m+1, got n={n} with m={m}")
    return m * math.comb(m, n - 1)


@dataclass
class AugmentConfig:
    """Magnitudes for pair-consistent augmentation.

    Flip is applied with probability ``flip_prob``; jitter and affine
    parameters are drawn uniformly from the symmetric ranges below on
    every call.
    """

    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    rot_degrees: float = 10.0
    translate_frac: float = 0.05
    scale_min: float = 0.95
    scale_max: float = 1.05

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(
            flip_prob=0.0,
            brightness=0.0,
            contrast=0.0,
            rot_degrees=0.0,
            translate_frac=0.0,
            scale_min=1.0,
            scale_max=1.0,
        )


@dataclass
class AugmentParams:
    """One concrete augmentation draw.

    ``matrix`` maps output normalized (row, col, 1) coordinates to source
    sampling positions; ``brightness``/``contrast`` are the color jitter
    factors applied after warping.
    """

    matrix: Tensor  # (2, 3) float64
    brightness: float
    contrast: float


def _rand(rng: torch.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return lo
    return float(torch.empty(1, dtype=torch.float64).uniform_(lo, hi, generator=rng))


def draw_augment_params(cfg: AugmentConfig, rng: torch.Generator) -> AugmentParams:
    """Draw one set of augmentation parameters.

    The sampling matrix is the inverse of flip -> scale -> rotate ->
    translate applied in normalized coordinates, so warping with it
    realizes that forward transform.
    """
    flip = _rand(rng, 0.0, 1.0) < cfg.flip_prob if cfg.flip_prob > 0 else False
    theta = math.radians(_rand(rng, -cfg.rot_degrees, cfg.rot_degrees))
    # translate_frac is a fraction of the image extent; normalized extent is 2.
    t_row = 2.0 * _rand(rng, -cfg.translate_frac, cfg.translate_frac)
    t_col = 2.0 * _rand(rng, -cfg.translate_frac, cfg.translate_frac)
    scale = _rand(rng, cfg.scale_min, cfg.scale_max)
    brightness = _rand(rng, -cfg.brightness, cfg.brightness)
    contrast = _rand(rng, -cfg.contrast, cfg.contrast)

    if not flip and theta == 0.0 and t_row == 0.0 and t_col == 0.0 and scale == 1.0:
        matrix = torch.eye(2, 3, dtype=torch.float64)
        if flip:
            matrix[1, 1] = -1.0
        return AugmentParams(matrix=matrix, brightness=brightness, contrast=contrast)

    forward = torch.eye(3, dtype=torch.float64)
    if flip:
        forward[1, 1] = -1.0
    scale_m = torch.eye(3, dtype=torch.float64)
    scale_m[0, 0] = scale
    scale_m[1, 1] = scale
    rot = torch.eye(3, dtype=torch.float64)
    rot[0, 0] = math.cos(theta)
    rot[0, 1] = -math.sin(theta)
    rot[1, 0] = math.sin(theta)
    rot[1, 1] = math.cos(theta)
    trans = torch.eye(3, dtype=torch.float64)
    trans[0, 2] = t_row
    trans[1, 2] = t_col
    forward = trans @ rot @ scale_m @ forward
    matrix = torch.linalg.inv(forward)[:2]
    return AugmentParams(matrix=matrix, brightness=brightness, contrast=contrast)


def params_to_flow(params: AugmentParams, height: int, width: int, dtype=torch.float32) -> Tensor:
    """Materialize the sampling matrix as an (H, W, 2) flow field."""
    grid = identity_flow(height, width, dtype=torch.float64)
    ones = torch.ones(height, width, 1, dtype=torch.float64)
    coords = torch.cat([grid, ones], dim=-1)  # (H, W, 3)
    flow = coords @ params.matrix.t()
    return flow.to(dtype)


def apply_augment(img: Tensor, params: AugmentParams) -> Tensor:
    """Apply one augmentation draw to a single (H, W, C) image."""
    height, width = img.shape[0], img.shape[1]
    out = apply_flow(img, params_to_flow(params, height, width, dtype=img.dtype))
    if params.brightness != 0.0 or params.contrast != 0.0:
        mean = out.mean()
        out = (out - mean) * (1.0 + params.contrast) + mean + params.brightness
    return out


def paired_augment(
    x: Tensor,
    y: Tensor,
    cfg: AugmentConfig,
    rng: torch.Generator,
) -> tuple[Tensor, Tensor]:
    """Augment an aligned pair with a single shared parameter draw.

    The same spatial transform and the same color jitter factors are
    applied to both images, so the edit between them is preserved.
    """
    if x.shape != y.shape:
        raise ValueError(f"pair shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    params = draw_augment_params(cfg, rng)
    return apply_augment(x, params), apply_augment(y, params)
