"""Conditioned diffusion generator over the latent space.

Holds the forward noising schedule, the condition embedder that turns a
transform pack into cross-attention tokens, the ViT denoiser that
regresses the clean edited latent directly (rather than the injected
noise), the joint training step, and the deterministic inference
sampler that re-anchors each step on the current clean estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .autoencoder import (
    ImageDecoder,
    ImageEncoder,
    SkipStack,
    decode,
    encode,
    kl_loss,
    reparameterize,
)
from .metrics import frequency_loss
from .sampling import PairedDataset, SampleGroup
from .source_net import SourceTransformNet, predict_transform, source_loss
from .transforms import TransformPack


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass
class NoiseSchedule:
    """Linear variance-preserving forward process.

    ``betas`` has one entry per step t = 1..T; ``alpha_bar`` has T+1
    entries with alpha_bar[0] = 1 and alpha_bar[t] the running product
    of (1 - beta) up to step t.
    """

    betas: Tensor
    alpha_bar: Tensor

    @property
    def T(self) -> int:
        return self.betas.shape[0]


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Build a schedule with betas linearly interpolated between the
    inclusive endpoints."""
    if T < 1:
        raise ValueError(f"step count must be positive, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
    return NoiseSchedule(betas=betas, alpha_bar=alpha_bar)


def add_noise(y: Tensor, z: Tensor, t: int | Tensor, sched: NoiseSchedule) -> Tensor:
    """Forward noising: sqrt(alpha_bar[t]) * y + sqrt(1 - alpha_bar[t]) * z.

    ``t`` may be a scalar or a per-sample tensor of timesteps in [0, T].
    At t = 0 the input is returned exactly.
    """
    if y.shape != z.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(z.shape)}")
    t_idx = torch.as_tensor(t, dtype=torch.long)
    if t_idx.min() < 0 or t_idx.max() > sched.T:
        raise ValueError(f"timestep out of range [0, {sched.T}]: {t}")
    ab = sched.alpha_bar[t_idx].to(y.dtype)
    while ab.dim() < y.dim():
        ab = ab.unsqueeze(-1)
    return ab.sqrt() * y + (1.0 - ab).sqrt() * z


# ---------------------------------------------------------------------------
# Networks


@dataclass
class EditorNetConfig:
    image_size: int = 64
    latent_channels: int = 4
    downsample_factor: int = 4
    cond_patch: int = 8
    cond_width: int = 64
    latent_patch: int = 2
    width: int = 128
    depth: int = 4
    heads: int = 4
    time_width: int = 64
    dual_norm: bool = True

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample_factor


def sinusoidal_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Standard sinusoidal embedding of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ConditionEmbedder(nn.Module):
    """Patchifies a transform-pack raster into cross-attention tokens.

    Each (p x p x 4) patch is linearly projected to the condition width;
    a learned positional encoding is added on top of the content
    projection.
    """

    def __init__(self, cfg: EditorNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or EditorNetConfig()
        if self.cfg.image_size % self.cfg.cond_patch:
            raise ValueError("image size must be divisible by the condition patch size")
        self.proj = nn.Conv2d(4, self.cfg.cond_width, self.cfg.cond_patch, stride=self.cfg.cond_patch)
        tokens = (self.cfg.image_size // self.cfg.cond_patch) ** 2
        self.pos = nn.Parameter(torch.zeros(1, tokens, self.cfg.cond_width))
        nn.init.normal_(self.pos, std=0.02)

    def content_tokens(self, raster: Tensor) -> Tensor:
        """Per-patch content projection only, without positional encoding."""
        return self.proj(raster).flatten(2).transpose(1, 2)

    def forward(self, raster: Tensor) -> Tensor:
        return self.content_tokens(raster) + self.pos


def embed_condition(pack: TransformPack, net: ConditionEmbedder) -> Tensor:
    """Turn a TransformPack into condition tokens (L, d) or (B, L, d)."""
    raster = pack.to_raster()
    single = raster.dim() == 3
    if single:
        raster = raster.unsqueeze(0)
    if raster.shape[1] != net.cfg.image_size or raster.shape[2] != net.cfg.image_size:
        raise ValueError(
            f"pack resolution {tuple(raster.shape[1:3])} does not match the "
            f"configured image size {net.cfg.image_size}"
        )
    tokens = net(raster.permute(0, 3, 1, 2))
    return tokens.squeeze(0) if single else tokens


class _DualNormBlock(nn.Module):
    """Transformer block with self-attention, cross-attention, and MLP,
    normalized both before each sub-block and after its residual sum."""

    def __init__(self, width: int, cond_width: int, heads: int, dual_norm: bool = True):
        super().__init__()
        self.dual_norm = dual_norm
        self.norm_sa = nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.post_sa = nn.LayerNorm(width) if dual_norm else nn.Identity()
        self.norm_ca = nn.LayerNorm(width)
        self.cross_attn = nn.MultiheadAttention(
            width, heads, kdim=cond_width, vdim=cond_width, batch_first=True
        )
        self.post_ca = nn.LayerNorm(width) if dual_norm else nn.Identity()
        self.norm_mlp = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width)
        )
        self.post_mlp = nn.LayerNorm(width) if dual_norm else nn.Identity()

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.norm_sa(x)
        x = self.post_sa(x + self.self_attn(h, h, h, need_weights=False)[0])
        h = self.norm_ca(x)
        x = self.post_ca(x + self.cross_attn(h, cond, cond, need_weights=False)[0])
        x = self.post_mlp(x + self.mlp(self.norm_mlp(x)))
        return x


class TargetPredictor(nn.Module):
    """ViT over the latent stack [noisy target latent | condition latent].

    Predicts the clean edited latent directly, parameterized as a
    residual over the condition-image latent: the conditions provide the
    canvas and the network learns the edit delta on top of it.  Timestep
    information is added to every token via a sinusoidal embedding
    passed through a small MLP; the transform-pack tokens enter through
    cross-attention.
    """

    def __init__(self, cfg: EditorNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or EditorNetConfig()
        if self.cfg.latent_size % self.cfg.latent_patch:
            raise ValueError("latent size must be divisible by the latent patch size")
        d = self.cfg.latent_channels
        p = self.cfg.latent_patch
        self.patch = nn.Conv2d(2 * d, self.cfg.width, p, stride=p)
        self.grid = self.cfg.latent_size // p
        self.pos = nn.Parameter(torch.zeros(1, self.grid * self.grid, self.cfg.width))
        nn.init.normal_(self.pos, std=0.02)
        self.time_mlp = nn.Sequential(
            nn.Linear(self.cfg.time_width, self.cfg.width),
            nn.SiLU(),
            nn.Linear(self.cfg.width, self.cfg.width),
        )
        self.blocks = nn.ModuleList(
            [
                _DualNormBlock(self.cfg.width, self.cfg.cond_width, self.cfg.heads, self.cfg.dual_norm)
                for _ in range(self.cfg.depth)
            ]
        )
        self.out_norm = nn.LayerNorm(self.cfg.width)
        self.head = nn.Linear(self.cfg.width, p * p * d)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, stack: Tensor, t: Tensor, cond: Tensor) -> Tensor:
        batch = stack.shape[0]
        d = self.cfg.latent_channels
        x = self.patch(stack).flatten(2).transpose(1, 2) + self.pos
        x = x + self.time_mlp(sinusoidal_embedding(t, self.cfg.time_width))[:, None]
        for blk in self.blocks:
            x = blk(x, cond)
        x = self.head(self.out_norm(x))
        p = self.cfg.latent_patch
        x = x.view(batch, self.grid, self.grid, p, p, d)
        x = x.permute(0, 5, 1, 3, 2, 4).reshape(batch, d, self.grid * p, self.grid * p)
        return stack[:, d:] + x


def predict_target(stack: Tensor, t: int | Tensor, cond: Tensor, net: TargetPredictor) -> Tensor:
    """Predict the clean edited latent from the noisy stack at timestep t.

    ``stack`` is the channel-concatenation of the noisy target latent and
    the condition-image latent, shape (h, w, 2d) or (B, h, w, 2d).
    """
    single = stack.dim() == 3
    if single:
        stack = stack.unsqueeze(0)
        if cond.dim() == 2:
            cond = cond.unsqueeze(0)
    d = net.cfg.latent_channels
    if stack.shape[-1] != 2 * d:
        raise ValueError(f"expected {2 * d} stacked latent channels, got {stack.shape[-1]}")
    if stack.shape[1] != net.cfg.latent_size or stack.shape[2] != net.cfg.latent_size:
        raise ValueError(
            f"latent resolution {tuple(stack.shape[1:3])} does not match the "
            f"configured size {net.cfg.latent_size}"
        )
    t_vec = torch.as_tensor(t)
    if t_vec.dim() == 0:
        t_vec = t_vec.expand(stack.shape[0])
    out = net(stack.permute(0, 3, 1, 2), t_vec, cond).permute(0, 2, 3, 1)
    return out.squeeze(0) if single else out


# ---------------------------------------------------------------------------
# Joint training


@dataclass
class ModelSet:
    """All trainable components, keyed for checkpointing."""

    source_net: SourceTransformNet
    encoder: ImageEncoder
    decoder: ImageDecoder
    denoiser: TargetPredictor
    cond_embedder: ConditionEmbedder

    COMPONENT_KEYS = ("m_x", "enc", "dec", "m_y", "m_e")

    def _by_key(self) -> dict[str, nn.Module]:
        return {
            "m_x": self.source_net,
            "enc": self.encoder,
            "dec": self.decoder,
            "m_y": self.denoiser,
            "m_e": self.cond_embedder,
        }

    def parameters(self):
        for module in self._by_key().values():
            yield from module.parameters()

    def train(self):
        for module in self._by_key().values():
            module.train()
        return self

    def eval(self):
        for module in self._by_key().values():
            module.eval()
        return self

    def state_dicts(self) -> dict[str, dict]:
        return {key: module.state_dict() for key, module in self._by_key().items()}

    def load_state_dicts(self, blobs: dict[str, dict]):
        for key, module in self._by_key().items():
            module.load_state_dict(blobs[key])
        return self


@dataclass
class LossWeights:
    src: float = 1.0
    diff: float = 1.0
    freq: float = 0.1
    kl: float = 1e-6
    rec: float = 1.0


@dataclass
class AblationFlags:
    no_nn_expansion: bool = False
    no_xj_concat: bool = False
    no_fc_condition: bool = False
    no_skips: bool = False
    no_noise: bool = False
    no_freq_loss: bool = False

    NAMES = ("no_nn_expansion", "no_xj_concat", "no_fc_condition",
             "no_skips", "no_noise", "no_freq_loss")


class TrainingFault(RuntimeError):
    """Raised when the composite loss turns non-finite."""

    def __init__(self, message: str, report: dict[str, float] | None = None, step: int | None = None):
        super().__init__(message)
        self.report = report or {}
        self.step = step


def _stack_roles(groups: Sequence[SampleGroup]) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    x_i = torch.stack([g.x_i for g in groups])
    x_j = torch.stack([g.x_j for g in groups])
    y_i = torch.stack([g.y_i for g in groups])
    y_j = torch.stack([g.y_j for g in groups])
    return x_i, x_j, y_i, y_j


def train_step(
    groups: SampleGroup | Sequence[SampleGroup],
    models: ModelSet,
    sched: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    rng: torch.Generator,
    weights: LossWeights | None = None,
    flags: AblationFlags | None = None,
) -> dict[str, float]:
    """One joint optimization step over a batch of sample groups.

    Computes the composite loss (source reconstruction, latent target
    prediction, frequency constraint on the decoded prediction, KL, and
    autoencoder reconstruction), backpropagates through every component,
    and applies the optimizer.  Terms with zero weight are skipped and
    reported as 0.  Raises :class:`TrainingFault` when the loss is
    non-finite.
    """
    weights = weights or LossWeights()
    flags = flags or AblationFlags()
    if isinstance(groups, SampleGroup):
        groups = [groups]
    x_i, x_j, y_i, y_j = _stack_roles(groups)
    batch = x_i.shape[0]

    report: dict[str, float] = {k: 0.0 for k in ("total", "src", "diff", "freq", "kl", "rec")}
    terms = []

    if weights.src != 0.0:
        pack = predict_transform(x_i, x_j, models.source_net)
        src = source_loss(x_i, x_j, pack)
        terms.append(weights.src * src)
        report["src"] = float(src.detach())
    else:
        pack = predict_transform(x_i, x_j, models.source_net)

    freq_weight = 0.0 if flags.no_freq_loss else weights.freq
    latent_terms = weights.diff != 0.0 or weights.rec != 0.0 or weights.kl != 0.0 or freq_weight != 0.0
    if latent_terms:
        mu_i, lv_i, _ = encode(y_i, models.encoder)
        mu_j, lv_j, _ = encode(y_j, models.encoder)
        mu_x, _lv_x, skips = encode(x_j, models.encoder)
        z_i = reparameterize(mu_i, lv_i, rng)
        z_j = reparameterize(mu_j, lv_j, rng)
        z_x = torch.zeros_like(mu_x) if flags.no_xj_concat else mu_x
        skips_used = skips.zeros_like() if flags.no_skips else skips
        noise_scale = 0.0 if flags.no_noise else 1.0

        if weights.diff != 0.0 or freq_weight != 0.0:
            t = torch.randint(1, sched.T + 1, (batch,), generator=rng)
            noise = torch.randn(z_i.shape, generator=rng, dtype=z_i.dtype)
            y_t = add_noise(z_i, noise, t, sched)
            cond = embed_condition(pack, models.cond_embedder)
            if flags.no_fc_condition:
                cond = torch.zeros_like(cond)
            pred = predict_target(torch.cat([y_t, z_x], dim=-1), t, cond, models.denoiser)
            if weights.diff != 0.0:
                diff = F.mse_loss(pred, z_j)
                terms.append(weights.diff * diff)
                report["diff"] = float(diff.detach())
            if freq_weight != 0.0:
                decoded = decode(pred, skips_used, models.decoder, noise_scale, rng)
                freq = frequency_loss(decoded, y_j, focal=True)
                terms.append(freq_weight * freq)
                report["freq"] = float(freq.detach())
        if weights.rec != 0.0:
            recon = decode(z_j, skips_used, models.decoder, noise_scale, rng)
            rec = F.mse_loss(recon, y_j)
            terms.append(weights.rec * rec)
            report["rec"] = float(rec.detach())
        if weights.kl != 0.0:
            kl = 0.5 * (kl_loss(mu_i, lv_i) + kl_loss(mu_j, lv_j))
            terms.append(weights.kl * kl)
            report["kl"] = float(kl.detach())

    total = sum(terms) if terms else x_i.new_zeros(())
    report["total"] = float(total.detach())
    if not math.isfinite(report["total"]):
        raise TrainingFault(f"non-finite training loss: {report}", report=report)

    optimizer.zero_grad(set_to_none=True)
    if terms:
        total.backward()
        optimizer.step()
    return report


# ---------------------------------------------------------------------------
# Inference


def sample_edit(
    x_j: Tensor,
    ds: PairedDataset,
    steps: int,
    models: ModelSet,
    sched: NoiseSchedule,
    rng: torch.Generator,
    flags: AblationFlags | None = None,
    ref_index: int | None = None,
) -> Tensor:
    """Edit a new image by sampling the reverse process.

    Draws a reference pair from ``ds`` (or uses ``ref_index``), predicts
    the transform pack from the reference source to ``x_j``, then runs
    ``steps`` deterministic reverse updates: each step predicts the clean
    edited latent and re-anchors the state on it, carrying the implied
    residual direction to the next timestep.  The final latent is decoded
    with the condition image's skip stack and clamped to [-1, 1].
    """
    if steps < 1:
        raise ValueError(f"sampler steps must be positive, got {steps}")
    flags = flags or AblationFlags()
    models.eval()
    with torch.no_grad():
        if ref_index is None:
            ref_index = int(torch.randint(ds.m, (1,), generator=rng))
        x_i, y_i = ds.pair(ref_index)
        if x_i.shape != x_j.shape:
            raise ValueError(
                f"edit input shape {tuple(x_j.shape)} does not match dataset shape {tuple(x_i.shape)}"
            )
        pack = predict_transform(x_i, x_j, models.source_net)
        cond = embed_condition(pack, models.cond_embedder)
        if flags.no_fc_condition:
            cond = torch.zeros_like(cond)
        mu_i, _, _ = encode(y_i, models.encoder)
        mu_x, _, skips = encode(x_j, models.encoder)
        z_x = torch.zeros_like(mu_x) if flags.no_xj_concat else mu_x
        skips_used = skips.zeros_like() if flags.no_skips else skips
        noise_scale = 0.0 if flags.no_noise else 1.0

        noise = torch.randn(mu_i.shape, generator=rng, dtype=mu_i.dtype)
        state = add_noise(mu_i, noise, sched.T, sched)
        ts = torch.linspace(sched.T, 0, steps + 1).round().long()
        pred = state
        for k in range(steps):
            t_cur, t_next = int(ts[k]), int(ts[k + 1])
            pred = predict_target(torch.cat([state, z_x], dim=-1), t_cur, cond, models.denoiser)
            if t_next == 0:
                state = pred
            else:
                ab_cur = float(sched.alpha_bar[t_cur])
                ab_next = float(sched.alpha_bar[t_next])
                resid = (state - math.sqrt(ab_cur) * pred) / math.sqrt(1.0 - ab_cur)
                state = math.sqrt(ab_next) * pred + math.sqrt(1.0 - ab_next) * resid
        out = decode(state, skips_used, models.decoder, noise_scale, rng)
        return out.clamp(-1.0, 1.0)
