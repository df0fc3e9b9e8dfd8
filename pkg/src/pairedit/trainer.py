"""End-to-end training orchestration, checkpointing, and evaluation.

A run is fully determined by its (config, seed): the same pair produces
byte-identical metric logs, and a checkpoint restores training so that
resuming matches an uninterrupted run exactly on the same platform.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from .autoencoder import AutoencoderConfig, ImageDecoder, ImageEncoder
from .config import RunConfig
from .editor import (
    AblationFlags,
    ConditionEmbedder,
    EditorNetConfig,
    LossWeights,
    ModelSet,
    NoiseSchedule,
    TargetPredictor,
    TrainingFault,
    make_linear_schedule,
    sample_edit,
    train_step,
)
from .metrics import FeatureGaussian, edit_mask, diou, frechet_distance, pixel_features, psnr
from .report import save_loss_curves, write_report
from .sampling import (
    PairedDataset,
    SampleGroup,
    identity_group,
    paired_augment,
    sample_group,
    seeded_rng,
)
from .source_net import SourceNetConfig, SourceTransformNet
from .synth import SynthSpec, generate, load_pair_folder

CHECKPOINT_VERSION = 1
_EVAL_SEED_STRIDE = 1000003
_EVAL_DATA_OFFSET = 7919


def build_models(cfg: RunConfig) -> ModelSet:
    """Construct all components for a run config (seed the global RNG
    first for reproducible initialization)."""
    factor = 2 ** (cfg.ae_levels - 1)
    return ModelSet(
        source_net=SourceTransformNet(SourceNetConfig(base_channels=cfg.src_channels)),
        encoder=ImageEncoder(
            AutoencoderConfig(
                base_channels=cfg.ae_channels,
                latent_channels=cfg.latent_channels,
                levels=cfg.ae_levels,
            )
        ),
        decoder=ImageDecoder(
            AutoencoderConfig(
                base_channels=cfg.ae_channels,
                latent_channels=cfg.latent_channels,
                levels=cfg.ae_levels,
            )
        ),
        denoiser=TargetPredictor(
            EditorNetConfig(
                image_size=cfg.size,
                latent_channels=cfg.latent_channels,
                downsample_factor=factor,
                cond_patch=cfg.cond_patch,
                cond_width=cfg.cond_width,
                latent_patch=cfg.latent_patch,
                width=cfg.vit_width,
                depth=cfg.vit_depth,
                heads=cfg.vit_heads,
                time_width=cfg.time_width,
                dual_norm=cfg.dual_norm,
            )
        ),
        cond_embedder=ConditionEmbedder(
            EditorNetConfig(
                image_size=cfg.size,
                cond_patch=cfg.cond_patch,
                cond_width=cfg.cond_width,
            )
        ),
    )


def train_dataset(cfg: RunConfig) -> PairedDataset:
    if cfg.task == "folder":
        return load_pair_folder(cfg.data_dir, cfg.size)
    spec = SynthSpec(kind=cfg.task, size=cfg.size, m=cfg.m)
    return generate(spec, seeded_rng(cfg.seed))


def eval_dataset(cfg: RunConfig) -> PairedDataset | None:
    if cfg.task == "folder":
        if not cfg.eval_dir:
            return None
        return load_pair_folder(cfg.eval_dir, cfg.size)
    spec = SynthSpec(kind=cfg.task, size=cfg.size, m=cfg.eval_m)
    return generate(spec, seeded_rng(cfg.seed + _EVAL_DATA_OFFSET))


def evaluate(
    models: ModelSet,
    train_ds: PairedDataset,
    eval_ds: PairedDataset,
    cfg: RunConfig,
    sched: NoiseSchedule,
    rng: torch.Generator,
    sample_steps: int | None = None,
) -> tuple[dict, list[tuple[Tensor, Tensor, Tensor]]]:
    """Edit every held-out source and score against its paired target.

    Returns the metric dict {fid, psnr_mean, diou, n_samples, tau} and
    the (input, edited, target) rows for the report figures.
    """
    if eval_ds.m < 1:
        raise ValueError("evaluation dataset is empty")
    flags = cfg.ablation_flags()
    rows = []
    psnrs = []
    gen_masks = []
    ref_masks = []
    edited_all = []
    steps = sample_steps or cfg.sample_steps
    for k in range(eval_ds.m):
        x, y = eval_ds.pair(k)
        edited = sample_edit(x, train_ds, steps, models, sched, rng, flags=flags)
        psnrs.append(psnr(edited, y))
        gen_masks.append(edit_mask(x, edited, cfg.tau))
        ref_masks.append(edit_mask(x, y, cfg.tau))
        edited_all.append(edited)
        rows.append((x, edited, y))
    fid = frechet_distance(
        FeatureGaussian.from_features(pixel_features(torch.stack(edited_all))),
        FeatureGaussian.from_features(pixel_features(eval_ds.targets)),
    )
    metrics = {
        "fid": fid,
        "psnr_mean": sum(psnrs) / len(psnrs),
        "diou": diou(gen_masks, ref_masks),
        "n_samples": eval_ds.m,
        "tau": cfg.tau,
    }
    return metrics, rows


def _draw_group(
    ds: PairedDataset,
    cfg: RunConfig,
    flags: AblationFlags,
    rng: torch.Generator,
) -> SampleGroup:
    aug = cfg.augment_config()
    if flags.no_nn_expansion:
        g = identity_group(ds, rng)
        if cfg.augment:
            ax, ay = paired_augment(g.x_i, g.y_i, aug, rng)
            return SampleGroup(
                members_x=torch.stack([ax, ax]),
                members_y=torch.stack([ay, ay]),
                i=0,
                j=1,
                indices=g.indices,
            )
        return g
    g = sample_group(ds, cfg.n, rng)
    if cfg.augment:
        ax, ay = paired_augment(g.x_j, g.y_j, aug, rng)
        mx = g.members_x.clone()
        my = g.members_y.clone()
        mx[g.j] = ax
        my[g.j] = ay
        return SampleGroup(members_x=mx, members_y=my, i=g.i, j=g.j, indices=g.indices)
    return g


def _fmt(value: float) -> str:
    return f"{value:.8e}"


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    metrics: dict | None


class Trainer:
    """Joint training loop with periodic held-out evaluation."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg.seed)
        self.models = build_models(cfg)
        self.optimizer = torch.optim.Adam(self.models.parameters(), lr=cfg.lr)
        self.lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, T_max=cfg.steps)
        self.sched = make_linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        self.rng = seeded_rng(cfg.seed + 1)
        self.step = 0
        self.train_ds = train_dataset(cfg)
        self.eval_ds = eval_dataset(cfg)
        self.history: list[dict] = []
        self.log_path = self.out_dir / "metrics.log"
        self.ckpt_path = self.out_dir / "checkpoint.pt"
        self.flags = cfg.ablation_flags()
        self.weights = LossWeights(
            freq=cfg.lambda_freq, kl=cfg.lambda_kl, rec=cfg.lambda_rec
        )

    def _log(self, line: str, header: bool = False):
        mode = "w" if header else "a"
        with open(self.log_path, mode, encoding="utf-8") as fh:
            fh.write(line if line.endswith("\n") else line + "\n")

    def _write_header(self):
        echo = "".join(f"# {ln}\n" for ln in self.cfg.to_kv_text().splitlines())
        self._log("# resolved config\n" + echo, header=True)

    def run(self, until: int | None = None) -> TrainResult:
        """Train to ``cfg.steps`` (or pause at ``until``) and checkpoint.

        A paused run saves a resumable checkpoint; resuming it replays
        exactly the steps an uninterrupted run would have taken.
        """
        stop = self.cfg.steps if until is None else min(until, self.cfg.steps)
        if self.step == 0:
            self._write_header()
        final_metrics = None
        while self.step < stop:
            self.step += 1
            groups = [
                _draw_group(self.train_ds, self.cfg, self.flags, self.rng)
                for _ in range(self.cfg.batch_groups)
            ]
            try:
                report = train_step(
                    groups,
                    self.models,
                    self.sched,
                    self.optimizer,
                    self.rng,
                    weights=self.weights,
                    flags=self.flags,
                )
            except TrainingFault as fault:
                fault.step = self.step
                self.save_checkpoint(self.out_dir / "checkpoint_fault.pt")
                self._log(f"step={self.step} fault={fault}")
                raise
            self.lr_sched.step()
            report["step"] = self.step
            self.history.append(report)
            self._log(
                f"step={self.step} total={_fmt(report['total'])} src={_fmt(report['src'])} "
                f"diff={_fmt(report['diff'])} freq={_fmt(report['freq'])} "
                f"kl={_fmt(report['kl'])} rec={_fmt(report['rec'])}"
            )
            is_last = self.step == self.cfg.steps
            if self.eval_ds is not None and (
                self.cfg.eval_every > 0 and self.step % self.cfg.eval_every == 0 or is_last
            ):
                metrics, rows = evaluate(
                    self.models,
                    self.train_ds,
                    self.eval_ds,
                    self.cfg,
                    self.sched,
                    seeded_rng(self.cfg.seed * _EVAL_SEED_STRIDE + self.step),
                )
                self._log(
                    f"step={self.step} eval_psnr={metrics['psnr_mean']:.6f} "
                    f"eval_diou={metrics['diou']:.6f} eval_fid={metrics['fid']:.6e}"
                )
                if is_last:
                    final_metrics = metrics
                    write_report(self.out_dir, metrics, rows, prefix="report")
        self.save_checkpoint(self.ckpt_path)
        if self.history:
            save_loss_curves(self.history, self.out_dir / "loss_curves.png")
        return TrainResult(checkpoint=self.ckpt_path, log=self.log_path, metrics=final_metrics)

    def save_checkpoint(self, path: str | Path) -> Path:
        return save_checkpoint(
            path, self.cfg, self.models, self.optimizer, self.lr_sched, self.step, self.rng
        )


def save_checkpoint(
    path: str | Path,
    cfg: RunConfig,
    models: ModelSet,
    optimizer: torch.optim.Optimizer,
    lr_sched,
    step: int,
    rng: torch.Generator,
) -> Path:
    """Atomically serialize the full training state."""
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "weights": models.state_dicts(),
        "optimizer": optimizer.state_dict(),
        "lr_sched": lr_sched.state_dict(),
        "step": step,
        "rng_state": rng.get_state(),
        "sched": {
            "timesteps": cfg.timesteps,
            "beta_start": cfg.beta_start,
            "beta_end": cfg.beta_end,
        },
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


@dataclass
class LoadedRun:
    cfg: RunConfig
    models: ModelSet
    optimizer: torch.optim.Optimizer
    lr_sched: object
    sched: NoiseSchedule
    step: int
    rng: torch.Generator


def load_checkpoint(path: str | Path) -> LoadedRun:
    """Restore a training run; schedule coefficients are recomputed."""
    path = Path(path)
    if not path.is_file():
        raise RuntimeError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise RuntimeError(f"unsupported checkpoint version {payload.get('format_version')}")
    cfg = RunConfig(**payload["config"]).validate()
    torch.manual_seed(cfg.seed)
    models = build_models(cfg)
    models.load_state_dicts(payload["weights"])
    optimizer = torch.optim.Adam(models.parameters(), lr=cfg.lr)
    optimizer.load_state_dict(payload["optimizer"])
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.steps)
    lr_sched.load_state_dict(payload["lr_sched"])
    sched_params = payload["sched"]
    sched = make_linear_schedule(
        sched_params["timesteps"], sched_params["beta_start"], sched_params["beta_end"]
    )
    rng = torch.Generator()
    rng.set_state(payload["rng_state"])
    return LoadedRun(
        cfg=cfg,
        models=models,
        optimizer=optimizer,
        lr_sched=lr_sched,
        sched=sched,
        step=payload["step"],
        rng=rng,
    )


def resume_trainer(loaded: LoadedRun, out_dir: str | Path) -> Trainer:
    """Rebuild a Trainer around a loaded checkpoint."""
    trainer = Trainer(loaded.cfg, out_dir)
    trainer.models = loaded.models
    trainer.optimizer = loaded.optimizer
    trainer.lr_sched = loaded.lr_sched
    trainer.sched = loaded.sched
    trainer.step = loaded.step
    trainer.rng = loaded.rng
    return trainer
