"""Run configuration: a flat key=value format with CLI overrides.

A config file fully determines a run given its seed.  Unknown keys are
rejected; values are coerced to the declared field types.  The resolved
config is echoed into every log header so experiment records stay
diff-able.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .editor import AblationFlags
from .sampling import AugmentConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    # data
    task: str = "dot"                 # dot | recolor | outline | folder
    data_dir: str = ""                # pair folder when task=folder
    eval_dir: str = ""                # optional held-out folder when task=folder
    size: int = 64
    m: int = 10
    n: int = 2
    eval_m: int = 20
    # diffusion schedule
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # loss weights
    lambda_freq: float = 0.1
    lambda_kl: float = 1e-6
    lambda_rec: float = 1.0
    # augmentation
    augment: bool = True
    flip_prob: float = 0.5
    jitter: float = 0.1
    rot_degrees: float = 10.0
    translate_frac: float = 0.05
    scale_min: float = 0.95
    scale_max: float = 1.05
    # optimization
    lr: float = 2e-4
    steps: int = 5000
    batch_groups: int = 8
    seed: int = 0
    eval_every: int = 1000
    sample_steps: int = 8
    tau: float = 0.1
    # network sizes
    src_channels: int = 12
    ae_channels: int = 12
    latent_channels: int = 4
    ae_levels: int = 3
    vit_width: int = 96
    vit_depth: int = 3
    vit_heads: int = 4
    cond_width: int = 64
    cond_patch: int = 8
    latent_patch: int = 2
    time_width: int = 64
    dual_norm: bool = True
    # ablation switches (all off = the full model)
    no_nn_expansion: bool = False
    no_xj_concat: bool = False
    no_fc_condition: bool = False
    no_skips: bool = False
    no_noise: bool = False
    no_freq_loss: bool = False

    def validate(self) -> "RunConfig":
        if self.task not in ("dot", "recolor", "outline", "folder"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "folder" and not self.data_dir:
            raise ValueError("task=folder requires data_dir")
        if self.n < 2:
            raise ValueError(f"group size n must be at least 2, got {self.n}")
        if self.m < 1 or self.steps < 1 or self.batch_groups < 1:
            raise ValueError("m, steps, and batch_groups must be positive")
        factor = 2 ** (self.ae_levels - 1)
        if self.size % (factor * self.latent_patch):
            raise ValueError(
                f"size {self.size} must be divisible by downsample * latent_patch "
                f"({factor} * {self.latent_patch})"
            )
        if self.size % self.cond_patch:
            raise ValueError(f"size {self.size} must be divisible by cond_patch {self.cond_patch}")
        return self

    def ablation_flags(self) -> AblationFlags:
        return AblationFlags(
            no_nn_expansion=self.no_nn_expansion,
            no_xj_concat=self.no_xj_concat,
            no_fc_condition=self.no_fc_condition,
            no_skips=self.no_skips,
            no_noise=self.no_noise,
            no_freq_loss=self.no_freq_loss,
        )

    def augment_config(self) -> AugmentConfig:
        if not self.augment:
            return AugmentConfig.disabled()
        return AugmentConfig(
            flip_prob=self.flip_prob,
            brightness=self.jitter,
            contrast=self.jitter,
            rot_degrees=self.rot_degrees,
            translate_frac=self.translate_frac,
            scale_min=self.scale_min,
            scale_max=self.scale_max,
        )

    def to_kv_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "RunConfig":
        cfg = cls()
        apply_overrides(cfg, mapping)
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_mapping(parse_kv_text(Path(path).read_text(encoding="utf-8")))


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(name: str, value: str, target_type) -> object:
    if target_type is bool:
        low = str(value).strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {value!r}")
    try:
        return target_type(value)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"config key {name}: {exc}") from exc


def apply_overrides(cfg: RunConfig, mapping: dict[str, str]) -> RunConfig:
    """Set config fields from string values, coercing to field types."""
    types = {f.name: f.type for f in dataclasses.fields(cfg)}
    real = {f.name: type(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    for key, value in mapping.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, _coerce(key, value, real[key]))
    return cfg
