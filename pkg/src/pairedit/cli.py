"""Command-line interface: train, edit, eval, and synth subcommands.

Outputs default under the directory named by the PAIREDIT_OUT
environment variable (falling back to the working directory).  Exits 0
on success and nonzero with a one-line ``error: ...`` message on failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch
from PIL import Image

from .config import RunConfig, apply_overrides, parse_kv_text
from .editor import AblationFlags, sample_edit
from .report import write_report
from .sampling import seeded_rng
from .synth import SynthSpec, from_uint8, generate, load_pair_folder, save_pair_folder, to_uint8
from .trainer import Trainer, evaluate, load_checkpoint, train_dataset

OUT_ENV = "PAIREDIT_OUT"
_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}


def _out_root(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUT_ENV, "."))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pairedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="key=value config file")
    p_train.add_argument("--ablate", default="", help="comma list of ablation flags to enable")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="output directory")
    p_train.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key"
    )

    p_edit = sub.add_parser("edit", help="edit an image or folder with a trained model")
    p_edit.add_argument("--ckpt", required=True)
    p_edit.add_argument("--in", dest="input", required=True, help="image file or folder")
    p_edit.add_argument("--steps", type=int, default=None, help="sampler steps")
    p_edit.add_argument("--seed", type=int, default=0)
    p_edit.add_argument("--out", default=None, help="output directory (default: next to inputs)")
    p_edit.add_argument("--suffix", default="_edited")
    p_edit.add_argument("--strict", action="store_true", help="fail on resolution mismatch")

    p_eval = sub.add_parser("eval", help="evaluate a trained model on a pair folder")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True, help="pair folder with source/ and target/")
    p_eval.add_argument("--steps", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", default=None)

    p_synth = sub.add_parser("synth", help="materialize a synthetic paired dataset")
    p_synth.add_argument("--task", required=True, choices=("dot", "recolor", "outline"))
    p_synth.add_argument("--m", type=int, required=True)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--force", action="store_true")
    return parser


def _cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config)
    overrides: dict[str, str] = {}
    for item in args.set:
        overrides.update(parse_kv_text(item))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for flag in filter(None, (f.strip() for f in args.ablate.split(","))):
        if flag not in AblationFlags.NAMES:
            raise ValueError(f"unknown ablation flag {flag!r}; expected one of {AblationFlags.NAMES}")
        overrides[flag] = "true"
    apply_overrides(cfg, overrides)
    out_dir = _out_root(args.out)
    result = Trainer(cfg, out_dir).run()
    print(f"checkpoint={result.checkpoint}")
    print(f"log={result.log}")
    if result.metrics:
        print(
            f"eval psnr_mean={result.metrics['psnr_mean']:.4f} "
            f"diou={result.metrics['diou']:.4f} fid={result.metrics['fid']:.6g}"
        )
    return 0


def _load_image(path: Path, size: int, strict: bool) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (size, size):
            if strict:
                raise ValueError(
                    f"{path.name}: resolution {im.size} does not match model size {size} (--strict)"
                )
            print(f"warning: resizing {path.name} from {im.size} to {size}x{size}", file=sys.stderr)
            im = im.resize((size, size), Image.BILINEAR)
        arr = torch.frombuffer(bytearray(im.tobytes()), dtype=torch.uint8)
        return from_uint8(arr.reshape(size, size, 3))


def _cmd_edit(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    cfg = loaded.cfg
    ds = train_dataset(cfg)
    flags = cfg.ablation_flags()
    steps = args.steps or cfg.sample_steps
    in_path = Path(args.input)
    if in_path.is_dir():
        inputs = sorted(p for p in in_path.iterdir() if p.suffix.lower() in _IMAGE_EXTS)
        if not inputs:
            raise ValueError(f"no images found in {in_path}")
    elif in_path.is_file():
        inputs = [in_path]
    else:
        raise ValueError(f"input path does not exist: {in_path}")
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = seeded_rng(args.seed)
    for path in inputs:
        img = _load_image(path, cfg.size, args.strict)
        ref = int(torch.randint(ds.m, (1,), generator=rng))
        edited = sample_edit(img, ds, steps, loaded.models, loaded.sched, rng,
                             flags=flags, ref_index=ref)
        target_dir = out_dir if out_dir else path.parent
        out_path = target_dir / f"{path.stem}{args.suffix}.png"
        Image.fromarray(to_uint8(edited).numpy(), mode="RGB").save(out_path)
        print(f"edited {path.name} ref_pair={ref} -> {out_path}")
    return 0


def _cmd_eval(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    cfg = loaded.cfg
    eval_ds = load_pair_folder(args.data, cfg.size)
    train_ds = train_dataset(cfg)
    metrics, rows = evaluate(
        loaded.models,
        train_ds,
        eval_ds,
        cfg,
        loaded.sched,
        seeded_rng(args.seed),
        sample_steps=args.steps,
    )
    out_dir = _out_root(args.out)
    paths = write_report(out_dir, metrics, rows)
    for key in ("fid", "psnr_mean", "diou", "n_samples", "tau"):
        print(f"{key}={metrics[key]}")
    print(f"report={paths['text']}")
    return 0


def _cmd_synth(args) -> int:
    spec = SynthSpec(kind=args.task, size=args.size, m=args.m)
    ds = generate(spec, seeded_rng(args.seed))
    root = save_pair_folder(ds, args.out, force=args.force, name=args.task)
    print(f"wrote {ds.m} pairs to {root}")
    return 0


_COMMANDS = {"train": _cmd_train, "edit": _cmd_edit, "eval": _cmd_eval, "synth": _cmd_synth}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
