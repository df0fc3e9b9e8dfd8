"""Procedural paired datasets with analytically known edit functions.

Each generator draws source images and produces targets by applying a
pure, documented edit function, so the edit function itself serves as
the ground-truth oracle for end-to-end evaluation.  Also handles saving
and loading pair folders (``<root>/source/*.png``, ``<root>/target/*.png``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .sampling import PairedDataset

TASK_KINDS = ("dot", "recolor", "outline")

# Rectangle fill sentinel: red channel 0.5 against backgrounds bounded by
# 0.4, so support detection by thresholding the red channel is exact.
_FILL_DETECT_THRESHOLD = 0.45
_COARSE_AMP = 0.35
_FINE_AMP = 0.05
_RECT_MIN = 6

_DOT_FILL = (0.5, 0.0, -0.5)
_DOT_OFFSET = 2  # dot corner offset from the rectangle's top-left corner
_DOT_SIZE = 2

_RECOLOR_FILL = (0.5, 0.0, -0.4)
_RECOLOR_SCALE = 0.5
_RECOLOR_BIAS = 0.3

_OUTLINE_FILL = (0.5, -0.2, 0.2)
_OUTLINE_COLOR = (-1.0, 1.0, -1.0)


@dataclass
class SynthSpec:
    """Configuration for a procedural paired dataset."""

    kind: str = "dot"
    size: int = 64
    m: int = 10

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.size < 16:
            raise ValueError(f"image size must be at least 16, got {self.size}")
        if self.m < 1:
            raise ValueError(f"pair count must be positive, got {self.m}")


def _rect_support(x: Tensor) -> tuple[int, int, int, int]:
    """Bounding box (r0, c0, r1, c1) of the rectangle, inclusive."""
    mask = x[..., 0] > _FILL_DETECT_THRESHOLD
    rows = mask.any(dim=1).nonzero().flatten()
    cols = mask.any(dim=0).nonzero().flatten()
    if rows.numel() == 0:
        raise ValueError("no rectangle support found in image")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def dot_edit(x: Tensor) -> Tensor:
    """Ground-truth edit for the dot task: a white 2x2 dot at a fixed
    offset from the rectangle's top-left corner."""
    r0, c0, _, _ = _rect_support(x)
    y = x.clone()
    y[r0 + _DOT_OFFSET : r0 + _DOT_OFFSET + _DOT_SIZE,
      c0 + _DOT_OFFSET : c0 + _DOT_OFFSET + _DOT_SIZE] = 1.0
    return y


def recolor_edit(x: Tensor) -> Tensor:
    """Ground-truth edit for the recolor task: a fixed (scale, bias)
    applied to every rectangle pixel."""
    mask = (x[..., 0] > _FILL_DETECT_THRESHOLD).unsqueeze(-1)
    return torch.where(mask, _RECOLOR_SCALE * x + _RECOLOR_BIAS, x)


def outline_edit(x: Tensor) -> Tensor:
    """Ground-truth edit for the outline task: a 1-pixel bright ring
    drawn just outside the rectangle border."""
    r0, c0, r1, c1 = _rect_support(x)
    y = x.clone()
    color = torch.tensor(_OUTLINE_COLOR, dtype=x.dtype)
    y[r0 - 1, c0 - 1 : c1 + 2] = color
    y[r1 + 1, c0 - 1 : c1 + 2] = color
    y[r0 - 1 : r1 + 2, c0 - 1] = color
    y[r0 - 1 : r1 + 2, c1 + 1] = color
    return y


EDIT_FNS = {"dot": dot_edit, "recolor": recolor_edit, "outline": outline_edit}


def _background(size: int, rng: torch.Generator) -> Tensor:
    coarse = (torch.rand(1, 3, 8, 8, generator=rng) * 2.0 - 1.0) * _COARSE_AMP
    smooth = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)
    fine = (torch.rand(1, 3, size, size, generator=rng) * 2.0 - 1.0) * _FINE_AMP
    return (smooth + fine).squeeze(0).permute(1, 2, 0).contiguous()


def _randint(rng: torch.Generator, lo: int, hi: int) -> int:
    # inclusive bounds
    if hi <= lo:
        return lo
    return int(torch.randint(lo, hi + 1, (1,), generator=rng))


def _draw_source(size: int, fill: tuple[float, float, float], rng: torch.Generator,
                 margin: int) -> Tensor:
    x = _background(size, rng)
    rect_max = max(_RECT_MIN, size // 4)
    rh = _randint(rng, _RECT_MIN, rect_max)
    rw = _randint(rng, _RECT_MIN, rect_max)
    r0 = _randint(rng, margin, size - rh - margin)
    c0 = _randint(rng, margin, size - rw - margin)
    x[r0 : r0 + rh, c0 : c0 + rw] = torch.tensor(fill, dtype=x.dtype)
    return x


def gen_dot_edit(spec: SynthSpec, rng: torch.Generator) -> PairedDataset:
    """Dot task: random rectangle on a noise-textured background; the
    target adds a white dot at a fixed offset inside the rectangle."""
    xs, ys = [], []
    for _ in range(spec.m):
        x = _draw_source(spec.size, _DOT_FILL, rng, margin=0)
        xs.append(x)
        ys.append(dot_edit(x))
    return PairedDataset(sources=torch.stack(xs), targets=torch.stack(ys))


def gen_recolor(spec: SynthSpec, rng: torch.Generator) -> PairedDataset:
    """Recolor task: the target applies a fixed color affine inside the
    rectangle and leaves everything else untouched."""
    xs, ys = [], []
    for _ in range(spec.m):
        x = _draw_source(spec.size, _RECOLOR_FILL, rng, margin=0)
        xs.append(x)
        ys.append(recolor_edit(x))
    return PairedDataset(sources=torch.stack(xs), targets=torch.stack(ys))


def gen_outline(spec: SynthSpec, rng: torch.Generator) -> PairedDataset:
    """Outline task: the target draws a 1-pixel ring around the rectangle."""
    xs, ys = [], []
    for _ in range(spec.m):
        x = _draw_source(spec.size, _OUTLINE_FILL, rng, margin=1)
        xs.append(x)
        ys.append(outline_edit(x))
    return PairedDataset(sources=torch.stack(xs), targets=torch.stack(ys))


_GENERATORS = {"dot": gen_dot_edit, "recolor": gen_recolor, "outline": gen_outline}


def generate(spec: SynthSpec, rng: torch.Generator) -> PairedDataset:
    """Generate a paired dataset for the given task kind."""
    return _GENERATORS[spec.kind](spec, rng)


def to_uint8(img: Tensor) -> Tensor:
    """Quantize a [-1, 1] image to 8-bit."""
    return ((img + 1.0) * 127.5).round().clamp(0, 255).to(torch.uint8)


def from_uint8(img: Tensor) -> Tensor:
    """Dequantize an 8-bit image back to [-1, 1] float32."""
    return img.to(torch.float32) / 127.5 - 1.0


def save_pair_folder(ds: PairedDataset, root: str | os.PathLike, force: bool = False,
                     name: str = "pairs") -> Path:
    """Write a dataset to ``root/source`` and ``root/target`` as 8-bit PNGs.

    Refuses to write into an existing non-empty folder unless ``force``.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise ValueError(f"output folder {root} exists and is not empty (use force)")
    (root / "source").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    for k in range(ds.m):
        fname = f"pair_{k:04d}.png"
        for sub, img in (("source", ds.sources[k]), ("target", ds.targets[k])):
            arr = to_uint8(img).numpy()
            Image.fromarray(arr, mode="RGB" if img.shape[-1] == 3 else "L").save(
                root / sub / fname
            )
    manifest = root / "manifest.txt"
    manifest.write_text(
        f"name={name}\nresolution={ds.sources.shape[1]}\nm={ds.m}\n", encoding="utf-8"
    )
    return root


def load_pair_folder(root: str | os.PathLike, size: int | None = None) -> PairedDataset:
    """Load a pair folder; pairs are matched by filename.

    Unmatched filenames are skipped and listed in ``dataset.skipped``.
    Images are decoded as RGB, optionally resized, and mapped to [-1, 1].
    """
    root = Path(root)
    src_dir, tgt_dir = root / "source", root / "target"
    if not src_dir.is_dir() or not tgt_dir.is_dir():
        raise ValueError(f"{root} must contain source/ and target/ subdirectories")
    src_names = {p.name for p in src_dir.iterdir() if p.is_file()}
    tgt_names = {p.name for p in tgt_dir.iterdir() if p.is_file()}
    matched = sorted(src_names & tgt_names)
    skipped = tuple(
        sorted([f"source/{n}" for n in src_names - tgt_names]
               + [f"target/{n}" for n in tgt_names - src_names])
    )
    if not matched:
        raise ValueError(f"no matched source/target filenames under {root}")

    def _load(path: Path) -> Tensor:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = torch.frombuffer(bytearray(im.tobytes()), dtype=torch.uint8)
            return from_uint8(arr.reshape(im.size[1], im.size[0], 3))

    xs = torch.stack([_load(src_dir / n) for n in matched])
    ys = torch.stack([_load(tgt_dir / n) for n in matched])
    return PairedDataset(sources=xs, targets=ys, names=tuple(matched), skipped=skipped)
