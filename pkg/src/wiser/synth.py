"""Synthetic benchmark images for exercising the two branches.

Two families of classes:

* layered: 3 to 5 horizontal color bands with a class-specific palette.
  Band boundaries wobble vertically by a few pixels per sample.  Color
  arrives in horizontal strata, exactly the structure a full-width
  slice kernel summarizes row by row.

* texture: vertical stripes of random grays in class-specific block
  widths (2, 4, 8, 16, 32 px), drawn with a random horizontal phase.
  Every row of a sample is identical and the palette is shared noise
  around mid-gray, so rows carry no class signal; telling these apart
  requires reading horizontal scale, which is local-receptive-field
  territory.

All randomness is derived from (seed, class, split, sample), so the
same spec always regenerates the same dataset, file for file.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .data import ImageSample, class_dir_name, encode_ppm
from .rng import Stream

_TEXTURE_BLOCK_WIDTHS = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    image_size: int = 64
    train_per_class: int = 200
    test_per_class: int = 50
    layered_fraction: float = 0.5
    boundary_jitter: int = 3
    pixel_noise: float = 0.03
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("per-class sample counts must be >= 1")
        if not (0.0 <= self.layered_fraction <= 1.0):
            raise ValueError("layered_fraction must lie in [0, 1]")
        if self.boundary_jitter < 0 or self.pixel_noise < 0:
            raise ValueError("jitter and noise must be >= 0")

    def layered_count(self) -> int:
        return int(round(self.num_classes * self.layered_fraction))


@dataclass(frozen=True)
class ClassDesc:
    index: int
    name: str
    kind: str                   # "layered" | "texture"
    bands: int = 0              # layered only
    palette: tuple = ()         # layered only, (bands, 3) rows
    block_width: int = 0        # texture only


def class_descriptors(spec: SynthSpec) -> List[ClassDesc]:
    spec.validate()
    root = Stream(spec.seed)
    out = []
    layered = spec.layered_count()
    for c in range(spec.num_classes):
        if c < layered:
            bands = 3 + (c % 3)
            stream = root.spawn("palette", c)
            palette = []
            prev = None
            for _ in range(bands):
                color = stream.uniform(3) * 0.8 + 0.15
                # keep neighbors visibly distinct; bounded deterministic retry
                for _ in range(20):
                    if prev is None or np.abs(color - prev).sum() >= 0.35:
                        break
                    color = stream.uniform(3) * 0.8 + 0.15
                palette.append(tuple(float(v) for v in color))
                prev = color
            out.append(ClassDesc(index=c, name=f"layered{c}", kind="layered",
                                 bands=bands, palette=tuple(palette)))
        else:
            bw = _TEXTURE_BLOCK_WIDTHS[(c - layered) % len(_TEXTURE_BLOCK_WIDTHS)]
            out.append(ClassDesc(index=c, name=f"texture{c - layered}", kind="texture",
                                 block_width=bw))
    return out


def band_cuts(desc: ClassDesc, size: int, stream: Stream, jitter: int) -> np.ndarray:
    """Row indexes where the next band starts (len = bands - 1)."""
    base = np.array([round(i * size / desc.bands) for i in range(1, desc.bands)], dtype=np.int64)
    if jitter > 0:
        base = base + stream.integers(desc.bands - 1, -jitter, jitter + 1)
    base = np.clip(base, 1, size - 1)
    return np.maximum.accumulate(base)


def make_sample(spec: SynthSpec, desc: ClassDesc, split: str, i: int) -> ImageSample:
    size = spec.image_size
    stream = Stream(spec.seed).spawn(split, desc.index, i)
    if desc.kind == "layered":
        cuts = band_cuts(desc, size, stream, spec.boundary_jitter)
        rows = np.searchsorted(cuts, np.arange(size), side="right")
        palette = np.array(desc.palette, dtype=np.float32)  # (bands, 3)
        img = np.broadcast_to(palette[rows].T[:, :, None], (3, size, size)).copy()
    else:
        bw = desc.block_width
        nblocks = math.ceil(size / bw) + 2
        colors = (stream.uniform(3 * nblocks).reshape(3, nblocks) * 0.6 + 0.2).astype(np.float32)
        phase = int(stream.integers(1, 0, bw)[0])
        cols = np.repeat(colors, bw, axis=1)[:, phase:phase + size]
        img = np.broadcast_to(cols[:, None, :], (3, size, size)).copy()
    if spec.pixel_noise > 0:
        noise = stream.normal(3 * size * size).reshape(3, size, size).astype(np.float32)
        img = img + np.float32(spec.pixel_noise) * noise
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return ImageSample(pixels=img, label=desc.index, id=f"{split}_{desc.index:02d}_{i:04d}")


def synth_dataset(spec: SynthSpec):
    """In-memory (train, test, class_names) for the given spec."""
    descs = class_descriptors(spec)
    train = [make_sample(spec, d, "train", i)
             for d in descs for i in range(spec.train_per_class)]
    test = [make_sample(spec, d, "test", i)
            for d in descs for i in range(spec.test_per_class)]
    return train, test, [d.name for d in descs]


def manifest_text(spec: SynthSpec) -> str:
    lines = [
        f"seed = {spec.seed}",
        f"classes = {spec.num_classes}",
        f"image_size = {spec.image_size}",
        f"train_per_class = {spec.train_per_class}",
        f"test_per_class = {spec.test_per_class}",
        f"layered_fraction = {spec.layered_fraction:g}",
        f"boundary_jitter = {spec.boundary_jitter}",
        f"pixel_noise = {spec.pixel_noise:g}",
    ]
    for d in class_descriptors(spec):
        if d.kind == "layered":
            lines.append(f"class {d.index} {d.name} kind=layered bands={d.bands}")
        else:
            lines.append(f"class {d.index} {d.name} kind=texture block_width={d.block_width}")
    return "\n".join(lines) + "\n"


def write_dataset(out_dir: str, spec: SynthSpec) -> Dict[str, int]:
    """Materialize the dataset as a PPM tree; returns per-split counts.

    Regenerating with the same spec rewrites byte-identical files.
    """
    descs = class_descriptors(spec)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "classes.txt"), "w", encoding="utf-8") as f:
        f.write("".join(d.name + "\n" for d in descs))
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write(manifest_text(spec))
    counts = {}
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        total = 0
        for d in descs:
            cdir = os.path.join(out_dir, split, class_dir_name(d.index, d.name))
            os.makedirs(cdir, exist_ok=True)
            for i in range(per_class):
                sample = make_sample(spec, d, split, i)
                with open(os.path.join(cdir, sample.id + ".ppm"), "wb") as f:
                    f.write(encode_ppm(sample.pixels))
                total += 1
        counts[split] = total
    return counts
