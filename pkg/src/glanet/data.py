"""Unpaired two-domain image data: folder loading, synthetic corpus, seeded iteration."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .config import ConfigError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MOTIFS = ("circles_to_squares", "solid_to_striped")


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class ImageSample:
    pixels: torch.Tensor  # [3, H, W] in [-1, 1]
    source_path: str


@dataclass(frozen=True)
class DomainDataset:
    domain_label: str
    samples: tuple[ImageSample, ...]
    seed: int

    def __post_init__(self):
        if self.domain_label not in ("source", "target"):
            raise ConfigError(f"unknown domain label {self.domain_label!r}")
        if not self.samples:
            raise DataError("dataset is empty")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ImageSample:
        return self.samples[i]

    @property
    def resolution(self) -> int:
        return self.samples[0].pixels.shape[-1]

    def order(self, epoch: int) -> np.ndarray:
        """Sample order for ``epoch``; depends only on (seed, epoch)."""
        return np.random.default_rng([self.seed, epoch]).permutation(len(self))

    def __iter__(self) -> Iterator[ImageSample]:
        return (self.samples[i] for i in self.order(0))

    def stack(self, indices=None) -> torch.Tensor:
        if indices is None:
            indices = range(len(self))
        return torch.stack([self.samples[i].pixels for i in indices])


def draw_target_index(seed: int, step: int, n: int, count: int = 1) -> np.ndarray:
    """Uniform target draws for one training step, a pure function of (seed, step)."""
    return np.random.default_rng([seed, 1, step]).integers(0, n, size=count)


def to_tensor(img: Image.Image, resolution: int) -> torch.Tensor:
    img = img.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).clamp_(-1.0, 1.0)


def to_image(pixels: torch.Tensor) -> Image.Image:
    arr = ((pixels.detach().float().clamp(-1, 1) + 1.0) * 127.5).round().byte()
    if arr.dim() == 2:
        return Image.fromarray(arr.cpu().numpy(), mode="L")
    return Image.fromarray(arr.permute(1, 2, 0).cpu().numpy(), mode="RGB")


def load_folder(path, resolution: int, seed: int = 0, domain_label: str = "source") -> DomainDataset:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    samples = []
    for f in files:
        try:
            with Image.open(f) as img:
                samples.append(ImageSample(to_tensor(img, resolution), str(f)))
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable image %s: %s", f, exc)
    if not files:
        raise DataError(f"no images found in {root}")
    if not samples:
        raise DataError(f"no images found in {root} (all {len(files)} files undecodable)")
    return DomainDataset(domain_label, tuple(samples), seed)


@dataclass(frozen=True)
class SyntheticSpec:
    resolution: int = 64
    count: int = 8
    motif: str = "circles_to_squares"
    seed: int = 7
    patch_size: int = 8

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError(f"synthetic count must be >= 1, got {self.count}")
        if self.motif not in MOTIFS:
            raise ConfigError(f"unknown motif {self.motif!r}; expected one of {MOTIFS}")
        if self.resolution % self.patch_size:
            raise ConfigError(
                f"resolution {self.resolution} not divisible by patch size {self.patch_size}"
            )


# (background, foreground) RGB in [-1, 1]
_PALETTES = {
    "source": ((-0.7, -0.6, 0.1), (0.8, -0.5, -0.6)),
    "target": ((0.5, 0.45, -0.3), (-0.5, 0.6, -0.2)),
}


def _render(rng: np.random.Generator, res: int, domain: str, motif: str) -> np.ndarray:
    bg, fg = (np.asarray(c, dtype=np.float64) for c in _PALETTES[domain])
    jitter = rng.uniform(-0.1, 0.1, size=3)
    img = np.empty((3, res, res))
    img[:] = (bg + jitter)[:, None, None]
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    for _ in range(rng.integers(1, 4)):
        r = rng.uniform(0.12, 0.22) * res
        cy, cx = rng.uniform(r, res - r, size=2)
        if domain == "source":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        color = fg + rng.uniform(-0.1, 0.1, size=3)
        if motif == "solid_to_striped" and domain == "target":
            period = max(2, res // 16)
            stripes = (np.floor(xx / period) % 2) == 0
            shade = np.where(stripes, 1.0, 0.3)
            img[:, mask] = color[:, None] * shade[mask][None, :]
        else:
            img[:, mask] = color[:, None]
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> tuple[DomainDataset, DomainDataset]:
    """Two unpaired domains differing in palette (global) and shape (local)."""
    spec.validate()
    out = []
    for k, domain in enumerate(("source", "target")):
        rng = np.random.default_rng([spec.seed, k])
        samples = tuple(
            ImageSample(
                torch.from_numpy(_render(rng, spec.resolution, domain, spec.motif)),
                f"synthetic:{spec.motif}:{domain}:{i}",
            )
            for i in range(spec.count)
        )
        out.append(DomainDataset(domain, samples, spec.seed))
    return out[0], out[1]


def dump_png(dataset: DomainDataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(1, int(math.log10(len(dataset))) + 1)
    paths = []
    for i, sample in enumerate(dataset.samples):
        p = out / f"{dataset.domain_label}_{i:0{width}d}.png"
        to_image(sample.pixels).save(p)
        paths.append(p)
    return paths
