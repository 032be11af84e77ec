"""Datasets: directory loading, the synthetic imbalanced generator, previews."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .errors import DatasetError
from .graph import CLASS_NAMES
from .imageio import read_image, resize_bilinear, write_image
from .rng import Rng, derive_seed

IMAGE_SUFFIXES = (".png", ".pgm")

# Training-set class sizes of the six-class chest X-ray corpus, divided by 50.
DEFAULT_COUNTS = (39, 51, 84, 143, 10, 19)


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, H, W, 1], values in [0, 255]
    labels: np.ndarray  # [N] int64
    class_names: list[str]
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] != 1:
            raise DatasetError(f"images must be [N, H, W, 1], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError("class names must be unique")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside the class list")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        prov = [self.provenance[i] for i in idx] if self.provenance else []
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names), prov)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()


def normalize(images: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities to [0, 1]."""
    return images / 255.0


def load_dir(root, size: int | tuple[int, int] = 224) -> LabeledDataset:
    """Load ``root/<class>/<file>.png|pgm``; sorted class names give label indices."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    th, tw = (size, size) if isinstance(size, int) else size
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class subdirectories")
    images, labels, prov = [], [], []
    for k, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"{root / name}: class directory has no PNG/PGM images")
        for f in files:
            img = read_image(f)
            if img.shape != (th, tw):
                img = resize_bilinear(img, th, tw)
            images.append(np.clip(img, 0.0, 255.0))
            labels.append(k)
            prov.append(str(f))
    return LabeledDataset(np.stack(images)[..., None], np.array(labels), classes, prov)


def save_dir(ds: LabeledDataset, root, fmt: str = "pgm") -> None:
    root = Path(root)
    for k, name in enumerate(ds.class_names):
        (root / name).mkdir(parents=True, exist_ok=True)
    seen = [0] * len(ds.class_names)
    for img, y in zip(ds.images, ds.labels):
        write_image(root / ds.class_names[y] / f"{seen[y]:05d}.{fmt}", img[..., 0])
        seen[y] += 1


@dataclass
class SynthSpec:
    class_names: Sequence[str] = CLASS_NAMES
    counts: Sequence[int] = DEFAULT_COUNTS
    size: int = 64
    noise: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if len(self.class_names) != len(self.counts):
            raise DatasetError("one count per class required")
        if min(self.counts) < 1 or self.size < 4:
            raise DatasetError("counts must be >= 1 and size >= 4")


def _synth_image(rng: Rng, k: int, size: int, noise: float) -> np.ndarray:
    """Class ``k``: grating at ``30*k`` degrees plus a soft blob whose opacity grows with ``k``."""
    jitter = rng.uniform(6)
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = np.deg2rad(30.0 * k)
    phase = (jitter[0] - 0.5) * np.pi / 2
    freq = 4.0 + jitter[1]
    grating = 40.0 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    cy, cx = 0.5 + 0.2 * (jitter[2] - 0.5), 0.5 + 0.2 * (jitter[3] - 0.5)
    radius = 0.15 + 0.05 * jitter[4]
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius ** 2))
    opacity = 15.0 * k * (0.8 + 0.4 * jitter[5])
    img = 110.0 + grating + opacity * blob + noise * rng.normal(size * size).reshape(size, size)
    return np.clip(img, 0.0, 255.0)


def synth_generate(spec: SynthSpec = SynthSpec()) -> LabeledDataset:
    images, labels = [], []
    for k, n in enumerate(spec.counts):
        for i in range(n):
            rng = Rng(derive_seed(spec.seed, f"synth/{k}/{i}"))
            images.append(_synth_image(rng, k, spec.size, spec.noise))
            labels.append(k)
    return LabeledDataset(np.stack(images)[..., None], np.array(labels), list(spec.class_names),
                          ["synthetic"] * len(labels))


PREVIEW_OPS = ("negative", "maxpool", "maxminpool", "twomaxminpool")
_POOL_ALIASES = {"maxpool": "max", "max": "max", "maxminpool": "maxmin", "maxmin": "maxmin",
                 "twomaxminpool": "twomaxmin", "twomaxmin": "twomaxmin"}


def parse_ops(spec: str | Sequence[str]) -> list[str]:
    ops = [o.strip() for o in spec.split(",")] if isinstance(spec, str) else list(spec)
    bad = [o for o in ops if o != "negative" and o not in _POOL_ALIASES]
    if bad or not ops:
        raise ValueError(f"unknown preview ops {bad}; choose from {', '.join(PREVIEW_OPS)}")
    return ops


def apply_ops(img: np.ndarray, ops: Sequence[str], pool: int = 3, stride: int = 2,
              reference: float = 255.0) -> np.ndarray:
    """Run the preview pipeline on a 2-D plane; no display rescaling."""
    x = img[None, :, :, None].astype(np.float64)
    for op in parse_ops(ops):
        if op == "negative":
            x = L.negative_forward(x, L.NegativeSpec(reference))
        else:
            x, _ = L.pool_forward(x, L.PoolSpec(_POOL_ALIASES[op], (pool, pool), stride))
    return x[0, :, :, 0]


def rescale_for_display(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.clip(img, 0.0, 255.0)  # constant result: keep its value when displayable
    return (img - lo) * (255.0 / (hi - lo))


def enhance_preview(src, dst, ops: Sequence[str] | str = ("negative", "twomaxmin"),
                    pool: int = 3, stride: int = 2) -> np.ndarray:
    """Read ``src``, apply ``ops``, write the display-rescaled result to ``dst``.

    Returns the raw (pre-rescale) output plane.
    """
    out = apply_ops(read_image(src), ops, pool, stride)
    write_image(dst, rescale_for_display(out))
    return out
