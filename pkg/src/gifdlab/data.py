"""Procedural desk-scale image datasets.

Ten shape classes rendered at 32x32 with random placement, scale, colour and a
smooth background gradient.  Rendering is supersampled 2x and box-filtered so
edges are anti-aliased.  A style-shifted variant (``style="ood"``) keeps the
label space but changes the colour statistics and adds a texture, which gives
out-of-distribution targets for a generator trained on the base style.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .core import ImageBatch, seeded_rng

CLASS_NAMES = (
    "disk", "square", "triangle", "plus", "ring",
    "hstripes", "vstripes", "diamond", "xcross", "checker",
)
NUM_CLASSES = len(CLASS_NAMES)


@dataclass
class Dataset:
    images: torch.Tensor  # [N, C, H, W] float32 in [0, 1]
    labels: torch.Tensor  # [N] int64

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return Dataset(self.images[idx], self.labels[idx])

    def batch(self, idx) -> ImageBatch:
        sub = self.subset(idx)
        return ImageBatch(sub.images.clone(), sub.labels.clone())

    def relabel(self, mapping) -> "Dataset":
        mapping = torch.as_tensor(np.asarray(mapping, dtype=np.int64))
        return Dataset(self.images, mapping[self.labels])


def _shape_mask(cls, u, v, size, angle, period):
    # u, v: centred coordinates in units of the shape size
    ru = np.cos(angle) * u - np.sin(angle) * v
    rv = np.sin(angle) * u + np.cos(angle) * v
    r = np.sqrt(u**2 + v**2)
    if cls == 0:
        return r <= 1.0
    if cls == 1:
        return (np.abs(ru) <= 0.85) & (np.abs(rv) <= 0.85)
    if cls == 2:
        return (rv >= -0.7) & (rv <= 0.9 - 1.6 * np.abs(ru) * 1.1)
    if cls == 3:
        arm = 0.3
        return ((np.abs(ru) <= arm) & (np.abs(rv) <= 1.0)) | ((np.abs(rv) <= arm) & (np.abs(ru) <= 1.0))
    if cls == 4:
        return (r <= 1.0) & (r >= 0.55)
    if cls == 5:
        return (np.abs(u) <= 1.3) & (np.abs(v) <= 1.3) & (np.floor(v * period) % 2 == 0)
    if cls == 6:
        return (np.abs(u) <= 1.3) & (np.abs(v) <= 1.3) & (np.floor(u * period) % 2 == 0)
    if cls == 7:
        return np.abs(u) + np.abs(v) <= 1.05
    if cls == 8:
        arm = 0.22
        return ((np.abs(u - v) <= arm * 1.41) | (np.abs(u + v) <= arm * 1.41)) & (np.maximum(np.abs(u), np.abs(v)) <= 1.0)
    if cls == 9:
        return (
            (np.abs(u) <= 1.2) & (np.abs(v) <= 1.2)
            & ((np.floor(u * period) + np.floor(v * period)) % 2 == 0)
        )
    raise ValueError(f"unknown class {cls}")


def render(cls: int, rng: np.random.Generator, size: int = 32, channels: int = 3, style: str = "base") -> np.ndarray:
    """Render one image of class ``cls`` as a float array [C, size, size]."""
    ss = 2 * size
    coords = (np.arange(ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    scale = rng.uniform(0.22, 0.36)
    cx, cy = rng.uniform(0.5 - 0.15, 0.5 + 0.15, size=2)
    angle = rng.uniform(-0.35, 0.35)
    period = rng.uniform(1.6, 2.4)
    u = (xx - cx) / scale
    v = (yy - cy) / scale
    mask = _shape_mask(cls, u, v, scale, angle, period).astype(np.float64)

    if style == "base":
        fg = rng.uniform(0.55, 1.0, size=channels)
        bg0 = rng.uniform(0.0, 0.35, size=channels)
        bg1 = rng.uniform(0.0, 0.35, size=channels)
    elif style == "ood":
        # inverted contrast and saturated colours
        fg = rng.uniform(0.0, 0.3, size=channels)
        bg0 = rng.uniform(0.6, 1.0, size=channels)
        bg1 = rng.uniform(0.4, 1.0, size=channels)
    else:
        raise ValueError(f"unknown style {style!r}")
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)) + 0.5
    bg = bg0[:, None, None] * (1 - ramp) + bg1[:, None, None] * ramp
    img = bg * (1 - mask) + fg[:, None, None] * mask
    if style == "ood":
        freq = rng.uniform(10, 16)
        img = img + 0.12 * np.sin(2 * np.pi * freq * (xx + yy) / 2)[None]
    img = img.reshape(channels, size, 2, size, 2).mean(axis=(2, 4))
    return np.clip(img, 0.0, 1.0)


def make_dataset(n: int, seed: int, size: int = 32, channels: int = 3, style: str = "base",
                 num_classes: int = NUM_CLASSES) -> Dataset:
    """Balanced synthetic dataset of ``n`` images (labels cycle through classes, then shuffled)."""
    rng = seeded_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    imgs = np.stack([render(int(c), rng, size, channels, style) for c in labels]).astype(np.float32)
    return Dataset(torch.from_numpy(imgs), torch.from_numpy(labels.astype(np.int64)))


def label_permutation(seed: int, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """A derangement of the class indices (no class maps to itself)."""
    rng = seeded_rng(seed)
    while True:
        perm = rng.permutation(num_classes)
        if not np.any(perm == np.arange(num_classes)):
            return perm
