"""Client-side gradient perturbation defenses."""

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch

from .core import GradientSet, ImageBatch, torch_generator

KINDS = ("none", "noise", "clip", "sparsify", "soteria")

_REQUIRED = {
    "none": (),
    "noise": ("noise_std",),
    "clip": ("clip_bound",),
    "sparsify": ("prune_rate",),
    "soteria": ("soteria_rate",),
}


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    noise_std: Optional[float] = None
    clip_bound: Optional[float] = None
    prune_rate: Optional[float] = None
    soteria_rate: Optional[float] = None
    defended_layer: str = "fc.weight"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}; choose from {KINDS}")
        for name in _REQUIRED[self.kind]:
            if getattr(self, name) is None:
                raise ValueError(f"defense {self.kind!r} requires {name}")
        if self.kind == "noise" and self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.kind == "clip" and self.clip_bound <= 0:
            raise ValueError("clip_bound must be > 0")
        if self.kind == "sparsify" and not 0 < self.prune_rate < 1:
            raise ValueError("prune_rate must lie in (0, 1)")
        if self.kind == "soteria" and not 0 < self.soteria_rate < 1:
            raise ValueError("soteria_rate must lie in (0, 1)")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown defense keys: {sorted(unknown)}")
        return cls(**d)


# settings used for the strict-defense experiments
DEFENSE_PRESETS = {
    "none": DefenseSpec("none"),
    "noise": DefenseSpec("noise", noise_std=0.1),
    "clip": DefenseSpec("clip", clip_bound=4.0),
    "sparsify": DefenseSpec("sparsify", prune_rate=0.9),
    "soteria": DefenseSpec("soteria", soteria_rate=0.8),
}


def apply_noise(g: GradientSet, std: float, seed: int) -> GradientSet:
    if std < 0:
        raise ValueError("std must be >= 0")
    if std == 0:
        return {k: v.clone() for k, v in g.items()}
    gen = torch_generator(seed)
    return {k: v + std * torch.randn(v.shape, generator=gen, dtype=v.dtype) for k, v in g.items()}


def apply_clipping(g: GradientSet, bound: float) -> GradientSet:
    """Layer-wise g * min(c / ||g||, 1)."""
    if bound <= 0:
        raise ValueError("clip bound must be > 0")
    out = {}
    for k, v in g.items():
        norm = v.norm().item()
        out[k] = v * (bound / norm) if norm > bound else v.clone()
    return out


def topk_mask(v: torch.Tensor, keep: int) -> torch.Tensor:
    """Boolean mask of the ``keep`` largest |v| entries; ties go to the lower flat index."""
    flat = v.reshape(-1).abs()
    # stable descending sort keeps first-index order among equal magnitudes
    order = torch.sort(flat, descending=True, stable=True).indices
    mask = torch.zeros(flat.numel(), dtype=torch.bool)
    mask[order[:keep]] = True
    return mask.view(v.shape)


def apply_sparsification(g: GradientSet, prune_rate: float) -> GradientSet:
    """Keep ceil((1 - p) * n) largest-magnitude entries of each layer, zero the rest."""
    if not 0 < prune_rate < 1:
        raise ValueError("prune_rate must lie in (0, 1)")
    out = {}
    for k, v in g.items():
        keep = math.ceil((1 - prune_rate) * v.numel() - 1e-9)
        out[k] = torch.where(topk_mask(v, keep), v, torch.zeros_like(v))
    return out


def soteria_scores(model, batch: ImageBatch) -> torch.Tensor:
    """Per-feature leakage score |r_j| * ||d r_j / d x|| summed over the batch.

    r is the representation entering the fully-connected head.
    """
    x = batch.pixels.detach().clone().requires_grad_(True)
    r = model.representation(x)
    scores = torch.zeros(r.shape[1])
    for j in range(r.shape[1]):
        (dx,) = torch.autograd.grad(r[:, j].sum(), x, retain_graph=True)
        per_sample = dx.flatten(1).norm(dim=1)
        scores[j] = (r[:, j].detach().abs() * per_sample).sum()
    return scores


def soteria_mask(model, batch: ImageBatch, rate: float) -> torch.Tensor:
    """Boolean keep-mask over the representation features (True = transmitted)."""
    scores = soteria_scores(model, batch)
    n = scores.numel()
    pruned = n - math.ceil((1 - rate) * n - 1e-9)
    # prune the highest-scoring features
    order = torch.sort(scores, descending=True, stable=True).indices
    keep = torch.ones(n, dtype=torch.bool)
    keep[order[:pruned]] = False
    return keep


def apply_soteria(g: GradientSet, model, batch: ImageBatch, rate: float, defended_layer: str = "fc.weight") -> GradientSet:
    if defended_layer not in g:
        raise KeyError(f"unknown defended layer {defended_layer!r}; available: {list(g)}")
    if not 0 < rate < 1:
        raise ValueError("soteria rate must lie in (0, 1)")
    keep = soteria_mask(model, batch, rate)
    w = g[defended_layer]
    if w.dim() != 2 or w.shape[1] != keep.numel():
        raise ValueError(f"defended layer {defended_layer!r} of shape {tuple(w.shape)} does not consume the representation")
    out = {k: v.clone() for k, v in g.items()}
    out[defended_layer] = w * keep[None, :].to(w.dtype)
    return out


def apply_defense(spec: Optional[DefenseSpec], g: GradientSet, model=None, batch: Optional[ImageBatch] = None) -> GradientSet:
    if spec is None or spec.kind == "none":
        return {k: v.clone() for k, v in g.items()}
    if spec.kind == "noise":
        return apply_noise(g, spec.noise_std, spec.seed)
    if spec.kind == "clip":
        return apply_clipping(g, spec.clip_bound)
    if spec.kind == "sparsify":
        return apply_sparsification(g, spec.prune_rate)
    if model is None or batch is None:
        raise ValueError("soteria needs the model and the private batch")
    return apply_soteria(g, model, batch, spec.soteria_rate, spec.defended_layer)
