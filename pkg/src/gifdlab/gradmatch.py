"""Attack objective: gradient distances, image priors and defense replay."""

import logging
from dataclasses import dataclass, field
from typing import Dict

import torch

from .core import GradientSet, ImageBatch
from .models import loss_and_gradients

log = logging.getLogger(__name__)

DISTANCES = ("neg-cosine", "l2")


@dataclass
class InferredTransform:
    kind: str = "identity"  # identity | clip | sparsify | soteria
    clip_bounds: Dict[str, float] = field(default_factory=dict)
    masks: Dict[str, torch.Tensor] = field(default_factory=dict)

    def describe(self) -> str:
        if self.kind == "clip":
            return f"clip({len(self.clip_bounds)} layers)"
        if self.kind in ("sparsify", "soteria"):
            return f"{self.kind}({', '.join(self.masks)})"
        return "identity"


@dataclass
class MatchObjective:
    distance: str = "neg-cosine"
    alpha_tv: float = 1e-4
    alpha_l2: float = 1e-6
    transform: InferredTransform = field(default_factory=InferredTransform)
    layer_weighted: bool = False

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ValueError(f"unknown distance {self.distance!r}; choose from {DISTANCES}")
        if self.alpha_tv < 0 or self.alpha_l2 < 0:
            raise ValueError("regulariser weights must be non-negative")


def _check_match(a: GradientSet, b: GradientSet):
    if list(a) != list(b):
        raise ValueError(f"gradient leaves differ: {list(a)} vs {list(b)}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(a[k].shape)} vs {tuple(b[k].shape)}")


def grad_distance(a: GradientSet, b: GradientSet, metric: str = "neg-cosine", layer_weighted: bool = False) -> torch.Tensor:
    """Distance between two gradient sets.

    ``neg-cosine`` is 1 - cos over the concatenation of all leaves (or the mean of
    per-leaf values with ``layer_weighted``); ``l2`` is the squared euclidean norm
    of the difference.  A zero-norm side under neg-cosine yields distance 1.
    """
    _check_match(a, b)
    if metric == "l2":
        return sum(((a[k] - b[k]) ** 2).sum() for k in a)
    if metric != "neg-cosine":
        raise ValueError(f"unknown distance {metric!r}")
    if layer_weighted:
        per = [_cosine_distance(a[k].reshape(-1), b[k].reshape(-1)) for k in a]
        return torch.stack(per).mean()
    va = torch.cat([a[k].reshape(-1) for k in a])
    vb = torch.cat([b[k].reshape(-1) for k in b])
    return _cosine_distance(va, vb)


def _cosine_distance(va, vb):
    na2 = (va * va).sum()
    nb2 = (vb * vb).sum()
    if na2.item() == 0 or nb2.item() == 0:
        log.warning("zero-norm gradient under neg-cosine distance; returning 1")
        return (va * vb).sum() * 0 + 1.0
    return 1 - (va * vb).sum() / (na2.sqrt() * nb2.sqrt())


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: sum of |horizontal| and |vertical| neighbour differences."""
    dx = (x[..., :, 1:] - x[..., :, :-1]).abs().sum()
    dy = (x[..., 1:, :] - x[..., :-1, :]).abs().sum()
    return dx + dy


def fidelity_reg(x, alpha_tv: float = 1e-4, alpha_l2: float = 1e-6) -> torch.Tensor:
    px = x.pixels if isinstance(x, ImageBatch) else x
    return alpha_l2 * (px ** 2).sum() + alpha_tv * total_variation(px)


# ---------------------------------------------------------------------------
# defense inference


def infer_transform(g: GradientSet, zero_threshold: float = 0.3, soteria_threshold: float = 0.6,
                    clip_rtol: float = 1e-4, fc_layer: str = "fc.weight") -> InferredTransform:
    """Guess which of clip / sparsify / soteria produced the received gradients.

    * sparsify: every leaf has a fraction of exact zeros above ``zero_threshold``
      (per-layer top-k leaves every layer sparse); masks are the non-zero
      supports of every leaf.
    * soteria: otherwise, the fully-connected weight alone is sparse (zero
      fraction above ``soteria_threshold``); its support becomes the mask.
    * clip: at least two leaves whose norm equals the max leaf norm (relative
      tolerance ``clip_rtol``); bounds are the observed per-leaf norms.

    Dead ReLU units zero out whole rows of an undefended gradient, so a single
    sparse leaf (or a moderate overall zero count) is not taken as a signature.
    """
    norms = {k: v.norm().item() for k, v in g.items()}
    frac = {k: (v == 0).sum().item() / max(v.numel(), 1) for k, v in g.items()}

    if frac and min(frac.values()) > zero_threshold:
        return InferredTransform("sparsify", masks={k: v != 0 for k, v in g.items()})
    if fc_layer in g and frac[fc_layer] > soteria_threshold:
        return InferredTransform("soteria", masks={fc_layer: g[fc_layer] != 0})

    top = max(norms.values(), default=0.0)
    if top > 0:
        binding = [k for k, n in norms.items() if abs(n - top) <= clip_rtol * top]
        if len(binding) >= 2:
            return InferredTransform("clip", clip_bounds=dict(norms))
    return InferredTransform()


def apply_inferred(t: InferredTransform, g: GradientSet) -> GradientSet:
    """Replay an inferred defense on (differentiable) dummy gradients."""
    if t.kind == "identity":
        return g
    out = dict(g)
    if t.kind == "clip":
        for k, c in t.clip_bounds.items():
            if k not in g:
                raise ValueError(f"clip bound for unknown leaf {k!r}")
            n = g[k].norm()
            if n.item() > c:
                out[k] = g[k] * (c / n)
        return out
    for k, m in t.masks.items():
        if k not in g:
            raise ValueError(f"mask for unknown leaf {k!r}")
        if m.shape != g[k].shape:
            raise ValueError(f"mask shape {tuple(m.shape)} does not match gradient {k} {tuple(g[k].shape)}")
        out[k] = g[k] * m.to(g[k].dtype)
    return out


def matching_loss(x: torch.Tensor, labels, model, observed: GradientSet, obj: MatchObjective) -> torch.Tensor:
    """D(T(F(x)), g) without the fidelity prior."""
    _, dummy = loss_and_gradients(model, x, labels, create_graph=True)
    return grad_distance(apply_inferred(obj.transform, dummy), observed, obj.distance, obj.layer_weighted)


def attack_loss(x, labels, model, observed: GradientSet, obj: MatchObjective, return_parts: bool = False):
    """Gradient matching loss plus fidelity regularisation."""
    px = x.pixels if isinstance(x, ImageBatch) else x
    match = matching_loss(px, labels, model, observed, obj)
    total = match
    if obj.alpha_tv or obj.alpha_l2:
        total = match + fidelity_reg(px, obj.alpha_tv, obj.alpha_l2)
    if return_parts:
        return total, match
    return total
