"""Recovering private labels from shared gradients, and label mapping."""

import logging
from dataclasses import dataclass, field
from typing import List

import torch

from .core import GradientSet, ImageBatch

log = logging.getLogger(__name__)


@dataclass
class LabelEstimate:
    labels: List[int]
    method: str  # extracted-single | inferred-batch | mapped | given
    confidence_note: str = ""
    initial: List[int] = field(default_factory=list)

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.labels, dtype=torch.long)


def _fc_rows(g: GradientSet, fc_layer: str) -> torch.Tensor:
    if fc_layer not in g:
        raise KeyError(f"no fully-connected gradient named {fc_layer!r}")
    w = g[fc_layer]
    if w.dim() != 2:
        raise ValueError(f"{fc_layer} gradient must be a matrix, got shape {tuple(w.shape)}")
    return w.detach().double()


def extract_single_label_with_note(g: GradientSet, fc_layer: str = "fc.weight"):
    rows = _fc_rows(g, fc_layer)
    gram = rows @ rows.T
    off = gram.clone()
    off.fill_diagonal_(float("-inf"))
    candidates = [i for i in range(rows.shape[0]) if (off[i] <= 0).all() and rows[i].abs().sum() > 0]
    if len(candidates) == 1:
        return candidates[0], ""
    score = rows.sum(dim=1)
    bias_name = fc_layer.rsplit(".", 1)[0] + ".bias"
    if bias_name in g:
        score = score + g[bias_name].detach().double()
    idx = int(torch.argmin(score).item())
    note = f"low-confidence: {len(candidates)} rows satisfy the sign condition; fell back to argmin of row sums"
    log.warning(note)
    return idx, note


def extract_single_label(g: GradientSet, fc_layer: str = "fc.weight") -> int:
    """Label of a single-sample gradient: the FC row whose inner product with all other rows is <= 0."""
    return extract_single_label_with_note(g, fc_layer)[0]


def infer_batch_labels(g: GradientSet, batch_size: int, fc_layer: str = "fc.weight") -> LabelEstimate:
    """B distinct labels: the classes whose FC gradient row has the most negative entry."""
    rows = _fc_rows(g, fc_layer)
    num_classes = rows.shape[0]
    if batch_size > num_classes:
        raise ValueError(f"cannot infer {batch_size} distinct labels from {num_classes} classes")
    if batch_size == 1:
        idx, note = extract_single_label_with_note(g, fc_layer)
        return LabelEstimate([idx], "extracted-single", note)
    stat = rows.min(dim=1).values
    # stable sort so ties resolve to the lowest class index
    order = torch.sort(stat, stable=True).indices[:batch_size]
    labels = sorted(int(i) for i in order)
    note = "heuristic: assumes no duplicate labels in the batch"
    return LabelEstimate(labels, "inferred-batch", note)


def map_label(coarse: ImageBatch, f_m) -> LabelEstimate:
    """Re-label a coarse reconstruction with a classifier trained on the generator's data."""
    x = coarse.pixels if isinstance(coarse, ImageBatch) else coarse
    with torch.no_grad():
        logits = f_m(x)
    return LabelEstimate([int(i) for i in logits.argmax(dim=1)], "mapped")
