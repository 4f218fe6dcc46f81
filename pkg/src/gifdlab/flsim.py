"""Federated learning simulation: partitions, FedAvg rounds and attacker observations."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .core import (Checkpoint, GradientSet, ImageBatch, derive_seed, gradients_to_checkpoint, load_checkpoint,
                   save_checkpoint, seeded_rng)
from .data import Dataset
from .defenses import DefenseSpec, apply_defense
from .models import Classifier, checkpoint_from_model, classifier_from_checkpoint, loss_and_gradients


class UniqueLabelError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int = 10
    q: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 2:
            raise ValueError(f"need at least 2 clients, got {self.num_clients}")
        lo = 1 / self.num_clients
        if not (lo - 1e-12 <= self.q <= 1 + 1e-12):
            raise ValueError(f"q must lie in [1/N_client, 1] = [{lo:.4f}, 1], got {self.q}")


def home_clients(num_classes: int, num_clients: int, seed: int) -> np.ndarray:
    """Class -> home client via a seeded permutation of classes dealt round-robin over clients."""
    perm = seeded_rng(derive_seed(seed, "home-clients")).permutation(num_classes)
    home = np.empty(num_classes, dtype=np.int64)
    home[perm] = np.arange(num_classes) % num_clients
    return home


def partition_indices(labels: Sequence[int], spec: PartitionSpec) -> List[np.ndarray]:
    """Send each sample to its class's home client with probability q, else uniformly to another client."""
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = int(labels.max()) + 1 if labels.size else 0
    home = home_clients(n_cls, spec.num_clients, spec.seed)
    rng = seeded_rng(derive_seed(spec.seed, "partition"))
    u = rng.random(labels.size)
    other = rng.integers(0, spec.num_clients - 1, size=labels.size)
    h = home[labels]
    # map other in [0, N-2] onto clients != home
    alt = other + (other >= h)
    owner = np.where(u < spec.q, h, alt)
    return [np.flatnonzero(owner == c) for c in range(spec.num_clients)]


def partition_dataset(dataset: Dataset, spec: PartitionSpec) -> List[Dataset]:
    return [dataset.subset(idx) for idx in partition_indices(dataset.labels.numpy(), spec)]


# ---------------------------------------------------------------------------


def client_local_gradients(model: Classifier, batch: ImageBatch) -> GradientSet:
    """Batch-averaged cross-entropy gradient of one local step."""
    _, grads = loss_and_gradients(model, batch.pixels, batch.labels)
    return grads


def fedavg_train(model: Classifier, clients: Sequence[Dataset], rounds: int, clients_per_round: int, lr: float,
                 seed: int, local_batch: Optional[int] = 64, history: Optional[list] = None,
                 start_round: int = 0, local_steps: int = 1) -> List[Checkpoint]:
    """Uniform FedAvg with ``local_steps`` local SGD steps per selected client.

    Returns R + 1 checkpoints; entry r is the global model after ``start_round + r``
    aggregations.  The passed model is updated in place.  Every round draws its
    randomness from ``(seed, round)`` alone, so resuming from the checkpoint of
    round k with ``start_round=k`` continues the uninterrupted trajectory exactly.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if local_steps < 1:
        raise ValueError("local_steps must be >= 1")
    active = [i for i, c in enumerate(clients) if len(c) > 0]
    if clients_per_round < 1 or not active:
        raise ValueError("empty client selection")
    ckpts = [checkpoint_from_model(model, {"round": str(start_round)})]
    for r in range(start_round + 1, start_round + rounds + 1):
        rng = seeded_rng(derive_seed(seed, "fedavg", r))
        chosen = rng.choice(active, size=min(clients_per_round, len(active)), replace=False)
        start = {n: p.detach().clone() for n, p in model.named_parameters()}
        acc = {n: torch.zeros_like(p) for n, p in start.items()}
        losses = []
        for c in sorted(int(i) for i in chosen):
            data = clients[c]
            with torch.no_grad():
                for n, p in model.named_parameters():
                    p.copy_(start[n])
            for _ in range(local_steps):
                if local_batch is None or local_batch >= len(data):
                    idx = np.arange(len(data))
                else:
                    idx = rng.choice(len(data), size=local_batch, replace=False)
                loss, grads = loss_and_gradients(model, data.images[idx], data.labels[idx])
                losses.append(loss.item())
                with torch.no_grad():
                    for n, p in model.named_parameters():
                        p.sub_(lr * grads[n])
            with torch.no_grad():
                for n, p in model.named_parameters():
                    acc[n] += p
        with torch.no_grad():
            for n, p in model.named_parameters():
                p.copy_(acc[n] / len(chosen))
        if history is not None:
            history.append((r, float(np.mean(losses))))
        ckpts.append(checkpoint_from_model(model, {"round": str(r)}))
    return ckpts


@dataclass
class FLRoundRecord:
    round_index: int
    global_params: Checkpoint
    victim_batch: ImageBatch
    shared_gradients: GradientSet
    defense: Optional[DefenseSpec] = None
    seeds: dict = field(default_factory=dict)
    _model: Optional[Classifier] = field(default=None, repr=False, compare=False)

    @property
    def batch_size(self) -> int:
        return len(self.victim_batch)

    def global_model(self) -> Classifier:
        if self._model is None:
            self._model = classifier_from_checkpoint(self.global_params)
            self._model.eval()
        return self._model

    def save(self, directory) -> Path:
        from .bench import save_png

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.global_params, d / "global.glns")
        save_checkpoint(gradients_to_checkpoint(self.shared_gradients), d / "gradients.glns")
        save_checkpoint(Checkpoint(tensors={"pixels": self.victim_batch.pixels,
                                            "labels": self.victim_batch.labels.float()}), d / "truth.glns")
        save_png(self.victim_batch.pixels, d / "truth.png")
        manifest = {
            "round-index": self.round_index,
            "batch-size": self.batch_size,
            "defense": self.defense.to_dict() if self.defense else None,
            "seeds": self.seeds,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "FLRoundRecord":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        truth = load_checkpoint(d / "truth.glns").tensors
        grads = load_checkpoint(d / "gradients.glns").tensors
        defense = DefenseSpec.from_dict(manifest["defense"]) if manifest.get("defense") else None
        return cls(manifest["round-index"], load_checkpoint(d / "global.glns"),
                   ImageBatch(truth["pixels"], truth["labels"].long()), dict(grads), defense, manifest.get("seeds", {}))


def draw_batch(data: Dataset, batch_size: int, seed: int, unique_labels: bool = False) -> np.ndarray:
    if len(data) < batch_size:
        raise ValueError(f"victim client holds {len(data)} samples, fewer than B={batch_size}")
    rng = seeded_rng(seed)
    if not unique_labels:
        return rng.choice(len(data), size=batch_size, replace=False)
    labels = data.labels.numpy()
    classes = np.unique(labels)
    if len(classes) < batch_size:
        raise UniqueLabelError(f"cannot draw {batch_size} distinct labels: client has only {len(classes)} classes")
    picked = rng.choice(classes, size=batch_size, replace=False)
    return np.array([rng.choice(np.flatnonzero(labels == c)) for c in picked])


def capture_round(global_params: Checkpoint, victim: Dataset, batch_size: int, defense: Optional[DefenseSpec] = None,
                  seed: int = 0, unique_labels: Optional[bool] = None, round_index: Optional[int] = None) -> FLRoundRecord:
    """Draw the victim's batch, compute its local gradient and apply the client's defense."""
    if unique_labels is None:
        unique_labels = batch_size > 1
    idx = draw_batch(victim, batch_size, derive_seed(seed, "victim-batch"), unique_labels)
    batch = victim.batch(idx)
    model = classifier_from_checkpoint(global_params)
    model.eval()
    raw = client_local_gradients(model, batch)
    shared = apply_defense(defense, raw, model, batch)
    if round_index is None:
        round_index = int(global_params.metadata.get("round", 0))
    rec = FLRoundRecord(round_index, global_params, batch, shared, defense,
                        {"capture": int(seed), "batch-indices": [int(i) for i in idx]})
    rec._model = model
    return rec
