"""Gradient inversion attack lab for federated learning at desk scale."""

__version__ = "0.1.0"

from .attacks import AttackConfig, ReconstructionReport, attack_gifd, attack_latent, attack_pixel, run_attack
from .core import Checkpoint, ImageBatch, load_checkpoint, save_checkpoint
from .defenses import DefenseSpec, apply_defense
from .flsim import FLRoundRecord, PartitionSpec, capture_round, fedavg_train, partition_dataset
from .gradmatch import infer_transform
from .labels import extract_single_label, infer_batch_labels, map_label
from .models import GeneratorStack, make_classifier, make_generator

__all__ = [
    "AttackConfig", "ReconstructionReport", "attack_gifd", "attack_latent", "attack_pixel", "run_attack",
    "Checkpoint", "ImageBatch", "load_checkpoint", "save_checkpoint", "DefenseSpec", "apply_defense",
    "FLRoundRecord", "PartitionSpec", "capture_round", "fedavg_train", "partition_dataset", "infer_transform",
    "extract_single_label", "infer_batch_labels", "map_label", "GeneratorStack", "make_classifier",
    "make_generator",
]
