"""Strict YAML experiment configuration.

Every section maps onto a dataclass.  Keys are written in kebab-case in the
file and converted to field names; any key without a matching field is a
ConfigError that names its full path (``attack.itres``).
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional

import yaml

from .attacks import AttackConfig
from .core import config_hash
from .defenses import DefenseSpec

SWEEP_AXES = ("none", "defense", "batch-size", "q", "rounds", "method")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    n_train: int = 2000
    n_test: int = 500
    n_generator: int = 5000
    size: int = 32
    channels: int = 3
    style: str = "base"
    target_style: str = "base"
    # permute the generator's class indices relative to the FL task
    label_permutation: bool = False


@dataclass
class PartitionSection:
    num_clients: int = 10
    q: float = 0.1
    victim_client: int = 0


@dataclass
class GlobalModelSection:
    architecture: str = "convnet4"
    width: int = 32
    epochs: int = 0
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    rounds: int = 0
    clients_per_round: int = 5
    fl_lr: float = 0.1
    local_batch: int = 64
    local_steps: int = 5


@dataclass
class GeneratorSection:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-4
    latent_dim: int = 32
    base: int = 16
    embed_dim: int = 16
    disc_base: int = 32
    max_steps: Optional[int] = None
    mapper_epochs: int = 5


@dataclass
class RunnerSection:
    """Attack-runner knobs that sit next to the AttackConfig fields."""

    methods: List[str] = field(default_factory=lambda: ["gifd"])
    batch_size: int = 1
    num_records: int = 4
    capture_round: int = 0
    held_out: int = 4


@dataclass
class SweepSection:
    axis: str = "none"
    values: List[Any] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    global_model: GlobalModelSection = field(default_factory=GlobalModelSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    runner: RunnerSection = field(default_factory=RunnerSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output-dir": self.output_dir,
            "dataset": _kebab(dataclasses.asdict(self.dataset)),
            "partition": _kebab(dataclasses.asdict(self.partition)),
            "global-model": _kebab(dataclasses.asdict(self.global_model)),
            "generator": _kebab(dataclasses.asdict(self.generator)),
            "defense": _kebab(self.defense.to_dict()),
            "attack": {**_kebab(self.attack.to_dict()), **_kebab(dataclasses.asdict(self.runner))},
            "sweep": _kebab(dataclasses.asdict(self.sweep)),
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


def _kebab(d: dict) -> dict:
    return {k.replace("_", "-"): v for k, v in d.items()}


def _snake(key: str) -> str:
    return key.replace("-", "_")


def _build(cls, raw, path: str, extra_ok=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        name = _snake(str(key))
        if name not in names:
            if name in extra_ok:
                continue
            raise ConfigError(f"{path}.{key}: unknown key")
        kwargs[name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def parse_config(raw: dict) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    sections = {"dataset": DatasetSection, "partition": PartitionSection, "global-model": GlobalModelSection,
                "generator": GeneratorSection, "sweep": SweepSection}
    allowed = set(sections) | {"seed", "output-dir", "defense", "attack"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown key")
    kw = {}
    for key, cls in sections.items():
        kw[_snake(key)] = _build(cls, raw.get(key), key)
    kw["defense"] = _build(DefenseSpec, raw.get("defense"), "defense")
    runner_fields = {f.name for f in dataclasses.fields(RunnerSection)}
    attack_raw = raw.get("attack") or {}
    if not isinstance(attack_raw, dict):
        raise ConfigError("attack: expected a mapping")
    kw["attack"] = _build(AttackConfig, attack_raw, "attack", extra_ok=runner_fields)
    attack_fields = {f.name for f in dataclasses.fields(AttackConfig)}
    runner_raw = {k: v for k, v in attack_raw.items() if _snake(str(k)) not in attack_fields}
    kw["runner"] = _build(RunnerSection, runner_raw, "attack")
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            raise ConfigError(f"seed: expected a non-negative integer, got {raw['seed']!r}")
        kw["seed"] = raw["seed"]
    if "output-dir" in raw:
        kw["output_dir"] = str(raw["output-dir"])
    cfg = ExperimentConfig(**kw)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    if cfg.sweep.axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis: unknown axis {cfg.sweep.axis!r}; choose from {SWEEP_AXES}")
    if cfg.sweep.axis != "none" and not cfg.sweep.values:
        raise ConfigError("sweep.values: a sweep needs at least one value")
    if cfg.global_model.architecture not in ("linear", "mlp2", "convnet4"):
        raise ConfigError(f"global-model.architecture: unknown architecture {cfg.global_model.architecture!r}")
    for m in cfg.runner.methods:
        if m not in ("pixel", "latent", "gifd"):
            raise ConfigError(f"attack.methods: unknown method {m!r}")
    if not 0 <= cfg.partition.victim_client < cfg.partition.num_clients:
        raise ConfigError("partition.victim-client: outside [0, num-clients)")
    if cfg.dataset.style not in ("base", "ood") or cfg.dataset.target_style not in ("base", "ood"):
        raise ConfigError("dataset.style / dataset.target-style must be 'base' or 'ood'")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    return parse_config(raw)


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, output_dir: Optional[str] = None):
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if output_dir is not None:
        cfg = dataclasses.replace(cfg, output_dir=str(output_dir))
    return cfg


def sweep_point(cfg: ExperimentConfig, value) -> ExperimentConfig:
    """The config of one sweep point; the swept field replaces the base value."""
    axis = cfg.sweep.axis
    rep = dataclasses.replace
    if axis == "defense":
        spec = value if isinstance(value, dict) else {"kind": value}
        if set(spec) == {"kind"}:
            from .defenses import DEFENSE_PRESETS

            if spec["kind"] not in DEFENSE_PRESETS:
                raise ConfigError(f"sweep.values: unknown defense {spec['kind']!r}")
            d = DEFENSE_PRESETS[spec["kind"]]
        else:
            d = _build(DefenseSpec, spec, "sweep.values")
        return rep(cfg, defense=d)
    if axis == "batch-size":
        return rep(cfg, runner=rep(cfg.runner, batch_size=int(value)))
    if axis == "q":
        return rep(cfg, partition=rep(cfg.partition, q=float(value)))
    if axis == "rounds":
        return rep(cfg, runner=rep(cfg.runner, capture_round=int(value)),
                   global_model=rep(cfg.global_model, rounds=max(cfg.global_model.rounds, int(value))))
    if axis == "method":
        return rep(cfg, runner=rep(cfg.runner, methods=[str(value)]))
    return cfg


def point_name(axis: str, value) -> str:
    v = value.get("kind", "custom") if isinstance(value, dict) else value
    return f"{axis}={v}"
