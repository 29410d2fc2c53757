"""Run configuration: dataclasses, JSON round-trip, canonical hashing.

A run is fully described by one nested document.  Unknown keys are
rejected with their dotted path; loading materializes every default, so a
saved config always spells out the whole run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

VERSION = "0.1.0"


@dataclass
class WorldConfig:
    num_seen: int = 9
    num_unseen: int = 3
    feature_dim: int = 32
    input_dim: int | None = None
    height: int = 16
    width: int = 16
    region_count: int = 5
    noise_sigma: float = 0.1
    coherence: float = 1.0

    def validate(self, path="world"):
        if self.num_seen < 1 or self.num_unseen < 1:
            raise ConfigError(f"{path}: both split sizes must be >= 1")
        if self.feature_dim < 8:
            raise ConfigError(f"{path}.feature_dim: must be >= 8")
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"{path}: grid must be at least 8x8")
        if self.region_count < 2:
            raise ConfigError(f"{path}.region_count: must be >= 2")
        if self.noise_sigma < 0:
            raise ConfigError(f"{path}.noise_sigma: must be >= 0")
        if not (0.0 < self.coherence <= 1.0):
            raise ConfigError(f"{path}.coherence: must lie in (0, 1]")


@dataclass
class ModelConfig:
    widths: tuple[int, int] = (16, 16)

    def validate(self, path="model"):
        if len(self.widths) != 2 or any(w < 4 for w in self.widths):
            raise ConfigError(f"{path}.widths: need two widths >= 4")


@dataclass
class GlmConfig:
    temperature: float = 0.07
    bank_capacity: int = 24
    pooling: str = "attention"
    negatives_include_batch: bool = False

    def validate(self, path="glm"):
        if self.temperature <= 0:
            raise ConfigError(f"{path}.temperature: must be positive")
        if self.bank_capacity < 0:
            raise ConfigError(f"{path}.bank_capacity: must be >= 0")
        if self.pooling not in ("attention", "max", "mean"):
            raise ConfigError(f"{path}.pooling: unknown variant {self.pooling!r}")


@dataclass
class PlmConfig:
    fusion_threshold: float = 0.8
    scales: tuple[int, ...] = (3, 7)
    kmeans_max_iters: int = 10
    kmeans_distance: str = "cosine"
    vla_variant: str = "decoder"
    vla_hidden: int | None = None

    def validate(self, path="plm"):
        if not (0.0 < self.fusion_threshold <= 1.0):
            raise ConfigError(f"{path}.fusion_threshold: must lie in (0, 1]")
        if not self.scales or any(s < 1 for s in self.scales):
            raise ConfigError(f"{path}.scales: need positive window sizes")
        if self.kmeans_max_iters < 1:
            raise ConfigError(f"{path}.kmeans_max_iters: must be >= 1")
        if self.kmeans_distance not in ("cosine", "euclidean"):
            raise ConfigError(f"{path}.kmeans_distance: unknown {self.kmeans_distance!r}")
        if self.vla_variant not in ("decoder", "mlp", "raw"):
            raise ConfigError(f"{path}.vla_variant: unknown {self.vla_variant!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    iterations: int = 500
    use_focal_dice: bool = True  # focal + dice pixel losses
    use_ce: bool = True  # plain cross-entropy pixel loss
    use_cls_token: bool = True  # global contrastive loss
    use_generate: bool = True  # adapter regression loss
    gamma: float = 1.5  # inference offset for unseen logits
    bank_update_before_loss: bool = False
    checkpoint_every: int = 0  # 0 = final checkpoint only
    eval_scenes: int = 8

    def validate(self, path="train"):
        for name in ("learning_rate", "weight_decay", "beta1", "beta2", "eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{path}.{name}: must be >= 0")
        if self.learning_rate == 0 and False:  # zero lr is a legal no-op run
            pass
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size: must be >= 1")
        if self.iterations < 0:
            raise ConfigError(f"{path}.iterations: must be >= 0")
        if self.eval_scenes < 1:
            raise ConfigError(f"{path}.eval_scenes: must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError(f"{path}.checkpoint_every: must be >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    version: str = VERSION
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    glm: GlmConfig = field(default_factory=GlmConfig)
    plm: PlmConfig = field(default_factory=PlmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        if self.seed < 0:
            raise ConfigError("seed: must be >= 0")
        self.world.validate()
        self.model.validate()
        self.glm.validate()
        self.plm.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["model"]["widths"] = list(self.model.widths)
        doc["plm"]["scales"] = list(self.plm.scales)
        return doc

    def canonical_hash(self) -> str:
        """Hash of the resolved config, ignoring the output location."""
        doc = self.to_dict()
        doc.pop("out", None)
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {
    "world": WorldConfig,
    "model": ModelConfig,
    "glm": GlmConfig,
    "plm": PlmConfig,
    "train": TrainConfig,
}
_TUPLE_FIELDS = {("model", "widths"), ("plm", "scales")}


def _build_section(cls, doc: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key: {path}.{key}")
        if (path, key) in _TUPLE_FIELDS:
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig, rejecting unknown keys by dotted path."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    top_allowed = {"seed", "out", "version"} | set(_SECTIONS)
    kwargs = {}
    for key, value in doc.items():
        if key not in top_allowed:
            raise ConfigError(f"unknown config key: {key}")
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg.version = VERSION
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
