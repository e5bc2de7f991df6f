"""Model and training configuration, profiles, and config-file parsing."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

try:  # pragma: no cover - depends on interpreter version
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

VARIANTS = ("full", "att", "ctx", "mean")
FUSIONS = ("joint", "separate")
REGULARIZERS = ("signed", "squared")
OPTIMIZERS = ("adam", "momentum")


class ConfigError(ValueError):
    """Configuration is malformed or internally inconsistent."""


@dataclass
class TrainingConfig:
    """Every knob of a run. Defaults are the reference (paper-scale) values.

    ``attention_width`` and ``similarity_width`` fall back to ``hidden`` and
    ``score_hidden`` falls back to ``hidden`` when left at 0.
    """

    # model dimensions
    num_regions: int = 196          # I
    grid_rows: int = 14
    grid_cols: int = 14
    max_words: int = 50             # J
    region_dim: int = 512           # F
    word_dim: int = 1024            # G, twice the BLSTM hidden size
    image_context_dim: int = 4096   # D
    sentence_context_dim: int = 1024  # E
    hidden: int = 1024              # H
    attention_width: int = 0        # A
    similarity_width: int = 0       # S
    score_hidden: int = 0           # H'
    embed_dim: int = 128
    vocab_size: int = 0             # filled from the vocabulary when 0

    # model behaviour
    timesteps: int = 3              # T
    variant: str = "full"
    attention_fusion: str = "joint"
    init_scale: float = 0.08

    # objective
    margin: float = 0.2
    lam: float = 100.0
    regularizer: str = "signed"
    negatives: int = 100

    # optimisation
    optimizer: str = "adam"
    lr: float = 2e-4
    lr_decay_steps: int = 0         # cosine decay horizon; 0 = constant lr
    lr_floor: float = 0.1           # final lr as a fraction of lr
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    clip_norm: float = 5.0
    batch_size: int = 32
    max_epochs: int = 10
    max_steps: int = 0              # 0 = no step cap
    eval_every: int = 1             # epochs between validation passes
    seed: int = 0

    def __post_init__(self):
        if self.attention_width == 0:
            self.attention_width = self.hidden
        if self.similarity_width == 0:
            self.similarity_width = self.hidden
        if self.score_hidden == 0:
            self.score_hidden = self.hidden

    @property
    def blstm_hidden(self) -> int:
        return self.word_dim // 2

    def validate(self) -> "TrainingConfig":
        positive = (
            "num_regions grid_rows grid_cols max_words region_dim word_dim image_context_dim "
            "sentence_context_dim hidden attention_width similarity_width score_hidden embed_dim "
            "timesteps batch_size"
        ).split()
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.grid_rows * self.grid_cols != self.num_regions:
            raise ConfigError(
                f"grid_rows*grid_cols = {self.grid_rows * self.grid_cols} != num_regions {self.num_regions}"
            )
        if self.word_dim % 2:
            raise ConfigError(f"word_dim must be even (two BLSTM directions), got {self.word_dim}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.attention_fusion not in FUSIONS:
            raise ConfigError(f"attention_fusion must be one of {FUSIONS}, got {self.attention_fusion!r}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.negatives < 1:
            raise ConfigError(f"negatives must be >= 1, got {self.negatives}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.lr_decay_steps < 0 or not 0.0 <= self.lr_floor <= 1.0:
            raise ConfigError("lr_decay_steps must be >= 0 and lr_floor in [0, 1]")
        if self.max_epochs < 0 or self.max_steps < 0:
            raise ConfigError("max_epochs and max_steps must be >= 0")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainingConfig":
        return from_mapping({**self.to_dict(), **changes})


def from_mapping(values: Mapping[str, Any]) -> TrainingConfig:
    """Build a config, rejecting unknown keys and coercing value types."""
    known = {f.name: f for f in fields(TrainingConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        kwargs[key] = _coerce(key, known[key].type, value)
    return TrainingConfig(**kwargs)


def _coerce(key: str, type_name, value):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if type_name == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type_name}") from None


def reference_profile(**overrides) -> TrainingConfig:
    """Paper-scale dimensions (I=196, J=50, F=512, G=1024, D=4096, E=1024, H=1024)."""
    return from_mapping(overrides).validate()


def desk_profile(**overrides) -> TrainingConfig:
    """Small dimensions that train on the synthetic task in seconds."""
    base = dict(
        num_regions=16, grid_rows=4, grid_cols=4, max_words=12,
        region_dim=64, word_dim=64, image_context_dim=16, sentence_context_dim=16,
        hidden=32, attention_width=32, similarity_width=32, score_hidden=32, embed_dim=32,
        batch_size=32, lr=1e-2, lr_decay_steps=2000, max_epochs=1000, max_steps=0, eval_every=50,
    )
    base.update(overrides)
    return from_mapping(base).validate()


def tiny_profile(**overrides) -> TrainingConfig:
    """Gradient-check scale: I=4, J=3, F=G=8, H=A=S=8, T=2, batch 3."""
    base = dict(
        num_regions=4, grid_rows=2, grid_cols=2, max_words=3,
        region_dim=8, word_dim=8, image_context_dim=6, sentence_context_dim=6,
        hidden=8, attention_width=8, similarity_width=8, score_hidden=8, embed_dim=5,
        vocab_size=7, timesteps=2, batch_size=3, negatives=2, lam=1.0,
    )
    base.update(overrides)
    return from_mapping(base).validate()


PROFILES = {"reference": reference_profile, "desk": desk_profile, "tiny": tiny_profile}


def flatten_sections(doc: Mapping[str, Any], section_keys=("model", "objective", "training", "data", "run")) -> Dict[str, Any]:
    """Merge TOML sections into one flat dict; nested tables other than the
    known section names are an error."""
    flat: Dict[str, Any] = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in section_keys:
                raise ConfigError(f"unknown config section [{key}]")
            for k, v in value.items():
                if isinstance(v, dict):
                    raise ConfigError(f"nested table [{key}.{k}] not supported")
                if k in flat:
                    raise ConfigError(f"duplicate key {k!r} in section [{key}]")
                flat[k] = v
        else:
            if key in flat:
                raise ConfigError(f"duplicate key {key!r}")
            flat[key] = value
    return flat


def read_config_file(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return flatten_sections(doc)


@dataclass
class RunConfig:
    """A training config plus the data/output locations of one command."""

    training: TrainingConfig
    manifest: Optional[str] = None
    vocab: Optional[str] = None
    output: Optional[str] = None
    profile: str = "desk"
    extra: Dict[str, Any] = field(default_factory=dict)


RUN_KEYS = ("manifest", "vocab", "output", "profile")


def build_run_config(file_values: Mapping[str, Any], cli_values: Mapping[str, Any]) -> RunConfig:
    """Resolve precedence CLI > file > profile defaults, then validate."""
    merged = {**file_values, **{k: v for k, v in cli_values.items() if v is not None}}
    run = {k: merged.pop(k) for k in RUN_KEYS if k in merged}
    profile = str(run.get("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    known = {f.name for f in fields(TrainingConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    training = PROFILES[profile](**merged)
    return RunConfig(
        training=training,
        manifest=run.get("manifest"),
        vocab=run.get("vocab"),
        output=run.get("output"),
        profile=profile,
    )
