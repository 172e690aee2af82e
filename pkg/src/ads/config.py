"""Model, training and data-generation configuration with named presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

SHARING_MODES = ("T2V", "V2T", "NONE")
BROADCAST_MODES = ("ALL_POSITIONS", "CLASS_TOKEN_ONLY")
VARIANTS = ("ADS", "NO_SHARING", "V2T", "NO_ADAPTERS", "LORA", "PROMPT")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class ModelConfig:
    L: int = 6
    K: int = 4
    m: int = 16
    patch_dim: int = 16
    n: int = 16
    vocab_size: int = 64
    d_v: int = 64
    d_t: int = 48
    d: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    adapter_dim: int = 8
    alpha: float = 0.005
    gamma: float = 0.5
    sharing: str = "T2V"
    f_broadcast: str = "ALL_POSITIONS"
    dtype: str = "float32"
    seed: int = 0
    lora_rank: int = 4
    prompt_len: int = 8
    train_projections: bool = True

    def validate(self) -> "ModelConfig":
        if not 1 <= self.K <= self.L:
            raise ConfigError(f"need 1 <= K <= L, got K={self.K}, L={self.L}")
        for name in ("m", "patch_dim", "n", "vocab_size", "d_v", "d_t", "d", "heads", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_v % self.heads or self.d_t % self.heads:
            raise ConfigError(f"d_v={self.d_v} and d_t={self.d_t} must be divisible by heads={self.heads}")
        if self.adapter_dim < 1:
            raise ConfigError("adapter_dim must be >= 1")
        if not (abs(self.alpha) < float("inf") and abs(self.gamma) < float("inf")):
            raise ConfigError("alpha and gamma must be finite")
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"sharing must be one of {SHARING_MODES}, got {self.sharing!r}")
        if self.f_broadcast not in BROADCAST_MODES:
            raise ConfigError(f"f_broadcast must be one of {BROADCAST_MODES}, got {self.f_broadcast!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.prompt_len < 0:
            raise ConfigError("prompt_len must be >= 0")
        return self

    @property
    def adapted_layers(self) -> range:
        """1-based indices of layers carrying adapters."""
        return range(self.K, self.L + 1)

    @property
    def queue_len(self) -> int:
        return self.L - self.K + 1

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw).validate()


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.0015
    seed: int = 0
    variant: str = "ADS"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        return self


@dataclass
class PretrainConfig:
    steps: int = 800
    batch_size: int = 32
    learning_rate: float = 1e-3
    temperature: float = 0.1
    pairs: int = 4000
    seed: int = 0

    def validate(self) -> "PretrainConfig":
        if self.steps < 0 or self.pairs < 2:
            raise ConfigError("pretrain steps must be >= 0 and pairs >= 2")
        if self.batch_size < 2:
            raise ConfigError("pretrain batch_size must be >= 2")
        if not (self.learning_rate > 0 and self.temperature > 0):
            raise ConfigError("pretrain learning_rate and temperature must be positive")
        return self


@dataclass
class GenSpec:
    regions: int = 4
    noise: float = 0.5
    bump: float = 1.0
    n_polar_tokens: int = 4
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    seed: int = 0
    m: int = 16
    n: int = 16
    patch_dim: int = 16
    vocab_size: int = 64

    def validate(self) -> "GenSpec":
        if self.regions < 1 or self.m % self.regions:
            raise ConfigError(f"regions={self.regions} must divide patch count m={self.m}")
        if self.regions > self.patch_dim:
            raise ConfigError("regions must not exceed patch_dim (one basis direction per region)")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be positive")
        if self.n < 2:
            raise ConfigError("need at least two token positions (polarity + key)")
        if self.vocab_size < 2 * self.n_polar_tokens + self.regions + 1:
            raise ConfigError("vocab_size too small for polarity, key and filler tokens")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: GenSpec = field(default_factory=GenSpec)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.pretrain.validate()
        self.data.validate()
        for name in ("m", "n", "patch_dim", "vocab_size"):
            if getattr(self.model, name) != getattr(self.data, name):
                raise ConfigError(f"model.{name} and data.{name} disagree")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def toy_model_config(**kw) -> ModelConfig:
    return ModelConfig(**kw).validate()


def paper_model_config(**kw) -> ModelConfig:
    """ViT-B/16-sized towers: 196 patches of 16x16x3, 77 tokens, 12 layers."""
    base = dict(L=12, K=7, m=196, patch_dim=768, n=77, vocab_size=49408,
                d_v=768, d_t=512, d=512, heads=8, mlp_ratio=4, adapter_dim=32,
                alpha=0.005, gamma=0.5)
    base.update(kw)
    return ModelConfig(**base).validate()


PRESETS = ("toy", "paper")


TOY_VOCAB = 32


def preset(name: str) -> RunConfig:
    if name == "toy":
        # Calibrated so the zero-initialised adapters escape the product saddle
        # within 20 epochs of plain SGD; see the README for the reasoning.
        model = ModelConfig(vocab_size=TOY_VOCAB, alpha=1.0, gamma=2.0)
        data = GenSpec(regions=2, n_train=4000, vocab_size=TOY_VOCAB)
        return RunConfig(model=model, data=data, train=TrainConfig(learning_rate=0.1)).validate()
    if name == "paper":
        m = paper_model_config()
        data = GenSpec(m=m.m, n=m.n, patch_dim=m.patch_dim, vocab_size=m.vocab_size)
        return RunConfig(model=m, data=data).validate()
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


def _section_from_dict(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key '{section}.{key}'")
    types = {f.name: f.type for f in fields(cls)}
    return {key: _coerce(value, types[key], f"{section}.{key}") for key, value in values.items()}


def _coerce(value, kind, where: str):
    # YAML reads "1e10" as a string and "3" as an int; fields know their type.
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if kind is float and not isinstance(value, bool):
        try:
            return float(value)
        except (TypeError, ValueError):
            pass
    elif kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    elif kind in (bool, str) and isinstance(value, kind):
        return value
    elif kind not in (int, float, bool, str):
        return value
    raise ConfigError(f"config key '{where}' expects {kind.__name__}, got {value!r}")


def run_config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from nested mappings; unknown keys are rejected."""
    raw = dict(raw or {})
    base = preset(raw.pop("preset", "toy"))
    sections = {"model": ModelConfig, "train": TrainConfig, "pretrain": PretrainConfig, "data": GenSpec}
    for key in raw:
        if key not in sections and key != "seeds":
            raise ConfigError(f"unknown config key '{key}'")
    out = {}
    for name, cls in sections.items():
        current = dataclasses.asdict(getattr(base, name))
        current.update(_section_from_dict(cls, raw.get(name) or {}, name))
        out[name] = cls(**current)
    seeds = list(raw.get("seeds", base.seeds))
    return RunConfig(seeds=seeds, **out).validate()
