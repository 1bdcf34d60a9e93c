"""Run configuration: nested dataclasses, named profiles, YAML/JSON overlay.

Config file keys (all optional, overlaid on the chosen profile)::

    seed: int
    output_dir: str
    device: str                      # "cpu", "cuda", ...
    model:  {stages, channels, window_size, num_heads, ffn_expansion,
             paradigm: AF|FA, use_sam, use_cfm, use_dcm}
    optim:  {lr_init, lr_final, schedule: cosine, batch, epochs, patch,
             betas: [b1, b2], eps, weight_decay}
    data:   {train_manifest, test_manifest, val_fraction, patches_per_scene,
             augment, synthetic: {count, size, noise, offset, seed} | null}
    loss:   {eta, perceptual_enabled, perceptual_layers, perceptual_pretrained}
    train:  {val_every, checkpoint_every, hdr_scale}
"""
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .metrics import LossConfig
from .model import ModelConfig

__all__ = [
    "ConfigError",
    "OptimConfig",
    "SyntheticDataConfig",
    "DataConfig",
    "TrainConfig",
    "RunConfig",
    "PROFILES",
    "profile_config",
    "load_config",
    "merge",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr_init: float = 5e-4
    lr_final: float = 5e-6
    schedule: str = "cosine"
    batch: int = 6
    epochs: int = 400
    patch: int = 128
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (self.lr_init >= self.lr_final > 0):
            raise ConfigError(f"need lr_init >= lr_final > 0, got {self.lr_init}, {self.lr_final}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch < 1 or self.patch < 1:
            raise ConfigError("batch and patch must be positive")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass(frozen=True)
class SyntheticDataConfig:
    count: int = 2
    size: int = 64
    noise: float = 0.0
    offset: int = 0
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    train_manifest: str = None
    test_manifest: str = None
    val_fraction: float = 0.1
    patches_per_scene: int = 1
    augment: bool = True
    synthetic: SyntheticDataConfig = None


@dataclass(frozen=True)
class TrainConfig:
    val_every: int = 1
    checkpoint_every: int = 1
    hdr_scale: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    output_dir: str = "runs"
    device: str = "cpu"

    def to_dict(self):
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return clean(asdict(self))

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "config")


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "optim"): OptimConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "train"): TrainConfig,
    (DataConfig, "synthetic"): SyntheticDataConfig,
}


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        if sub is not None and v is not None and not is_dataclass(v):
            v = _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def merge(base: dict, overlay: dict) -> dict:
    out = dict(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


PROFILES = {
    "paper": RunConfig(),
    "desk": RunConfig(
        model=ModelConfig(stages=2, channels=16, window_size=8, num_heads=4),
        optim=OptimConfig(batch=2, epochs=2000, patch=64),
        data=DataConfig(augment=False, synthetic=SyntheticDataConfig(count=2, size=64)),
        train=TrainConfig(val_every=100, checkpoint_every=100),
    ),
}


def profile_config(name="paper") -> RunConfig:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def load_config(path=None, profile="paper", overrides=None) -> RunConfig:
    """Profile defaults, then the config file, then explicit overrides."""
    d = profile_config(profile).to_dict()
    if path is not None:
        text = Path(path).read_text()
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        d = merge(d, loaded)
    if overrides:
        d = merge(d, overrides)
    return RunConfig.from_dict(d)


def with_model(config: RunConfig, **changes) -> RunConfig:
    return replace(config, model=replace(config.model, **changes))
