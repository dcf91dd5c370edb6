"""Run configuration: nested dataclasses, JSON round-trip and ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from hsi_fewshot.errors import ConfigError
from hsi_fewshot.objectives import ObjectiveConfig
from hsi_fewshot.sampling import SamplerConfig


@dataclass
class SceneRef:
    path: str = ""
    scene_id: str | None = None


@dataclass
class NetworkConfig:
    mapped_bands: int = 100
    heads: int = 8
    attention_layers: int = 2
    ffn_multiplier: int = 4
    disc_mode: str = "conditional"
    disc_hidden: int = 1024
    disc_dropout: float = 0.5
    grl_coefficient: float = 1.0


@dataclass
class TrainConfig:
    episodes: int = 10000
    learning_rate: float = 0.001
    checkpoint_every: int = 1000
    device: str = "cpu"

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EvalConfig:
    classifier: str = "prototype"  # or "nearest_support"
    batch_size: int = 1024
    palette: str | None = None

    def __post_init__(self):
        if self.classifier not in ("prototype", "nearest_support"):
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class RunConfig:
    source: SceneRef = field(default_factory=SceneRef)
    target: SceneRef = field(default_factory=SceneRef)
    seed: int = 0
    out: str = "runs/default"
    normalize: bool = True
    network: NetworkConfig = field(default_factory=NetworkConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        # the run seed is the only seed
        self.sampler.seed = self.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            return _build(cls, data, "")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, overrides) -> "RunConfig":
        data = self.to_dict()
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            set_dotted(data, key.strip(), parse_value(raw))
        return RunConfig.from_dict(data)


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{prefix}{name}.") if sub else value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "source"): SceneRef,
    (RunConfig, "target"): SceneRef,
    (RunConfig, "network"): NetworkConfig,
    (RunConfig, "sampler"): SamplerConfig,
    (RunConfig, "objective"): ObjectiveConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalConfig,
}


def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path) -> RunConfig:
    """Load a JSON config file or a shipped preset name (``ip``, ``pu``, ``sa``)."""
    p = Path(path)
    if p.is_file():
        text = p.read_text(encoding="utf-8")
    elif str(path) in preset_names():
        text = resources.files("hsi_fewshot.configs").joinpath(f"{path}.json").read_text(encoding="utf-8")
    else:
        raise ConfigError(f"config not found: {path}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("hsi_fewshot.configs").iterdir()
                  if p.name.endswith(".json"))
