"""Run configuration: a YAML (or JSON) document mapped onto nested dataclasses.

Unknown keys anywhere in the document are rejected. See README.md for the
full key list; every key is optional and falls back to the defaults below.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .active import QueryStrategy
from .autoencoder import SaeHyper
from .data import SplitSpec, SynthConfig
from .emap import EmapConfig
from .network import BranchConfig, FinetuneConfig
from .transfer import TransferConfig


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    cube: str | None = None
    labels: str | None = None


@dataclass
class NetworkConfig:
    spectral_hidden: list[int] = field(default_factory=lambda: [200, 150])
    spatial_hidden: list[int] = field(default_factory=lambda: [200, 150])
    fusion_hidden: list[int] = field(default_factory=lambda: [400, 200])
    sae: SaeHyper = field(default_factory=SaeHyper)
    spectral_sae: SaeHyper | None = None
    spatial_sae: SaeHyper | None = None
    fusion_sae: SaeHyper | None = None

    def branch_config(self) -> BranchConfig:
        return BranchConfig(
            list(self.spectral_hidden), list(self.spatial_hidden), list(self.fusion_hidden),
            self.spectral_sae or self.sae, self.spatial_sae or self.sae, self.fusion_sae or self.sae,
        )


@dataclass
class ActiveConfig:
    strategy: str = "mclu"
    batch_size: int = 50
    iterations: int = 26

    def query(self) -> QueryStrategy:
        return QueryStrategy(self.strategy, self.batch_size)


@dataclass
class TransferSection:
    t_plus: int = 80
    s_minus: int = 50
    epsilon: float = 5e-6
    max_iters: int = 10
    reinit_head: bool = False
    source_model: str | None = None
    source_training: str | None = None

    def transfer_config(self) -> TransferConfig:
        return TransferConfig(self.t_plus, self.s_minus, self.epsilon, self.max_iters, self.reinit_head)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    source: SceneConfig = field(default_factory=SceneConfig)
    target: SceneConfig = field(default_factory=SceneConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    emap: EmapConfig = field(default_factory=EmapConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    active: ActiveConfig = field(default_factory=ActiveConfig)
    transfer: TransferSection = field(default_factory=TransferSection)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.active.query()
        self.network.branch_config()
        self.transfer.transfer_config()


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        return build(tp, value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def build(cls, doc, where: str = "config"):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from exc
    return build(RunConfig, doc)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
