"""Experiment configuration: nested dataclasses loaded from JSON.

Every section is optional in the file; missing keys take the defaults
below and unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .data import CorpusConfig
from .errors import ConfigError, FeasibilityError
from .privacy import DPConfig
from .rsea import check_feasible

__all__ = [
    "MODES",
    "DataConfig",
    "FLConfig",
    "HMoLEConfig",
    "OutputConfig",
    "ExperimentConfig",
    "ConfigFileError",
    "ConfigSyntaxError",
    "parse_config",
    "config_from_dict",
    "config_to_dict",
    "serialize_config",
]

MODES = ("fedamole", "fedit", "fedit_ft", "ablate-h", "ablate-s", "ablate-r", "random")
PARTITIONS = ("task_skew", "dirichlet", "iid")
METRICS = ("exact_match", "rouge_l")


class ConfigFileError(ConfigError):
    """The configuration file is missing or unreadable."""


class ConfigSyntaxError(ConfigError):
    """The configuration file is not valid JSON."""


@dataclass(frozen=True)
class DataConfig:
    n_domains: int = 4
    seqs_per_domain: int = 200
    instruction_len: int = 8
    response_len: int = 2
    n_labels: int = 4
    partition: str = "task_skew"
    alpha: float = 1.0
    embedding_set_size: int = 32
    metric: str = "exact_match"
    seed: int = 0

    def corpus(self, vocab_size: int) -> CorpusConfig:
        return CorpusConfig(
            vocab_size=vocab_size,
            n_domains=self.n_domains,
            seqs_per_domain=self.seqs_per_domain,
            instruction_len=self.instruction_len,
            response_len=self.response_len,
            n_labels=self.n_labels,
            seed=self.seed,
        )


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 4
    rounds: int = 5
    local_steps: int = 50
    lr: float = 5e-3
    lr_decay: float = 0.99
    mode: str = "fedamole"


@dataclass(frozen=True)
class HMoLEConfig:
    rank: int = 4
    lora_alpha: float = 16.0
    dropout: float = 0.0
    k_e: int = 2
    e_total: int = 6
    b: int = 4
    k_c: int = 2
    beta: float = 1e-3

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.rank


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    federation: FLConfig = field(default_factory=FLConfig)
    hmole: HMoLEConfig = field(default_factory=HMoLEConfig)
    privacy: DPConfig = field(default_factory=DPConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seeds: tuple[int, ...] = (42, 62, 82)

    def replace(self, **sections) -> ExperimentConfig:
        """Copy with some fields of some sections changed.

        ``cfg.replace(federation={"rounds": 2})`` keeps every other value.
        """
        updates = {}
        for name, value in sections.items():
            current = getattr(self, name)
            if isinstance(value, dict) and dataclasses.is_dataclass(current):
                value = dataclasses.replace(current, **value)
            updates[name] = value
        return dataclasses.replace(self, **updates)

    def validate(self) -> None:
        self.backbone.validate()
        self.data.corpus(self.backbone.vocab_size).validate(self.backbone.max_seq_len)
        self.privacy.validate()
        d, f, h = self.data, self.federation, self.hmole
        if d.partition not in PARTITIONS:
            raise ConfigError(f"must be one of {PARTITIONS}", key="data.partition")
        if d.metric not in METRICS:
            raise ConfigError(f"must be one of {METRICS}", key="data.metric")
        if not d.alpha > 0:
            raise ConfigError("must be > 0", key="data.alpha")
        if d.embedding_set_size < 1:
            raise ConfigError("must be >= 1", key="data.embedding_set_size")
        if f.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}", key="federation.mode")
        for name in ("n_clients", "rounds"):
            if getattr(f, name) < 1:
                raise ConfigError("must be >= 1", key=f"federation.{name}")
        if f.local_steps < 0:
            raise ConfigError("must be >= 0", key="federation.local_steps")
        if not f.lr > 0:
            raise ConfigError("must be > 0", key="federation.lr")
        if not 0 < f.lr_decay <= 1:
            raise ConfigError("must be in (0, 1]", key="federation.lr_decay")
        if d.partition == "task_skew" and d.n_domains < f.n_clients:
            raise ConfigError("task_skew needs n_domains >= federation.n_clients", key="data.n_domains")
        if h.rank < 1:
            raise ConfigError("must be >= 1", key="hmole.rank")
        if not 0 <= h.dropout < 1:
            raise ConfigError("must be in [0, 1)", key="hmole.dropout")
        if h.beta < 0:
            raise ConfigError("must be >= 0", key="hmole.beta")
        if h.k_e < 1:
            raise FeasibilityError("must be >= 1", key="hmole.k_e")
        if h.k_e > h.b:
            raise FeasibilityError(f"k_e={h.k_e} exceeds b={h.b}", key="hmole.k_e")
        check_feasible(f.n_clients, h.e_total, h.k_e, h.k_c, h.b)


_SECTIONS = {
    "backbone": BackboneConfig,
    "data": DataConfig,
    "federation": FLConfig,
    "hmole": HMoLEConfig,
    "privacy": DPConfig,
    "output": OutputConfig,
}


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key=key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=key)
        return value
    return value


def _section(cls, raw: Any, name: str):
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", key=name)
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError("unknown key", key=f"{name}.{key}")
    values = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in raw.items()}
    return cls(**values)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config from a plain dict."""
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    for key in raw:
        if key not in _SECTIONS and key != "seeds":
            raise ConfigError("unknown key", key=key)
    sections = {name: _section(cls, raw[name], name) for name, cls in _SECTIONS.items() if name in raw}
    cfg = ExperimentConfig(**sections)
    if "seeds" in raw:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("expected a non-empty list of integers", key="seeds")
        cfg = dataclasses.replace(cfg, seeds=tuple(seeds))
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
    out["seeds"] = list(cfg.seeds)
    return out


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def parse_config(path: str | Path | None) -> ExperimentConfig:
    """Load a JSON config file; an empty (or absent ``None``) path gives the defaults.

    Raises:
        ConfigFileError: the file does not exist or cannot be read.
        ConfigSyntaxError: the file is not valid JSON.
        ConfigError: a value is invalid (``FeasibilityError`` for
            assignment constraints); the message names the key path.
    """
    if path is None:
        raw: Any = {}
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigFileError(f"cannot read config file {path}: {exc.strerror}") from exc
        if not text.strip():
            raw = {}
        else:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigSyntaxError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)
