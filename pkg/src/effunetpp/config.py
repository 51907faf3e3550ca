"""
Experiment configuration: one YAML file describes one run cell.

Top-level keys::

    model:       ModelSpec fields
    train:       TrainConfig fields
    loss:        LossConfig fields (``lambda`` for the focal weight)
    data:        dir, split, test_split, policy (AugmentationPolicy fields)
    output_dir:  where run directories go
    seed:        seed of a single ``train`` invocation

Every key is validated before any work starts; unknown keys raise
``ConfigError`` naming the offending key. Dotted overrides such as
``--loss.k 0`` are applied to the raw mapping before validation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from .architecture import ModelSpec
from .data import AugmentationPolicy
from .exceptions import ConfigError
from .losses import LossConfig
from .training import TrainConfig

TOP_KEYS = ("model", "train", "loss", "data", "output_dir", "seed")
DATA_KEYS = ("dir", "split", "test_split", "policy")


@dataclass
class DataConfig:
    dir: Optional[str] = None
    split: str = "train"
    test_split: str = "test"
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(DATA_KEYS)
        if unknown:
            raise ConfigError(f"unknown data key(s): {', '.join(sorted(unknown))}")
        policy = d.pop("policy", None)
        if policy is not None and not isinstance(policy, dict):
            raise ConfigError("data.policy must be a mapping")
        return cls(policy=AugmentationPolicy.from_dict(policy or {}), **d)

    def to_dict(self):
        return {"dir": self.dir, "split": self.split, "test_split": self.test_split, "policy": self.policy.to_dict()}


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping at the top level")
        unknown = set(raw) - set(TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(map(str, unknown)))}")
        for section in ("model", "train", "loss", "data"):
            if raw.get(section) is not None and not isinstance(raw[section], dict):
                raise ConfigError(f"{section} must be a mapping")
        seed = raw.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        try:
            return cls(
                model=ModelSpec.from_dict(raw.get("model") or {}),
                train=TrainConfig.from_dict(raw.get("train") or {}),
                loss=LossConfig.from_dict(raw.get("loss") or {}),
                data=DataConfig.from_dict(raw.get("data")),
                output_dir=str(raw.get("output_dir", "runs")),
                seed=seed,
            )
        except TypeError as exc:  # wrong value types reaching a constructor
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "loss": self.loss.to_dict(),
            "data": self.data.to_dict(),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def parse_override(text: str) -> Tuple[List[str], Any]:
    """``"loss.k=0"`` -> ``(["loss", "k"], 0)``; values are parsed as YAML scalars."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, value = text.split("=", 1)
    path = [p for p in key.strip().lstrip("-").split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        parsed = yaml.safe_load(value) if value.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {value!r}: {exc}") from None
    return path, parsed


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    out = copy.deepcopy(raw) if raw else {}
    for text in overrides:
        path, value = parse_override(text)
        if path[0] not in TOP_KEYS:
            raise ConfigError(f"unknown top-level key in override: {path[0]}")
        node = out
        for part in path[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {'.'.join(path)} descends into a non-mapping")
            node = nxt
        node[path[-1]] = value
    return out


def overrides_from_argv(extra: Sequence[str]) -> List[str]:
    """Turn leftover ``--a.b value`` / ``--a.b=value`` tokens into ``a.b=value`` strings."""
    out = []
    i = 0
    extra = list(extra)
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {tok!r}")
        if "=" in tok:
            out.append(tok[2:])
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} is missing a value")
            out.append(f"{tok[2:]}={extra[i + 1]}")
            i += 2
    return out


def load_raw(path) -> Dict[str, Any]:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return raw or {}


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw = load_raw(path) if path else {}
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides))
