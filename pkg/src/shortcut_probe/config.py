"""Sectioned JSON configuration.

A config document has up to five sections, each mirroring one dataclass::

    {"gen_spec": {...}, "trunk_config": {...}, "train_config": {...},
     "loss_weights": {...}, "experiment_plan": {...}}

Missing sections take defaults. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .harness import KIND_ALIASES, ExperimentPlan
from .model import TrunkConfig
from .objectives import LossWeights
from .synthdata import GenSpec
from .training import TrainConfig

SECTIONS = {
    "gen_spec": GenSpec,
    "trunk_config": TrunkConfig,
    "train_config": TrainConfig,
    "loss_weights": LossWeights,
    "experiment_plan": ExperimentPlan,
}
# these plan fields are filled from their own sections
_NESTED = ("gen_spec", "trunk_config", "train_config")


@dataclass
class Config:
    gen_spec: GenSpec = field(default_factory=GenSpec)
    trunk_config: TrunkConfig = field(default_factory=TrunkConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    experiment_plan: ExperimentPlan = field(default_factory=ExperimentPlan)

    def plan_for(self, kind: str) -> ExperimentPlan:
        """The configured plan retargeted to ``kind``; a grid set for another kind is dropped."""
        plan = self.experiment_plan
        target = KIND_ALIASES.get(str(kind), kind)
        if plan.kind == target:
            return plan
        return replace(plan, kind=target, mu2_grid=None)

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        for name in _NESTED:
            out["experiment_plan"].pop(name, None)
        return out


def _check_keys(section: str, cls, values) -> None:
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object, got {type(values).__name__}")
    allowed = {f.name for f in fields(cls)}
    if cls is ExperimentPlan:
        allowed -= set(_NESTED)
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def config_from_dict(doc: dict) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for name, cls in SECTIONS.items():
        _check_keys(name, cls, doc.get(name, {}))
    try:
        gen = GenSpec(**doc.get("gen_spec", {})).validate()
        trunk = TrunkConfig(**doc.get("trunk_config", {}))
        train = TrainConfig(**doc.get("train_config", {}))
        weights = LossWeights(**doc.get("loss_weights", {}))
        plan = ExperimentPlan(**doc.get("experiment_plan", {}), gen_spec=gen,
                              trunk_config=trunk, train_config=train)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return Config(gen, trunk, train, weights, plan)


def load_config(path) -> Config:
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        return config_from_dict({})
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror or e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return config_from_dict(doc)
