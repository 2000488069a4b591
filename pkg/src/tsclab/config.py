"""Run configuration: YAML files mapped onto validated dataclasses."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .agents.dqn import AgentConfig
from .safety import RULE_TYPES

VARIANTS = ("act", "loss", "reward", "state_and_reward", "state_and_loss", "syn_r", "syn_q",
            "backbone", "fixed_time")


class ConfigError(ValueError):
    """Invalid run configuration; ``errors`` lists ``field: message`` strings."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


def default_rules() -> list[dict]:
    return [{"type": "speed_85th", "threshold_mps": 20.1168, "enabled": True},
            {"type": "approach_time", "threshold_s": 4.0, "enabled": True},
            {"type": "opposing_lanes", "min_lanes": 3, "enabled": True}]


@dataclass
class VariantConfig:
    variant: str = "backbone"
    lam1: float = 1.0
    lam2: float = 0.5
    lam_shaping: float = 10.0
    w1: float = 1.0
    w2: float = 5.0
    u1: float = 0.5
    u2: float = 0.5
    embedding_dim: int = 16
    collision_penalty: float = 1000.0
    act_filter: bool | None = None  # None -> on for the act variant only
    tick_shield: bool = True
    rules: list = field(default_factory=default_rules)

    @property
    def filter_on(self) -> bool:
        return self.variant == "act" if self.act_filter is None else bool(self.act_filter)

    @property
    def uses_loss(self) -> bool:
        return self.variant in ("loss", "state_and_loss")

    @property
    def uses_shaping(self) -> bool:
        return self.variant in ("reward", "state_and_reward")

    @property
    def uses_embedding(self) -> bool:
        return self.variant in ("state_and_reward", "state_and_loss") and self.embedding_dim > 0

    @property
    def needs_safety(self) -> bool:
        return self.filter_on or self.uses_loss or self.uses_shaping or self.uses_embedding

    def validate(self) -> list[str]:
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"variant.variant: unknown variant {self.variant!r} (choose from {', '.join(VARIANTS)})")
        if self.lam1 <= 0:
            errs.append("variant.lam1: must be > 0")
        for name in ("lam2", "lam_shaping", "embedding_dim", "collision_penalty"):
            if getattr(self, name) < 0:
                errs.append(f"variant.{name}: must be >= 0")
        for i, rule in enumerate(self.rules):
            if not isinstance(rule, dict) or rule.get("type") not in RULE_TYPES:
                errs.append(f"variant.rules[{i}]: unknown rule type {rule!r}")
        return errs


@dataclass
class RunConfig:
    name: str = "run"
    scenario: str = "synthetic-4x12"
    backbone: str = "dqn"
    action_mode: str = "cyclic"
    encoder: str = "grid"
    reward: str = "waiting"  # waiting | lane
    episode_s: float = 3600.0
    train_episodes: int | None = None
    eval_runs: int = 10
    seed: int = 0
    ignore_foe_prob: float | None = None
    demand_scale: float = 1.0
    left_modes: bool = True
    workers: int = 1
    variant: VariantConfig = field(default_factory=VariantConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        if self.train_episodes is None:
            self.train_episodes = 300 if self.action_mode == "cyclic" else 500

    def validate(self) -> list[str]:
        errs = []
        if self.backbone not in ("dqn", "ppo"):
            errs.append(f"backbone: expected dqn or ppo, got {self.backbone!r}")
        if self.action_mode not in ("cyclic", "acyclic"):
            errs.append(f"action_mode: expected cyclic or acyclic, got {self.action_mode!r}")
        if self.encoder not in ("grid", "lane"):
            errs.append(f"encoder: expected grid or lane, got {self.encoder!r}")
        if self.reward not in ("waiting", "lane"):
            errs.append(f"reward: expected waiting or lane, got {self.reward!r}")
        if self.episode_s <= 0:
            errs.append("episode_s: must be positive")
        if self.train_episodes < 0:
            errs.append("train_episodes: must be >= 0")
        if self.eval_runs < 1:
            errs.append("eval_runs: must be >= 1")
        if self.ignore_foe_prob is not None and not 0.0 <= self.ignore_foe_prob <= 1.0:
            errs.append("ignore_foe_prob: must lie in [0, 1]")
        if self.workers < 1:
            errs.append("workers: must be >= 1")
        if self.backbone == "ppo" and self.variant.variant in ("syn_q", "state_and_reward", "state_and_loss"):
            errs.append(f"variant.variant: {self.variant.variant} needs the dqn backbone")
        errs += self.variant.validate()
        errs += [f"agent.{e}" for e in self.agent.validate()]
        return errs

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, blob, prefix, errs):
    if blob is None:
        return cls()
    if not isinstance(blob, dict):
        errs.append(f"{prefix or 'config'}: expected a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in blob.items():
        where = f"{prefix}{key}"
        if key not in known:
            errs.append(f"{where}: unknown field")
            continue
        default = getattr(cls(), key)
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errs.append(f"{where}: expected a number, got {value!r}")
                continue
            if isinstance(default, int) and not isinstance(value, int):
                if float(value).is_integer():
                    value = int(value)
                else:
                    errs.append(f"{where}: expected an integer, got {value!r}")
                    continue
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(blob: dict) -> RunConfig:
    errs: list[str] = []
    blob = copy.deepcopy(blob or {})
    variant = _build(VariantConfig, blob.pop("variant", None), "variant.", errs)
    agent = _build(AgentConfig, blob.pop("agent", None), "agent.", errs)
    run = _build(RunConfig, blob, "", errs)
    run.variant, run.agent = variant, agent
    errs += run.validate()
    if errs:
        raise ConfigError(errs)
    return run


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config: file not found: {path}"])
    try:
        blob = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"config: not valid YAML ({exc})"]) from exc
    if overrides:
        blob = merge(blob, overrides)
    scen = blob.get("scenario")
    if isinstance(scen, str) and not Path(scen).is_absolute() and (path.parent / scen).exists():
        blob["scenario"] = str(path.parent / scen)
    return config_from_dict(blob)


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out
