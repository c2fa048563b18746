"""Run configuration: JSON documents, full defaulting, dotted overrides.

A run config looks like::

    {
      "seed": 0,
      "policy": {"vocab_size": 12, "max_len": 4, ...},
      "stages": [{"name": "mrl_analog", "steps": 300, "env": {...}, "pad": {...}, ...}]
    }

Anything omitted takes the default of the matching dataclass. Two stage-level
fields default by stage name: ``grpo.kl_enabled`` and ``grpo.entropy_enabled``
are off for ``mrl_analog`` and on for ``trl_analog``. ``pad.tau.horizon``
defaults to the stage's step count.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .envs import TASK_KINDS, EnvConfig, n_prompt_keys
from .grpo import EntropySchedule, GrpoConfig
from .pad import STRATEGIES, PadConfig, TemperatureSchedule
from .policy import PolicyParams, init_params
from .rewards import LengthRewardConfig

STAGE_NAMES = ("mrl_analog", "trl_analog")


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = 12
    max_len: int = 4
    context_order: int = 1
    n_prompt_keys: int | None = None
    eos_id: int = 10
    init_eos_logit: float = 0.0
    init_scale: float = 0.0
    init_seed: int = 0


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 1.0
    top_p: float = 0.95


@dataclass(frozen=True)
class RewardSettings:
    length_reward_enabled: bool = False
    length: LengthRewardConfig = field(default_factory=LengthRewardConfig)


@dataclass(frozen=True)
class StageConfig:
    name: str = "mrl_analog"
    env: EnvConfig = field(default_factory=EnvConfig)
    steps: int = 2000
    group_size: int = 8
    rollout_batch_prompts: int = 8
    strategy: str = "pad"
    pad: PadConfig = field(default_factory=PadConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    rewards: RewardSettings = field(default_factory=RewardSettings)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.group_size * self.rollout_batch_prompts

    def problems(self) -> list[str]:
        out = []
        if self.name not in STAGE_NAMES:
            out.append(f"name: one of {', '.join(STAGE_NAMES)}")
        if self.steps < 1:
            out.append("steps: steps >= 1")
        if self.group_size < 2:
            out.append("group_size: G >= 2")
        if self.rollout_batch_prompts < 1:
            out.append("rollout_batch_prompts: rollout_batch_prompts >= 1")
        if self.strategy not in STRATEGIES:
            out.append(f"strategy: unknown strategy {self.strategy!r}; valid: {', '.join(STRATEGIES)}")
        if not self.generation.temperature > 0:
            out.append("generation.temperature: temperature > 0")
        if not 0 < self.generation.top_p <= 1:
            out.append("generation.top_p: top_p ∈ (0,1]")
        out += [f"env.{p}" for p in self.env.problems()]
        out += [f"pad.{p}" for p in self.pad.problems()]
        out += [f"grpo.{p}" for p in self.grpo.problems()]
        out += [f"rewards.length.{p}" for p in self.rewards.length.problems()]
        return out

    def config_hash(self) -> str:
        return hash_dict(to_dict(self))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    stages: tuple[StageConfig, ...] = (StageConfig(),)

    def config_hash(self) -> str:
        return hash_dict(to_dict(self))

    def initial_params(self) -> PolicyParams:
        p = self.policy
        return init_params(p.vocab_size, p.max_len, p.context_order, p.n_prompt_keys,
                           p.eos_id, p.init_eos_logit, p.init_scale, p.init_seed)


# --- (de)serialization ----------------------------------------------------


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def hash_dict(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_NESTED = {
    (StageConfig, "env"): EnvConfig,
    (StageConfig, "pad"): PadConfig,
    (StageConfig, "grpo"): GrpoConfig,
    (StageConfig, "rewards"): RewardSettings,
    (StageConfig, "generation"): GenerationConfig,
    (PadConfig, "tau"): TemperatureSchedule,
    (GrpoConfig, "entropy"): EntropySchedule,
    (RewardSettings, "length"): LengthRewardConfig,
    (RunConfig, "policy"): PolicyConfig,
}


def _build(cls, data: dict, path: str, errors: list[str]):
    if not isinstance(data, dict):
        errors.append(f"{path}: expected an object")
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            errors.append(f"{path}{key}: unknown field")
            continue
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}{key}.", errors)
        elif key == "difficulty_range":
            kwargs[key] = tuple(float(v) for v in value)
        else:
            kwargs[key] = _coerce(names[key], value, f"{path}{key}", errors)
    return cls(**kwargs)


def _coerce(f: dataclasses.Field, value, path: str, errors: list[str]):
    default = f.default if f.default is not dataclasses.MISSING else None
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        errors.append(f"{path}: expected {type(default).__name__}, got {value!r}")
        return default
    return value


def _stage_defaults(raw: dict) -> dict:
    raw = json.loads(json.dumps(raw))
    name = raw.get("name", "mrl_analog")
    grpo = raw.setdefault("grpo", {})
    trl = name == "trl_analog"
    grpo.setdefault("kl_enabled", trl)
    grpo.setdefault("entropy_enabled", trl)
    steps = raw.get("steps", StageConfig.steps)
    tau = raw.setdefault("pad", {}).setdefault("tau", {})
    tau.setdefault("horizon", steps if isinstance(steps, int) and steps >= 1 else 1)
    return raw


def parse_config(data: dict) -> RunConfig:
    """Resolve and validate a raw config document; raises ConfigError listing every problem."""
    errors: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError(["config: expected a JSON object"])
    unknown = set(data) - {"seed", "policy", "stages"}
    errors += [f"{k}: unknown field" for k in sorted(unknown)]
    policy = _build(PolicyConfig, data.get("policy", {}), "policy.", errors)
    raw_stages = data.get("stages", [{}])
    if not isinstance(raw_stages, list) or not raw_stages:
        errors.append("stages: at least one stage required")
        raw_stages = [{}]
    stages = []
    for i, raw in enumerate(raw_stages):
        if not isinstance(raw, dict):
            errors.append(f"stages[{i}]: expected an object")
            continue
        raw = _stage_defaults(raw)
        # vocabulary and length are owned by the policy section
        env_raw = dict(raw.get("env", {}))
        for k in ("vocab_size", "max_len"):
            if k in env_raw and env_raw[k] != getattr(policy, k):
                errors.append(f"stages[{i}].env.{k}: must match policy.{k}")
            env_raw[k] = getattr(policy, k)
        raw["env"] = env_raw
        stage = _build(StageConfig, raw, f"stages[{i}].", errors)
        errors += [f"stages[{i}].{p}" for p in stage.problems()]
        stages.append(stage)
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        errors.append("seed: non-negative integer")
        seed = 0

    if policy.vocab_size < 2:
        errors.append("policy.vocab_size: vocab_size >= 2")
    if policy.max_len < 1:
        errors.append("policy.max_len: max_len >= 1")
    if policy.context_order < 0:
        errors.append("policy.context_order: context_order >= 0")
    if not 0 <= policy.eos_id < max(policy.vocab_size, 1):
        errors.append("policy.eos_id: eos_id < vocab_size")
    needed = max([n_prompt_keys(s.env.task_kind, policy.max_len) for s in stages
                  if s.env.task_kind in TASK_KINDS] or [1])
    if policy.n_prompt_keys is None:
        policy = dataclasses.replace(policy, n_prompt_keys=needed)
    elif policy.n_prompt_keys < needed:
        errors.append(f"policy.n_prompt_keys: at least {needed} for the configured tasks")
    if errors:
        raise ConfigError(errors)
    return RunConfig(seed=seed, policy=policy, stages=tuple(stages))


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides.

    ``policy.*`` and ``seed`` address the top level; ``stages.N.*`` one stage;
    any other dotted key is applied to every stage. Values are parsed as JSON
    when possible, else kept as strings.
    """
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r}: expected key=value"])
        key, raw_value = item.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        parts = key.strip().split(".")
        if parts[0] in ("policy", "seed"):
            _set_path(data, parts, value)
        elif parts[0] == "stages":
            if len(parts) < 3 or not parts[1].isdigit():
                raise ConfigError([f"override {key!r}: expected stages.N.field"])
            stages = data.setdefault("stages", [{}])
            idx = int(parts[1])
            if idx >= len(stages):
                raise ConfigError([f"override {key!r}: no stage {idx}"])
            _set_path(stages[idx], parts[2:], value)
        else:
            for stage in data.setdefault("stages", [{}]):
                _set_path(stage, parts, value)
    return data


def _set_path(d: dict, parts: list[str], value) -> None:
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return parse_config(apply_overrides(data, overrides or []))


def stage_from_dict(data: dict) -> StageConfig:
    """Round-trip helper for manifests and checkpoints."""
    errors: list[str] = []
    stage = _build(StageConfig, data, "", errors)
    if errors:
        raise ConfigError(errors)
    return stage
