"""Run configuration: nested dataclasses, JSON I/O and dot-path overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .envdata import ACTION_DIM, DataConfig, EnvConfig, ShiftSpec
from .diffusion import GUIDANCE_FORMS

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    n: int = 5
    beta_min: float = 0.1
    beta_max: float = 10.0
    kind: str = "vp"


@dataclass
class CriticConfig:
    tau: float = 0.7
    eta: float = 0.005
    gamma: float = 0.99


@dataclass
class OptimConfig:
    lr: float = 3e-4
    batch_size: int = 256
    critic_steps: int = 50_000
    eps_steps: int = 50_000
    hidden: int = 64


@dataclass
class GprConfig:
    cap: int = 2048
    restarts: int = 4
    iters: int = 200
    lr: float = 0.05
    log_bounds: tuple[float, float] = (-9.210340371976182, 9.210340371976182)  # ln 1e-4, ln 1e4


@dataclass
class PolicyConfig:
    M: int = 16
    top_k: int = 20
    guidance_form: str = "conjugate"
    include_original: bool = True


@dataclass
class ShiftConfig:
    t_shift: int = 5
    actuator: int = 0
    mode: str = "zeroed"
    duration: int | None = 30

    def spec(self) -> ShiftSpec:
        return ShiftSpec(self.t_shift, self.actuator, self.mode, self.duration)


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    far_field_draws: int = 1000
    far_field_perms: int = 200
    far_field_alpha: float = 0.01


@dataclass
class RunConfig:
    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 0
    dataset: str = "data/dataset.jsonl"
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    gpr: GprConfig = field(default_factory=GprConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        try:
            self.env.validate()
            self.data.validate()
            self.eval.shift.spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version}")
        checks = [
            (self.schedule.n >= 1, "schedule.n must be >= 1"),
            (0 < self.schedule.beta_min <= self.schedule.beta_max, "need 0 < beta_min <= beta_max"),
            (self.schedule.kind in ("vp", "linear"), "schedule.kind must be 'vp' or 'linear'"),
            (0 < self.critic.tau < 1, "critic.tau must be in (0, 1)"),
            (0 < self.critic.eta <= 1, "critic.eta must be in (0, 1]"),
            (0 <= self.critic.gamma <= 1, "critic.gamma must be in [0, 1]"),
            (self.optim.lr > 0, "optim.lr must be > 0"),
            (self.optim.batch_size >= 1, "optim.batch_size must be >= 1"),
            (self.optim.critic_steps >= 0 and self.optim.eps_steps >= 0, "step counts must be >= 0"),
            (self.optim.hidden >= 1, "optim.hidden must be >= 1"),
            (self.gpr.cap >= 1, "gpr.cap must be >= 1"),
            (self.gpr.restarts >= 1 and self.gpr.iters >= 0, "gpr.restarts >= 1 and gpr.iters >= 0"),
            (len(self.gpr.log_bounds) == 2 and self.gpr.log_bounds[0] < self.gpr.log_bounds[1],
             "gpr.log_bounds must be an increasing pair"),
            (self.policy.M >= 1, "policy.M must be >= 1"),
            (self.policy.top_k >= 1, "policy.top_k must be >= 1"),
            (self.policy.guidance_form in GUIDANCE_FORMS, f"policy.guidance_form must be one of {GUIDANCE_FORMS}"),
            (len(self.eval.seeds) > 0, "eval.seeds must be non-empty"),
            (self.eval.shift.actuator < ACTION_DIM, "eval.shift.actuator out of range"),
            (self.eval.far_field_draws >= 2 and self.eval.far_field_perms >= 1, "far-field test sizes too small"),
            (0 < self.eval.far_field_alpha < 1, "eval.far_field_alpha must be in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        """Plain JSON-compatible dict (tuples become lists)."""
        return json.loads(json.dumps(asdict(self)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(path + k for k in unknown))}")
    default = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{path}{name}.")
        elif value is None and "None" in str(known[name].type):
            kwargs[name] = None
        else:
            kwargs[name] = _coerce(current, value, path + name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _coerce(current, value, name: str):
    """Match ``value`` to the type of the default, rejecting lossy conversions."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(current, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        out = [_coerce(current[0], v, name) if current else v for v in value]
        return tuple(out) if isinstance(current, tuple) else out
    return value


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data).validate()


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply ``{"critic.tau": "0.7", ...}``; values are parsed as JSON, else taken as strings."""
    data = cfg.to_dict()
    for key, raw in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config field: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field: {key}")
        try:
            node[parts[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[parts[-1]] = raw
    return from_dict(data)


def parse_override_args(args: list[str]) -> dict[str, str]:
    """Turn ``["--critic.tau", "0.7", "--seed=3"]`` into a dict."""
    out = {}
    it = iter(args)
    for tok in it:
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            val = next(it, None)
            if val is None:
                raise ConfigError(f"missing value for --{key}")
        out[key] = val
    return out
