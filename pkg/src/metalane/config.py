"""Configuration dataclasses and TOML loading.

Two files drive a run.  The *scenario* file describes the road, traffic,
reward and shield; the *run* file describes tasks and optimizer settings and
points at a scenario file.  Values resolve in three layers: built-in defaults,
then file values, then ``section.key=value`` overrides from the command line.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for malformed config files or unknown keys."""


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 33.3
    min_gap: float = 2.0
    time_headway: float = 1.5
    max_accel: float = 2.0
    comfort_decel: float = 3.0
    accel_exponent: float = 4.0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"idm.{f.name} must be strictly positive")
        if self.accel_exponent < 1:
            raise ConfigError("idm.accel_exponent must be >= 1")


@dataclass(frozen=True)
class RoadConfig:
    n_lanes: int = 3
    lane_width: float = 3.75
    length: float = 800.0
    dt: float = 0.1
    lane_change_time: float = 3.0
    vehicle_length: float = 5.0
    vehicle_width: float = 2.0
    v_max: float = 33.3
    ego_lane: int = 2
    exit_lane: int = 0
    ego_speed_range: tuple[float, float] = (0.7, 1.0)
    spawn_speed_range: tuple[float, float] = (0.7, 1.0)
    spawn_clearance: float = 12.0
    warmup_time: float = 30.0
    warmup_dt: float = 0.5
    despawn_margin: float = 100.0
    max_episode_steps: int = 1000

    @property
    def width(self) -> float:
        return self.n_lanes * self.lane_width

    def centerline(self, lane: int) -> float:
        return lane * self.lane_width


@dataclass(frozen=True)
class RewardConfig:
    w_comfort: float = 0.2
    w_efficiency: float = 0.4
    w_safety: float = 0.4
    p_collision: float = 10.0
    c_time: float = 0.01
    d_near: float = 10.0
    jerk_max: float = 10.0
    # terminal credit on a completed lane change; see efficiency term in reward.py
    success_bonus: float = 50.0


@dataclass(frozen=True)
class ShieldConfig:
    d_crit: float = 2.0


@dataclass(frozen=True)
class TrafficTask:
    release_prob: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.release_prob <= 1.0:
            raise ConfigError("release_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ScenarioConfig:
    road: RoadConfig = field(default_factory=RoadConfig)
    idm: IdmParams = field(default_factory=IdmParams)
    reward: RewardConfig = field(default_factory=RewardConfig)
    shield: ShieldConfig = field(default_factory=ShieldConfig)
    release_prob: float = 0.3
    seed: int = 0

    @property
    def task(self) -> TrafficTask:
        return TrafficTask(self.release_prob, self.seed)


@dataclass(frozen=True)
class PpoHyper:
    horizon: int = 512
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 1e-4
    c1: float = 0.5
    c2: float = 0.01
    max_grad_norm: float = 10.0

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError("ppo.clip_eps must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ConfigError("ppo.gamma must lie in (0, 1] and ppo.lam in [0, 1]")
        if self.horizon <= 0 or self.minibatch <= 0 or self.epochs < 0:
            raise ConfigError("ppo.horizon, ppo.minibatch must be positive")


@dataclass(frozen=True)
class MetaHyper:
    inner_lr: float = 1e-4
    outer_lr: float = 1e-4
    inner_steps: int = 1
    iterations: int = 300
    mode: str = "fo"
    anneal: bool = True
    checkpoint_every: int = 50
    eval_every: int = 10
    eval_episodes: int = 20

    def __post_init__(self) -> None:
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ConfigError("meta.inner_lr must be >= 0 and meta.outer_lr > 0")
        if self.inner_steps < 1:
            raise ConfigError("meta.inner_steps must be >= 1")
        if self.mode not in ("fo", "so"):
            raise ConfigError(f"meta.mode must be 'fo' or 'so', got {self.mode!r}")


@dataclass(frozen=True)
class NetConfig:
    hidden: int = 256
    separate_critic: bool = False


@dataclass(frozen=True)
class TaskSet:
    train: tuple[float, ...] = (0.3, 0.4, 0.5)
    test: float = 0.7

    def __post_init__(self) -> None:
        if self.test in self.train:
            raise ConfigError("test task must not appear among training tasks")
        for f in (*self.train, self.test):
            if not 0.0 <= f <= 1.0:
                raise ConfigError("task release probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    adapt_steps: int = 40
    eval_every: int = 1
    seeds: int = 5
    shield: bool = True


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    scenario_path: str = ""
    tasks: TaskSet = field(default_factory=TaskSet)
    meta: MetaHyper = field(default_factory=MetaHyper)
    ppo: PpoHyper = field(default_factory=PpoHyper)
    net: NetConfig = field(default_factory=NetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    shield: bool = True
    out_dir: str = "runs/default"


def _coerce(tp: Any, value: Any, key: str) -> Any:
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{key}: expected a table")
        return from_dict(tp, value, prefix=key + ".")
    origin = getattr(tp, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(float(v) for v in value)
    if tp is bool:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "on", "yes"):
                return True
            if value.lower() in ("0", "false", "off", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {tp.__name__}") from None
    return value


def _resolved_types(cls: type) -> dict[str, Any]:
    import typing

    return typing.get_type_hints(cls)


def from_dict(cls: type, data: Mapping[str, Any], prefix: str = "") -> Any:
    """Build dataclass ``cls`` from a (possibly partial) nested mapping."""
    hints = _resolved_types(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        kwargs[key] = _coerce(hints[key], value, prefix + key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(f"{prefix or cls.__name__}: {exc}") from None


def to_dict(obj: Any) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """Split ``a.b=value`` into a key path and a TOML-parsed value.

    Values that are not valid TOML literals are kept as bare strings, so
    ``meta.mode=so`` works without quoting.
    """
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def _set_path(data: dict[str, Any], path: list[str], value: Any) -> None:
    node = data
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path '{'.'.join(path)}' crosses a scalar")
    node[path[-1]] = value


def read_toml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_scenario(path: str | Path | None = None, overrides: list[str] = ()) -> ScenarioConfig:
    data = read_toml(path) if path else {}
    for item in overrides:
        keys, value = parse_override(item)
        _set_path(data, keys, value)
    return from_dict(ScenarioConfig, data)


def load_run_config(
    path: str | Path | None = None,
    scenario_path: str | Path | None = None,
    overrides: list[str] = (),
) -> RunConfig:
    """Resolve a RunConfig from defaults, the run file, and overrides.

    Overrides addressing the scenario use the ``scenario.`` prefix, e.g.
    ``scenario.road.dt=0.05``.
    """
    data = read_toml(path) if path else {}
    if scenario_path is not None:
        data["scenario_path"] = str(scenario_path)
    elif data.get("scenario_path") and path is not None:
        # relative scenario paths resolve against the run file's directory
        sp = Path(data["scenario_path"])
        if not sp.is_absolute():
            data["scenario_path"] = str(Path(path).parent / sp)
    scenario_data: dict[str, Any] = {}
    if data.get("scenario_path"):
        scenario_data = read_toml(data["scenario_path"])
    if "scenario" in data:
        _deep_update(scenario_data, data.pop("scenario"))
    for item in overrides:
        keys, value = parse_override(item)
        if keys[0] == "scenario":
            _set_path(scenario_data, keys[1:], value)
        else:
            _set_path(data, keys, value)
    data["scenario"] = scenario_data
    return from_dict(RunConfig, data)


def _deep_update(base: dict[str, Any], extra: Mapping[str, Any]) -> None:
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def dump_toml(data: Mapping[str, Any]) -> str:
    """Minimal TOML writer for the flat/nested tables produced by ``to_dict``."""
    lines: list[str] = []
    tables: list[tuple[str, Mapping[str, Any]]] = []

    def scalar(v: Any) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int, float)):
            return repr(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(scalar(x) for x in v) + "]"
        return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'

    def walk(prefix: str, table: Mapping[str, Any]) -> None:
        body = [f"{k} = {scalar(v)}" for k, v in table.items() if not isinstance(v, Mapping)]
        if prefix:
            tables.append((prefix, body))
        else:
            lines.extend(body)
        for k, v in table.items():
            if isinstance(v, Mapping):
                walk(f"{prefix}.{k}" if prefix else k, v)

    walk("", data)
    for name, body in tables:
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(body)
    return "\n".join(lines) + "\n"
