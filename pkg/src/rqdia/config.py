"""Run configuration: a sectioned ``key = value`` file plus environment overrides.

Grammar (``configparser`` INI dialect)::

    [section]
    key = value        ; or  # comments on their own line

Sections: ``run``, ``env``, ``sac``, ``c51``, ``augment``, ``replay``. Lists
are comma separated (``channels = 32, 64``), booleans are true/false/yes/no/1/0,
``none`` clears an optional value. ``RQDIA_<SECTION>_<KEY>`` environment
variables override file values.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field

from .c51 import C51Config
from .envs import EnvSpec
from .sac import SacConfig

SECTIONS = ("run", "env", "sac", "c51", "augment", "replay")
AGENTS = ("sac", "c51")


class ConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    # None picks the agent default: random_shift for sac, intensity for c51
    kind: str | None = None
    pad: int = 4
    intensity_scale: float = 0.05


@dataclass
class ReplayConfig:
    capacity: int = 100_000
    # updates start once this many transitions are stored; None picks the
    # agent default (1000 for sac, 1600 for c51)
    min_fill: int | None = None
    priority_exponent: float = 0.5
    priority_weight_start: float = 0.4
    priority_weight_end: float = 1.0
    priority_eps: float = 1e-6
    # None clips rewards to [-1, 1] for c51 only
    reward_clip: bool | None = None


@dataclass
class RunSection:
    agent: str = "sac"
    total_env_steps: int = 100_000
    eval_every: int = 10_000
    eval_episodes: int = 10
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    updates_per_step: int = 1


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSpec = field(default_factory=EnvSpec)
    sac: SacConfig = field(default_factory=SacConfig)
    c51: C51Config = field(default_factory=C51Config)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)

    @property
    def agent(self) -> str:
        return self.run.agent

    @property
    def min_fill(self) -> int:
        if self.replay.min_fill is not None:
            return self.replay.min_fill
        return 1000 if self.agent == "sac" else 1600

    @property
    def augment_kind(self) -> str:
        if self.augment.kind is not None:
            return self.augment.kind
        return "random_shift" if self.agent == "sac" else "intensity"

    @property
    def reward_clip(self) -> bool:
        return self.agent == "c51" if self.replay.reward_clip is None else self.replay.reward_clip

    def validate(self) -> "RunConfig":
        r = self.run
        if r.agent not in AGENTS:
            raise ConfigError(f"[run] agent must be one of {AGENTS}, got {r.agent!r}")
        if r.total_env_steps < 0:
            raise ConfigError("[run] total_env_steps must be >= 0")
        for key in ("eval_every", "eval_episodes", "updates_per_step"):
            if getattr(r, key) < 1:
                raise ConfigError(f"[run] {key} must be positive")
        if r.checkpoint_every < 0:
            raise ConfigError("[run] checkpoint_every must be >= 0")
        if self.replay.capacity < 1 or self.min_fill < 1:
            raise ConfigError("[replay] capacity and min_fill must be positive")
        if (self.agent == "sac") == self.env.discrete:
            need = "continuous (point_reach)" if self.agent == "sac" else "discrete (catch)"
            raise ConfigError(f"agent {self.agent} needs a {need} environment, got {self.env.kind}")
        if self.augment_kind not in ("identity", "random_shift", "intensity"):
            raise ConfigError(f"[augment] unknown kind {self.augment.kind!r}")
        if self.augment_kind == "random_shift" and not 0 <= self.augment.pad < self.env.frame_size / 2:
            raise ConfigError(f"[augment] pad {self.augment.pad} must be below frame_size / 2")
        return self


def _unwrap(tp):
    """(base type, optional?) for annotations like ``int | None`` or ``tuple[int, ...]``."""
    args = typing.get_args(tp)
    if args and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def _parse(raw: str, tp, where: str):
    base, optional = _unwrap(tp)
    text = raw.strip()
    if optional and text.lower() in ("none", ""):
        return None
    origin = typing.get_origin(base) or base
    try:
        if origin is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if origin is int:
            return int(text)
        if origin is float:
            return float(text)
        if origin is tuple:
            return tuple(int(part) for part in text.replace(" ", "").split(",") if part)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(base, '__name__', base)}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _section_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def from_mapping(data: dict[str, dict[str, str]]) -> RunConfig:
    """Build from ``{section: {key: raw string}}``; unknown sections or keys are errors."""
    classes = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}
    built = {}
    for section in SECTIONS:
        cls = classes[section]
        types = _section_types(cls)
        raw = data.get(section, {})
        unknown = sorted(set(raw) - set(types))
        if unknown:
            raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
        values = {k: _parse(v, types[k], f"[{section}] {k}") for k, v in raw.items()}
        built[section] = _build(cls, values, section)
    extra = sorted(set(data) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown sections: {', '.join(extra)}")
    return RunConfig(**built).validate()


def env_overrides(environ=None) -> dict[str, dict[str, str]]:
    environ = os.environ if environ is None else environ
    out: dict[str, dict[str, str]] = {}
    for name, value in environ.items():
        if not name.startswith("RQDIA_"):
            continue
        rest = name[len("RQDIA_"):].lower()
        for section in SECTIONS:
            if rest.startswith(section + "_"):
                out.setdefault(section, {})[rest[len(section) + 1:]] = value
                break
    return out


def read_ini(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_config(path=None, text: str | None = None, environ=None, seed: int | None = None,
                output_dir: str | None = None) -> RunConfig:
    """File (or text) values, then ``RQDIA_*`` environment overrides, then explicit arguments."""
    if text is None:
        if path is None:
            text = ""
        else:
            try:
                with open(path, encoding="utf-8") as f:
                    text = f.read()
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
    data = read_ini(text)
    for section, items in env_overrides(environ).items():
        data.setdefault(section, {}).update(items)
    if seed is not None:
        data.setdefault("run", {})["seed"] = str(seed)
    if output_dir is not None:
        data.setdefault("run", {})["output_dir"] = str(output_dir)
    return from_mapping(data)


def to_mapping(cfg: RunConfig) -> dict[str, dict[str, str]]:
    """Every field of every section as raw strings (round-trips through :func:`from_mapping`)."""
    return {s: {k: _format(v) for k, v in dataclasses.asdict(getattr(cfg, s)).items()} for s in SECTIONS}


def to_ini(cfg: RunConfig) -> str:
    lines = []
    for section, items in to_mapping(cfg).items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in items.items())
        lines.append("")
    return "\n".join(lines)
