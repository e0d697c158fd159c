"""Experiment configuration files.

An INI file with optional sections ``[instance]``, ``[fit]``, ``[online]``
and ``[offline]``; every key defaults to the matching dataclass field, so a
preset only lists what it changes.  ``[instance]`` also takes ``seed`` and
``head_rank`` (0 means full rank; positive values build a degenerate
instance).  The ``PERSALIGN_SEED`` environment variable overrides the
instance seed.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidConfig
from .fitting import FitConfig
from .instance import InstanceConfig, ProblemInstance, generate_degenerate_instance, generate_instance
from .offline import OfflineConfig
from .online import OnlineConfig

SEED_ENV = "PERSALIGN_SEED"
PRESET_DIR = Path(__file__).parent / "presets"

_SECTIONS = {"instance": InstanceConfig, "fit": FitConfig, "online": OnlineConfig, "offline": OfflineConfig}
_INSTANCE_EXTRA = {"seed": 0, "head_rank": 0}


@dataclass
class ExperimentConfig:
    instance: InstanceConfig = field(default_factory=InstanceConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    offline: OfflineConfig = field(default_factory=OfflineConfig)
    seed: int = 0
    head_rank: int = 0

    def validate(self) -> None:
        self.instance.validate()
        self.fit.validate()
        self.online.validate()
        self.offline.validate()
        if self.head_rank < 0:
            raise InvalidConfig("head_rank", "must be >= 0")

    def build_instance(self) -> ProblemInstance:
        if self.head_rank:
            return generate_degenerate_instance(self.instance, self.head_rank, self.seed)
        return generate_instance(self.instance, self.seed)

    def snapshot(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out["instance"].update(seed=self.seed, head_rank=self.head_rank)
        return out

    def to_ini(self) -> str:
        """Fully resolved config text; parsing it gives back an equal config."""
        lines = []
        for section, values in self.snapshot().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_render(value)}")
            lines.append("")
        return "\n".join(lines)


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_render(v) for v in value)
    return str(value)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, str):
            return raw
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if default is None:  # user_dist
            return tuple(float(v) for v in raw.replace(",", " ").split()) or None
    except ValueError:
        raise InvalidConfig(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    raise InvalidConfig(key, "unsupported field type")


def _section(cls, items: dict[str, str], extra: dict | None = None):
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    if extra:
        defaults.update(extra)
    values = {}
    for key, raw in items.items():
        if key not in defaults:
            raise InvalidConfig(key, f"unknown key in [{_name_of(cls)}]")
        values[key] = _coerce(key, raw, defaults[key])
    return values


def _name_of(cls) -> str:
    return next(name for name, c in _SECTIONS.items() if c is cls)


def parse_config(text: str, source: str = "<config>", env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise InvalidConfig("syntax", str(exc)) from None
    kwargs = {}
    extras = dict(_INSTANCE_EXTRA)
    for section in parser.sections():
        if section not in _SECTIONS:
            raise InvalidConfig(section, f"unknown section [{section}] in {source}")
        cls = _SECTIONS[section]
        values = _section(cls, dict(parser.items(section)), _INSTANCE_EXTRA if section == "instance" else None)
        if section == "instance":
            for key in _INSTANCE_EXTRA:
                if key in values:
                    extras[key] = values.pop(key)
        try:
            kwargs[section] = cls(**values)
        except TypeError as exc:
            raise InvalidConfig(section, str(exc)) from None
    if env.get(SEED_ENV):
        try:
            extras["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise InvalidConfig(SEED_ENV, f"not an integer: {env[SEED_ENV]!r}") from None
    cfg = ExperimentConfig(**kwargs, **extras)
    cfg.validate()
    return cfg


def load_config(path, env=None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        candidate = PRESET_DIR / f"{path.name}.ini"
        if path.suffix == "" and candidate.exists():
            path = candidate
        else:
            raise InvalidConfig("config", f"no such file: {path}")
    return parse_config(path.read_text(), source=str(path), env=env)
