"""Layered run configuration: defaults < INI file < dotted ``section.key=value`` overrides.

Every component config is a dataclass; its section in the file carries the
same field names. Component ``seed`` fields that are not set explicitly are
derived from ``run.seed`` through a named substream, then written out, so an
echoed config reloads to an identical record.
"""
from __future__ import annotations

import configparser
import io
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .codec import CodecConfig
from .dataset import DataConfig
from .encoder import PretrainConfig
from .errors import ConfigError
from .harness import ExperimentConfig
from .terrain import TerrainConfig, VehicleConfig


@dataclass
class RunSection:
    seed: int = 0
    out: str = ""  # empty: $VERTIKIT_OUT, else ./runs


@dataclass
class AblationSection:
    which: str = "masking"
    seeds: str = "0,1,2"

    def validate(self) -> None:
        if self.which not in ("masking", "ordering"):
            raise ConfigError(f"ablation.which must be masking or ordering, got {self.which!r}")
        parse_seeds(self.seeds)


@dataclass
class RolloutSection:
    seeds: str = "0-9"
    flat: bool = False
    distance: float = 2.0
    timeout: float = 60.0
    goal_clip: float = 1.5

    def validate(self) -> None:
        parse_seeds(self.seeds)
        if self.distance <= 0 or self.timeout <= 0:
            raise ConfigError("rollout.distance and rollout.timeout must be positive")


SECTIONS = {
    "run": RunSection,
    "terrain": TerrainConfig,
    "vehicle": VehicleConfig,
    "data": DataConfig,
    "codec": CodecConfig,
    "pretrain": PretrainConfig,
    "downstream": ExperimentConfig,
    "ablation": AblationSection,
    "rollout": RolloutSection,
}
SEEDED = ("codec", "pretrain", "downstream")


def parse_seeds(text: str) -> list:
    """'0,1,2' or '0-9' or a mix like '0-2,7' -> list of ints."""
    out = []
    try:
        for part in str(text).split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                a, b = part.split("-", 1) if not part.startswith("-") else part[1:].split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seed list {text!r}") from None
    if not out:
        raise ConfigError(f"empty seed list {text!r}")
    return out


def substream(seed: int, name: str) -> int:
    """Seed for the named component, derived from the global seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0] >> 1)


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    downstream: ExperimentConfig = field(default_factory=ExperimentConfig)
    ablation: AblationSection = field(default_factory=AblationSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)

    def validate(self) -> None:
        for name in SECTIONS:
            sec = getattr(self, name)
            if hasattr(sec, "validate"):
                try:
                    sec.validate()
                except ConfigError as exc:
                    raise ConfigError(f"[{name}] {exc}") from None
        if self.downstream.ordering != self.pretrain.ordering:
            raise ConfigError("downstream.ordering must match pretrain.ordering")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def echo(self, directory) -> Path:
        path = Path(directory) / "config_echo.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(section: str, key: str, default, text: str):
    where = f"{section}.{key}"
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    return text


def _apply(cfg: RunConfig, section: str, key: str, value: str, explicit: set) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r} (in key {section}.{key})")
    sec = getattr(cfg, section)
    names = {f.name for f in fields(sec)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    explicit.add((section, key))
    return replace(cfg, **{section: replace(sec, **{key: _coerce(section, key, getattr(sec, key), value)})})


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    lhs, value = text.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override key must be dotted (section.key), got {lhs!r}")
    section, key = lhs.strip().split(".", 1)
    return section, key, value


def load_config(path=None, overrides=()) -> RunConfig:
    """Build and validate a RunConfig. Raises ConfigError naming any offending key."""
    cfg = RunConfig()
    explicit: set = set()
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from None
        for section in cp.sections():
            for key, value in cp[section].items():
                cfg = _apply(cfg, section, key, value, explicit)
    for item in overrides:
        section, key, value = parse_override(item) if isinstance(item, str) else item
        cfg = _apply(cfg, section, key, str(value), explicit)
    for name in SEEDED:
        if (name, "seed") not in explicit:
            sec = getattr(cfg, name)
            cfg = replace(cfg, **{name: replace(sec, seed=substream(cfg.run.seed, name))})
    for key in ("mask_ratio", "ordering"):
        if ("downstream", key) not in explicit:
            cfg = replace(cfg, downstream=replace(cfg.downstream, **{key: getattr(cfg.pretrain, key)}))
    cfg.validate()
    return cfg


def reference_text() -> str:
    """Commented defaults: what an empty config file resolves to (component seeds shown for run.seed = 0)."""
    header = ("# vertikit configuration reference: every key with its default.\n"
              "# Precedence: built-in defaults < this file < --set section.key=value < explicit CLI flags.\n"
              "# Unset codec/pretrain/downstream seeds are derived from run.seed.\n\n")
    return header + load_config().to_ini()
