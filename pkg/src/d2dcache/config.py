"""Scenario configuration: YAML files plus ``key=value`` overrides."""

import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import yaml

POPULARITY_MODES = ("independent", "identical", "scripted")
INTENSITY_SOURCES = ("true", "estimated")
POLICIES = ("proposed", "naive", "probabilistic", "optimal")
TRANSMISSION_MODES = ("unicast", "broadcast")
KINDS = ("estimation", "cache_states", "delay")

# parameters a sweep or series axis may vary
SWEEPABLE = ("n_users", "n_files", "cache_size", "zipf_beta", "min_intensity",
             "periods_observed", "cell_radius", "bs_power_db", "user_power_db", "file_size",
             "budget", "cycle", "none")


class ConfigError(ValueError):
    """Invalid scenario configuration."""


@dataclass
class Axis:
    param: str = "none"
    values: list = field(default_factory=lambda: [0])


@dataclass
class ScenarioConfig:
    """All knobs of one experiment run.

    Powers are in dB relative to the noise power ``B sigma^2``; the file
    size is in bits; delays come out in frames.  ``budget`` is the number of
    cached files each user may replace per cycle (``None``: unconstrained).
    """

    scenario: str
    kind: str = "delay"
    n_users: int = 25
    n_files: int = 100
    cache_size: int = 30
    zipf_beta: float = 0.5
    min_intensity: float = 2.0
    periods_observed: int = 10
    period_length: float = 1000.0
    cell_radius: float = 1.5
    bs_power_db: float = 16.9
    user_power_db: float = 13.0
    file_size: float = 96.13
    cycle_count: int = 1
    cycles_per_period: int = 1
    budget: Optional[int] = None
    popularity_modes: list = field(default_factory=lambda: ["independent"])
    intensity_sources: list = field(default_factory=lambda: ["true"])
    policies: list = field(default_factory=lambda: ["proposed", "naive"])
    transmission: list = field(default_factory=list)
    requests_per_user: int = 1
    slots: int = 1000
    replicates: int = 10
    seed: int = 0
    mc_samples: int = 2000
    estimation_pairs: int = 4
    positions: Optional[list] = None
    sweep: Axis = field(default_factory=Axis)
    series: Axis = field(default_factory=Axis)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def at(self, **values):
        """Copy with some parameters replaced (used for sweep points)."""
        values = {k: v for k, v in values.items() if k not in ("none", "cycle")}
        return dataclasses.replace(self, **values)


_SCALARS = {f.name: f.type for f in fields(ScenarioConfig)}
_NAME_LISTS = ("popularity_modes", "intensity_sources", "policies", "transmission")


def _coerce(name, value, kind):
    if kind is int or kind == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if kind is float or kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if kind is str or kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    if kind is list or kind == "list":
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        return list(value)
    if kind == Optional[int]:
        return None if value is None else _coerce(name, value, int)
    if kind == Optional[list]:
        return None if value is None else _coerce(name, value, list)
    return value


def _axis(name, data):
    if isinstance(data, Axis):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{name} must be a mapping with 'param' and 'values'")
    unknown = set(data) - {"param", "values"}
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    param = data.get("param", "none")
    values = _coerce(f"{name}.values", data.get("values", [0]), list)
    return Axis(param, values)


def from_dict(data):
    """Build and validate a config from plain data (e.g. parsed YAML)."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    if "scenario" not in data:
        raise ConfigError("config needs a 'scenario' name")
    unknown = set(data) - set(_SCALARS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in ("sweep", "series"):
            kwargs[name] = _axis(name, value)
        else:
            kwargs[name] = _coerce(name, value, _SCALARS[name])
    for name in _NAME_LISTS:
        # YAML reads a bare true/false as a boolean
        if name in kwargs:
            kwargs[name] = [str(v).lower() if isinstance(v, bool) else v for v in kwargs[name]]
    cfg = ScenarioConfig(**kwargs)
    validate(cfg)
    return cfg


def load(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return from_dict(data)


def apply_overrides(cfg, assignments):
    """Apply ``key=value`` strings; dotted keys reach into ``sweep``/``series``."""
    data = cfg.to_dict()
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value in {item!r}: {exc}") from exc
        parts = key.strip().split(".")
        target = data
        for p in parts[:-1]:
            if not isinstance(target.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config key {key!r}")
        target[parts[-1]] = value
    return from_dict(data)


def _check_point(cfg, where):
    def need(ok, msg):
        if not ok:
            raise ConfigError(f"{where}: {msg}")

    need(cfg.n_users >= 1, "n_users must be at least 1")
    need(cfg.n_files >= 1, "n_files must be at least 1")
    need(0 <= cfg.cache_size <= cfg.n_files, "cache_size must lie in [0, n_files]")
    need(cfg.zipf_beta >= 0, "zipf_beta must be non-negative")
    need(cfg.min_intensity > 0, "min_intensity must be positive")
    need(cfg.periods_observed >= 1, "periods_observed must be at least 1")
    need(cfg.cell_radius > 0, "cell_radius must be positive")
    need(cfg.file_size > 0, "file_size must be positive")
    need(all(math.isfinite(x) for x in (cfg.bs_power_db, cfg.user_power_db)), "powers must be finite")
    need(cfg.budget is None or cfg.budget >= 0, "budget must be non-negative or null")
    if "scripted" in cfg.popularity_modes:
        need(cfg.n_users == 3 and cfg.n_files >= 21, "the scripted mode needs 3 users and >= 21 files")
    if cfg.positions is not None:
        need(len(cfg.positions) == cfg.n_users, "positions must list one [x, y] per user")


def validate(cfg):
    """Raise ConfigError if any field or sweep point is invalid."""
    from d2dcache.experiments import SCENARIOS

    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {cfg.scenario!r}; see 'list'")
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}")
    for name, allowed, values in (("popularity_modes", POPULARITY_MODES, cfg.popularity_modes),
                                  ("intensity_sources", INTENSITY_SOURCES, cfg.intensity_sources),
                                  ("policies", POLICIES, cfg.policies),
                                  ("transmission", TRANSMISSION_MODES, cfg.transmission)):
        bad = [v for v in values if v not in allowed]
        if bad:
            raise ConfigError(f"{name}: unknown entries {bad}; allowed {list(allowed)}")
    for name in ("popularity_modes", "intensity_sources", "policies"):
        if not getattr(cfg, name):
            raise ConfigError(f"{name} must not be empty")
    for name in ("cycle_count", "cycles_per_period", "replicates", "mc_samples", "slots",
                 "requests_per_user", "estimation_pairs"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    if cfg.period_length <= 0:
        raise ConfigError("period_length must be positive")
    if not 0 <= cfg.seed < 2 ** 63:
        raise ConfigError("seed must lie in [0, 2**63)")
    if cfg.sweep.param == "cycle" and any(
            isinstance(c, bool) or not isinstance(c, int) or c < 1 for c in cfg.sweep.values):
        raise ConfigError("cycle sweep values must be positive integers")
    for name in ("sweep", "series"):
        axis = getattr(cfg, name)
        if axis.param not in SWEEPABLE:
            raise ConfigError(f"{name}.param must be one of {list(SWEEPABLE)}")
        if not axis.values:
            raise ConfigError(f"{name}.values must not be empty")
    if cfg.series.param == "cycle":
        raise ConfigError("series.param cannot be 'cycle'")
    for sv in cfg.sweep.values:
        for rv in cfg.series.values:
            point = {cfg.sweep.param: sv, cfg.series.param: rv}
            try:
                p = from_point(cfg, point)
            except (TypeError, ConfigError) as exc:
                raise ConfigError(f"sweep point {point}: {exc}") from exc
            _check_point(p, f"sweep point {point}")


def from_point(cfg, point):
    """Config for one (sweep, series) point with types coerced."""
    values = {}
    for k, v in point.items():
        if k in ("none", "cycle"):
            continue
        values[k] = _coerce(k, v, _SCALARS[k])
    return cfg.at(**values)
