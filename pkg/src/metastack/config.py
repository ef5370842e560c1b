"""Experiment configuration: a TOML document with a closed schema.

Sections are ``scenario``, ``schemes``, ``sweep``, ``optimizer`` and
``seeds``.  Missing keys take the defaults of the chosen sweep (capacity vs.
attenuation or BER vs. transmit power); unknown keys and ill-typed values are
rejected with the dotted path of the offending field.
"""
from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMES = ("MIMO_DIGITAL", "SIM_1L", "SIM_4L", "SIM_7L", "MFSIM_2L", "FILM_2L")
SWEEPS = ("attenuation_ratio", "tx_power_dbm")
MAX_ATTENUATION = 0.4


class ConfigError(ValueError):
    """Schema violation; ``path`` is the dotted location of the bad field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class ScenarioSection:
    carrier_hz: float = 28e9
    tx_power_dbm: float = 20.0
    noise_dbm: float = -110.0
    pathloss_exponent: float = 2.5
    link_distance_m: float = 150.0
    num_streams: int = 4
    attenuation_ratio: float = 0.0
    rx_antennas: int = 4
    user_azimuth_deg: tuple = (-40.0, -15.0, 15.0, 40.0)
    user_elevation_deg: tuple = (0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SchemesSection:
    include: tuple = SCHEMES
    layer_rows: int = 10
    layer_cols: int = 10
    feed_rows: int = 1
    feed_cols: int = 4
    feed_gap_m: float = 0.04
    inter_layer_gap_m: float = 0.005
    film_bound_m: float = 0.0024


@dataclass(frozen=True)
class SweepSection:
    parameter: str = "attenuation_ratio"
    values: tuple = ()
    realizations: int = 100
    min_errors: int = 200
    max_symbols: int = 10_000_000
    batch_symbols: int = 100_000
    target_ber: float = 1e-5


@dataclass(frozen=True)
class OptimizerSection:
    step_size: float = 0.1
    max_iters: int = 500
    tolerance: float = 1e-6
    restarts: int = 4


@dataclass(frozen=True)
class SeedsSection:
    master_seed: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    schemes: SchemesSection = field(default_factory=SchemesSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        for sec in d.values():
            for k, v in sec.items():
                if isinstance(v, tuple):
                    sec[k] = list(v)
        return d

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seeds=SeedsSection(int(seed)))

    def with_realizations(self, n: int) -> "ExperimentConfig":
        return replace(self, sweep=replace(self.sweep, realizations=int(n)))


def _grid(start, stop, step):
    n = int(round((stop - start) / step))
    return tuple(float(round(start + i * step, 12)) for i in range(n + 1))


def default_config(parameter: str = "attenuation_ratio") -> ExperimentConfig:
    """Defaults of the two studies: capacity vs. attenuation, BER vs. transmit power."""
    if parameter == "attenuation_ratio":
        return ExperimentConfig(sweep=SweepSection(parameter, _grid(0.0, 0.4, 0.02), 100))
    if parameter == "tx_power_dbm":
        scen = ScenarioSection(tx_power_dbm=30.0, noise_dbm=-125.0, attenuation_ratio=0.2)
        return ExperimentConfig(scenario=scen, sweep=SweepSection(parameter, _grid(0.0, 40.0, 2.0), 20))
    raise ConfigError("sweep.parameter", f"must be one of {list(SWEEPS)}, got {parameter!r}")


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _coerce(path: str, value, default):
    """Convert a TOML value to the type of ``default``."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, "expected an array")
        proto = default[0] if default else 0.0
        return tuple(_coerce(f"{path}[{i}]", v, proto) for i, v in enumerate(value))
    raise TypeError(default)


def _section(name: str, raw, base):
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a table")
    fields = asdict(base)
    out = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
        out[key] = _coerce(f"{name}.{key}", value, getattr(base, key))
    return replace(base, **out)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a table")
    for key in raw:
        if key not in ("scenario", "schemes", "sweep", "optimizer", "seeds"):
            raise ConfigError(key, "unknown section")
    sweep_raw = raw.get("sweep", {})
    parameter = sweep_raw.get("parameter", "attenuation_ratio") if isinstance(sweep_raw, dict) else None
    if parameter not in SWEEPS:
        raise ConfigError("sweep.parameter", f"must be one of {list(SWEEPS)}, got {parameter!r}")
    base = default_config(parameter)
    cfg = ExperimentConfig(
        scenario=_section("scenario", raw.get("scenario", {}), base.scenario),
        schemes=_section("schemes", raw.get("schemes", {}), base.schemes),
        sweep=_section("sweep", sweep_raw, base.sweep),
        optimizer=_section("optimizer", raw.get("optimizer", {}), base.optimizer),
        seeds=_section("seeds", raw.get("seeds", {}), base.seeds),
    )
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {p}: {exc.strerror}") from exc
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from exc
    return parse_config(raw)


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(path, message)


def validate_config(cfg: ExperimentConfig) -> None:
    sc, sh, sw, op = cfg.scenario, cfg.schemes, cfg.sweep, cfg.optimizer
    _require(sc.carrier_hz > 0, "scenario.carrier_hz", "must be positive")
    _require(sc.pathloss_exponent > 0, "scenario.pathloss_exponent", "must be positive")
    _require(sc.link_distance_m >= 1, "scenario.link_distance_m", "must be at least 1 m")
    _require(sc.num_streams >= 1, "scenario.num_streams", "must be at least 1")
    _require(0 <= sc.attenuation_ratio < 1, "scenario.attenuation_ratio", "must lie in [0, 1)")
    _require(sc.rx_antennas >= sc.num_streams, "scenario.rx_antennas", "must be at least num_streams")
    _require(len(sc.user_azimuth_deg) == sc.num_streams, "scenario.user_azimuth_deg",
             "needs one angle per stream/user")
    _require(len(sc.user_elevation_deg) == sc.num_streams, "scenario.user_elevation_deg",
             "needs one angle per stream/user")
    pairs = list(zip(sc.user_azimuth_deg, sc.user_elevation_deg))
    _require(len(set(pairs)) == len(pairs), "scenario.user_azimuth_deg", "user directions must be distinct")
    _require(all(abs(a) < 90 and abs(e) < 90 for a, e in pairs), "scenario.user_azimuth_deg",
             "angles must lie strictly inside (-90, 90) degrees")

    _require(len(sh.include) >= 1, "schemes.include", "must name at least one scheme")
    for i, name in enumerate(sh.include):
        _require(name in SCHEMES, f"schemes.include[{i}]", f"unknown scheme {name!r}; expected one of {list(SCHEMES)}")
    _require(len(set(sh.include)) == len(sh.include), "schemes.include", "duplicate scheme")
    for key in ("layer_rows", "layer_cols", "feed_rows", "feed_cols"):
        _require(getattr(sh, key) >= 1, f"schemes.{key}", "must be at least 1")
    _require(sh.feed_rows * sh.feed_cols == sc.num_streams, "schemes.feed_cols",
             "feed array size must equal num_streams (one RF chain per stream)")
    _require(sh.feed_gap_m > 0, "schemes.feed_gap_m", "must be positive")
    _require(sh.inter_layer_gap_m > 0, "schemes.inter_layer_gap_m", "must be positive")
    _require(sh.film_bound_m >= 0, "schemes.film_bound_m", "must be non-negative")
    _require(2 * sh.film_bound_m < sh.inter_layer_gap_m, "schemes.film_bound_m",
             "displaced FILM layers could touch; bound must be below half the gap")

    _require(len(sw.values) >= 1, "sweep.values", "must contain at least one point")
    vals = np.asarray(sw.values)
    _require(bool(np.all(np.diff(vals) > 0)), "sweep.values", "must be strictly increasing")
    if sw.parameter == "attenuation_ratio":
        _require(bool(np.all((vals >= 0) & (vals <= MAX_ATTENUATION))), "sweep.values",
                 f"attenuation ratios must lie in [0, {MAX_ATTENUATION}]")
    _require(sw.realizations >= 1, "sweep.realizations", "must be at least 1")
    _require(sw.min_errors >= 1, "sweep.min_errors", "must be at least 1")
    _require(sw.max_symbols >= 1, "sweep.max_symbols", "must be at least 1")
    _require(sw.batch_symbols >= 1, "sweep.batch_symbols", "must be at least 1")
    _require(0 < sw.target_ber < 0.5, "sweep.target_ber", "must lie in (0, 0.5)")

    _require(op.step_size > 0, "optimizer.step_size", "must be positive")
    _require(op.max_iters >= 1, "optimizer.max_iters", "must be at least 1")
    _require(op.tolerance >= 0, "optimizer.tolerance", "must be non-negative")
    _require(op.restarts >= 1, "optimizer.restarts", "must be at least 1")
    _require(0 <= cfg.seeds.master_seed < 2 ** 64, "seeds.master_seed", "must be an unsigned 64-bit integer")


def dumps_toml(cfg: ExperimentConfig) -> str:
    """Serialise ``cfg`` back to TOML (round-trips through :func:`parse_config`)."""
    lines = []
    for name, sec in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in sec.items():
            lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    return "\n".join(lines)
