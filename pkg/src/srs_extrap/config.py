"""Configuration dataclasses and structured-text loading.

Scenario and experiment settings are plain frozen dataclasses. They can be
read from YAML files whose top-level keys mirror the dataclass names
(``system``, ``paths``, ``drift``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

SPEED_OF_LIGHT = 299_792_458.0


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass(frozen=True)
class SystemConfig:
    """System constants of the hopping-SRS MIMO-OFDM link.

    ``bandwidth / subcarrier_spacing`` must be an integer number of tones
    ``N`` and ``N`` must be divisible by ``hop_count * comb``.
    """

    carrier_freq: float = 3.5e9
    bandwidth: float = 15.36e6
    subcarrier_spacing: float = 60e3
    n_x: int = 4
    n_y: int = 4
    hop_count: int = 4
    comb: int = 2
    srs_period: float = 0.5e-3
    estimation_slots: int | None = None
    noise_var: float = 10 ** (-15 / 10)
    rng_seed: int = 2024
    max_delay: float = 0.8e-6
    hop_order: tuple[int, ...] | None = None
    zc_root: int = 1

    def __post_init__(self) -> None:
        ratio = self.bandwidth / self.subcarrier_spacing
        if self.subcarrier_spacing <= 0 or abs(ratio - round(ratio)) > 1e-6 or ratio < 1:
            raise ConfigError("bandwidth must be a positive integer multiple of the subcarrier spacing")
        if self.n_x < 1 or self.n_y < 1:
            raise ConfigError("antenna counts must be >= 1")
        if self.hop_count < 1 or self.comb < 1:
            raise ConfigError("hop_count and comb must be >= 1")
        if self.num_subcarriers % (self.hop_count * self.comb):
            raise ConfigError("N must be divisible by hop_count * comb")
        if self.noise_var < 0:
            raise ConfigError("noise_var must be non-negative")
        if self.max_delay < 0:
            raise ConfigError("max_delay must be non-negative")
        if self.estimation_slots is not None and self.estimation_slots < 1:
            raise ConfigError("estimation_slots must be >= 1")
        if self.hop_order is not None:
            if sorted(self.hop_order) != list(range(self.hop_count)):
                raise ConfigError("hop_order must be a permutation of 0..hop_count-1")
            object.__setattr__(self, "hop_order", tuple(int(b) for b in self.hop_order))

    @property
    def num_subcarriers(self) -> int:
        return int(round(self.bandwidth / self.subcarrier_spacing))

    @property
    def n_r(self) -> int:
        return self.n_x * self.n_y

    @property
    def tones_per_bwp(self) -> int:
        return self.num_subcarriers // (self.hop_count * self.comb)

    @property
    def t_e(self) -> int:
        return self.hop_count if self.estimation_slots is None else self.estimation_slots

    def with_snr(self, snr_db: float) -> "SystemConfig":
        """Copy with the noise variance set for unit per-element channel power."""
        return dataclasses.replace(self, noise_var=float(10 ** (-snr_db / 10)))


@dataclass(frozen=True)
class PathSamplerConfig:
    """Parameters of the synthetic multipath sampler.

    Angles are in degrees here and converted to radians when sampling.
    ``power_decay`` is the e-folding delay of the exponential power profile
    in seconds; ``None`` gives equal expected powers.
    """

    num_paths: int = 3
    min_delay_spacing: float = 50e-9
    azimuth_range: tuple[float, float] = (30.0, 150.0)
    elevation_range: tuple[float, float] = (45.0, 135.0)
    power_decay: float | None = 0.4e-6
    speed_kmh: float = 3.0
    max_retries: int = 1000
    normalize_power: bool = True

    def __post_init__(self) -> None:
        if self.num_paths < 1:
            raise ConfigError("num_paths must be >= 1")
        if self.min_delay_spacing < 0:
            raise ConfigError("min_delay_spacing must be non-negative")
        for lo, hi in (self.azimuth_range, self.elevation_range):
            if not 0.0 <= lo <= hi <= 180.0:
                raise ConfigError("angle sectors must lie inside [0, 180] degrees")
        object.__setattr__(self, "azimuth_range", tuple(float(a) for a in self.azimuth_range))
        object.__setattr__(self, "elevation_range", tuple(float(a) for a in self.elevation_range))


@dataclass(frozen=True)
class DriftConfig:
    """Imperfection laws across slots.

    ``doppler_beta = 0`` freezes the Doppler frequencies (strict mode).
    ``timing_offset_scale`` multiplies the base range ``1/(4 f_s N)``.
    """

    doppler_beta: float = 0.05
    doppler_gamma: float = 1.0
    phase_noise: bool = True
    timing_offset_scale: float = 1.0
    doppler: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.doppler_beta <= 1.0:
            raise ConfigError("doppler_beta must lie in [0, 1]")
        if self.doppler_gamma < 0 or self.timing_offset_scale < 0:
            raise ConfigError("drift variances and scales must be non-negative")


@dataclass(frozen=True)
class ScenarioConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    paths: PathSamplerConfig = field(default_factory=PathSamplerConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)

    def timing_offset_max(self) -> float:
        s = self.system
        return self.drift.timing_offset_scale / (4 * s.subcarrier_spacing * s.num_subcarriers)


def _build(cls, data: Mapping[str, Any] | None):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def scenario_from_dict(data: Mapping[str, Any] | None) -> ScenarioConfig:
    data = dict(data or {})
    unknown = set(data) - {"system", "paths", "drift"}
    if unknown:
        raise ConfigError(f"unknown scenario sections: {sorted(unknown)}")
    return ScenarioConfig(
        system=_build(SystemConfig, data.get("system")),
        paths=_build(PathSamplerConfig, data.get("paths")),
        drift=_build(DriftConfig, data.get("drift")),
    )


def scenario_to_dict(cfg: ScenarioConfig) -> dict[str, Any]:
    def plain(obj):
        out = dataclasses.asdict(obj)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    return {"system": plain(cfg.system), "paths": plain(cfg.paths), "drift": plain(cfg.drift)}


def load_yaml(path: str | Path) -> dict[str, Any]:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return data


def load_scenario(path: str | Path) -> ScenarioConfig:
    data = load_yaml(path)
    return scenario_from_dict(data.get("scenario", data))


def max_doppler(cfg: ScenarioConfig) -> float:
    """Largest Doppler magnitude v f_c / c for the configured speed."""
    return cfg.paths.speed_kmh / 3.6 * cfg.system.carrier_freq / SPEED_OF_LIGHT


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic RNG substream addressed by integer keys."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
