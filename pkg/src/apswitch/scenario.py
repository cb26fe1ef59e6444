"""Network drops: AP/user placement, distances and large-scale fading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class ScenarioConfig:
    """Simulation parameters. Defaults reproduce the reference 15-AP / 7-user setup.

    Powers are in watts, ``shadow_std`` and the path-loss constants in dB,
    ``angular_spread`` in degrees and ``antenna_spacing`` in wavelengths.
    """

    num_users: int = 7
    num_aps: int = 15
    antennas_per_ap: int = 4
    area_side: float = 500.0
    fixed_ap_power: float = 5.0
    pa_inefficiency: float = 2.0
    max_tx_power: float = 1.0
    dl_noise_power: float = field(default_factory=lambda: dbm_to_watt(-94.0))
    ul_noise_power: float = field(default_factory=lambda: dbm_to_watt(-94.0))
    shadow_std: float = 4.0
    bandwidth: float = 20e6
    pathloss_intercept: float = -35.4
    pathloss_exponent_coeff: float = 24.0
    angular_spread: float = 15.0
    antenna_spacing: float = 0.5
    min_distance: float = 1.0
    num_channel_realizations: int = 500
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("num_users", "num_aps", "antennas_per_ap", "num_channel_realizations"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("area_side", "fixed_ap_power", "pa_inefficiency", "max_tx_power",
                     "dl_noise_power", "ul_noise_power", "bandwidth"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be a positive finite number, got {value}")
        if self.shadow_std < 0 or self.angular_spread < 0 or self.min_distance < 0:
            raise ValueError("shadow_std, angular_spread and min_distance must be >= 0")

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict) -> ScenarioConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        converted = {}
        for key, value in values.items():
            caster = int if known[key].type in ("int", int) else float
            converted[key] = caster(value)
        return cls(**converted)

    @classmethod
    def from_file(cls, path: str | Path) -> ScenarioConfig:
        """Read a flat key/value file (YAML or JSON). Missing keys keep their defaults."""
        text = Path(path).read_text(encoding="utf-8")
        values = yaml.safe_load(text) or {}
        if not isinstance(values, dict):
            raise ValueError(f"{path}: expected a flat mapping of config keys")
        return cls.from_mapping(values)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass(frozen=True)
class NetworkGeometry:
    """One drop. Matrices are indexed ``[ap, user]``."""

    ap_positions: np.ndarray
    user_positions: np.ndarray
    distances: np.ndarray
    large_scale: np.ndarray
    nominal_angles: np.ndarray

    def __post_init__(self):
        for arr in (self.ap_positions, self.user_positions, self.distances,
                    self.large_scale, self.nominal_angles):
            arr.setflags(write=False)

    @property
    def num_aps(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def num_users(self) -> int:
        return self.user_positions.shape[0]

    @classmethod
    def from_positions(cls, ap_positions, user_positions, config: ScenarioConfig,
                       shadowing_db=None) -> NetworkGeometry:
        """Build a geometry from explicit positions; shadowing defaults to zero."""
        ap_positions = np.asarray(ap_positions, dtype=float).reshape(-1, 2)
        user_positions = np.asarray(user_positions, dtype=float).reshape(-1, 2)
        offsets = user_positions[None, :, :] - ap_positions[:, None, :]
        distances = np.hypot(offsets[..., 0], offsets[..., 1])
        if shadowing_db is None:
            shadowing_db = np.zeros_like(distances)
        gain_db = pathloss_db(distances, config, shadowing_db)
        return cls(
            ap_positions=ap_positions,
            user_positions=user_positions,
            distances=distances,
            large_scale=10.0 ** (gain_db / 10.0),
            nominal_angles=np.arctan2(offsets[..., 1], offsets[..., 0]),
        )


def pathloss_db(distances, config: ScenarioConfig, shadowing_db=0.0):
    """Channel gain in dB (negative); distances are clamped at ``config.min_distance``."""
    d = np.maximum(np.asarray(distances, dtype=float), config.min_distance)
    return config.pathloss_intercept - config.pathloss_exponent_coeff * np.log10(d) + shadowing_db


def generate_geometry(config: ScenarioConfig, rng: np.random.Generator) -> NetworkGeometry:
    """Draw AP and user positions uniformly over the square and independent shadowing per link."""
    ap_positions = rng.uniform(0.0, config.area_side, size=(config.num_aps, 2))
    user_positions = rng.uniform(0.0, config.area_side, size=(config.num_users, 2))
    shadowing = rng.normal(0.0, config.shadow_std, size=(config.num_aps, config.num_users))
    return NetworkGeometry.from_positions(ap_positions, user_positions, config, shadowing)
