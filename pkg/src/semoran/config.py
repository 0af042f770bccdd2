"""Experiment configuration: JSON file values over defaults, command-line flags over both.

Schema (every key optional)::

    {
      "seed": 0,
      "out": "out",
      "data": {"n_samples": 12000, "train_fraction": 0.8, "path": null, "scene": {...}},
      "vae": {"bottleneck": 270, "hidden_widths": [1024, 512], "bottleneck_hidden": true,
              "epochs": 50, "batch_size": 64, "beta": 1.0, "kl_per_element": true, "alpha": 0.002, ...},
      "localizer": {"hidden_widths": [256, 64], "epochs": 50, "batch_size": 64, "alpha": 0.002, ...},
      "sweep": {"bottlenecks": [25, 50, 100, 200, 270, 400, 500], "seeds_per_point": 3,
                "snr_db": ["off"], "localizer_fit": "reconstructed", "knn_k": 5,
                "sim_requests": 8, "jobs": 1},
      "sim": {"codec": "vae", "bottleneck": 270, "requests": 100, "interval_us": 10000,
              "snr_db": "off", "decode_at": "CU_SP", "topology": {...}}
    }
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .codec import VaeConfig
from .csi import HALF_FEATURES
from .localization import LocalizerConfig

DEFAULT_BOTTLENECKS = (25, 50, 100, 200, 270, 400, 500)


class ConfigError(ValueError):
    pass


def parse_snr(value: Any) -> float | None:
    if value is None:
        return None
    if isinstance(value, str):
        if value.strip().lower() in ("off", "none", ""):
            return None
        value = value.strip()
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid SNR value {value!r} (use a number of dB or 'off')") from None


def parse_snr_list(text: str | list) -> list[float | None]:
    items = text.split(",") if isinstance(text, str) else list(text)
    return [parse_snr(v) for v in items]


def parse_int_list(text: str | list) -> list[int]:
    items = text.split(",") if isinstance(text, str) else list(text)
    try:
        return [int(v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


@dataclass
class DataConfig:
    n_samples: int = 12_000
    train_fraction: float = 0.8
    path: str | None = None
    scene: dict[str, Any] = field(default_factory=dict)


@dataclass
class SweepSettings:
    bottlenecks: list[int] = field(default_factory=lambda: list(DEFAULT_BOTTLENECKS))
    seeds_per_point: int = 3
    snr_db: list[float | None] = field(default_factory=lambda: [None])
    # "reconstructed": retrain the localizer on decoded training CSI per point
    localizer_fit: str = "reconstructed"
    knn_k: int = 5
    sim_requests: int = 8
    jobs: int = 1


@dataclass
class SimSettings:
    codec: str = "vae"
    bottleneck: int = 270
    requests: int = 100
    interval_us: int = 10_000
    snr_db: float | None = None
    decode_at: str = "CU_SP"
    topology: dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    sim: SimSettings = field(default_factory=SimSettings)

    def validate(self) -> "ExperimentConfig":
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be a u64")
        if not 0 < self.data.train_fraction < 1:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        if self.data.n_samples < 2:
            raise ConfigError("data.n_samples must be at least 2")
        if not self.sweep.bottlenecks or any(not 1 <= b <= HALF_FEATURES for b in self.sweep.bottlenecks):
            raise ConfigError(f"sweep.bottlenecks must be a non-empty list of integers in [1, {HALF_FEATURES}]")
        if not 1 <= self.sim.bottleneck <= HALF_FEATURES:
            raise ConfigError(f"sim.bottleneck must lie in [1, {HALF_FEATURES}]")
        if self.sim.requests < 1 or self.sim.interval_us < 0:
            raise ConfigError("sim.requests must be >= 1 and sim.interval_us >= 0")
        if self.sweep.seeds_per_point < 1:
            raise ConfigError("sweep.seeds_per_point must be at least 1")
        if self.sweep.localizer_fit not in ("reconstructed", "raw"):
            raise ConfigError("sweep.localizer_fit must be 'reconstructed' or 'raw'")
        if self.sim.codec not in ("vae", "identity"):
            raise ConfigError("sim.codec must be 'vae' or 'identity'")
        if self.sim.decode_at not in ("CU_SP", "O_DU"):
            raise ConfigError("sim.decode_at must be 'CU_SP' or 'O_DU'")
        for name in ("vae", "localizer"):
            section = getattr(self, name)
            if section.epochs < 0 or section.batch_size < 1:
                raise ConfigError(f"{name}.epochs must be >= 0 and {name}.batch_size >= 1")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["sweep"]["snr_db"] = ["off" if v is None else v for v in self.sweep.snr_db]
        d["sim"]["snr_db"] = "off" if self.sim.snr_db is None else self.sim.snr_db
        d["vae"]["hidden_widths"] = list(self.vae.hidden_widths)
        d["localizer"]["hidden_widths"] = list(self.localizer.hidden_widths)
        return d


_SECTIONS = {
    "data": DataConfig,
    "vae": VaeConfig,
    "localizer": LocalizerConfig,
    "sweep": SweepSettings,
    "sim": SimSettings,
}


def _section(cls, base, values: dict[str, Any], name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    values = dict(values)
    if "hidden_widths" in values:
        values["hidden_widths"] = tuple(parse_int_list(values["hidden_widths"]))
    if "bottlenecks" in values:
        values["bottlenecks"] = parse_int_list(values["bottlenecks"])
    if "snr_db" in values:
        values["snr_db"] = (
            parse_snr_list(values["snr_db"]) if cls is SweepSettings else parse_snr(values["snr_db"])
        )
    return dataclasses.replace(base, **values)


def merge(config: ExperimentConfig, values: dict[str, Any]) -> ExperimentConfig:
    top = {"seed", "out", *_SECTIONS}
    unknown = sorted(set(values) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    updates: dict[str, Any] = {}
    for key, value in values.items():
        if key in _SECTIONS:
            updates[key] = _section(_SECTIONS[key], getattr(config, key), value, key)
        else:
            updates[key] = value
    try:
        return dataclasses.replace(config, **updates)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    config = ExperimentConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
        config = merge(config, values)
    if overrides:
        config = merge(config, overrides)
    return config.validate()
