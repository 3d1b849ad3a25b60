"""Run configuration: a JSON file mapping onto the component config dataclasses.

Schema (every key optional, unknown keys rejected)::

    {
      "seed": 0,
      "unet":    {"input_h": 64, "input_w": 64, "width_scale": 0.25, ...},
      "fl":      {"num_clients": 4, "rounds": 15, ..., "aggregator": {"kind": "mean", ...}},
      "augment": {"width_shift_range": 0.1, "copies": 1, ...},
      "metrics": {"binarize_threshold": 0.5, ...},
      "paths":   {"manifest": "data/manifest.jsonl", "output_dir": "runs/default"}
    }

The top-level ``seed`` is copied into every sub-config seed, so one number
pins a whole run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

from .aggregators import AggregatorSpec
from .dataset import AugmentConfig
from .errors import ConfigError
from .federation import FLConfig
from .metrics import MetricsConfig
from .unet import UNetConfig


@dataclass(frozen=True)
class PathsConfig:
    manifest: str | None = None
    output_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            unet=replace(self.unet, seed=seed),
            fl=replace(self.fl, seed=seed, aggregator=replace(self.fl.aggregator, seed=seed)),
            augment=replace(self.augment, seed=seed),
        )

    def with_aggregator(self, **changes) -> "RunConfig":
        return replace(self, fl=replace(self.fl, aggregator=replace(self.fl.aggregator, **changes)))

    def with_fl(self, **changes) -> "RunConfig":
        return replace(self, fl=replace(self.fl, **changes))

    def with_paths(self, **changes) -> "RunConfig":
        return replace(self, paths=replace(self.paths, **changes))

    def validate(self, need_manifest: bool = False) -> None:
        """Check every sub-config; optionally require the manifest to exist."""
        self.unet.validate()
        self.fl.validate()
        self.augment.validate()
        self.metrics.validate()
        if need_manifest:
            if not self.paths.manifest:
                raise ConfigError("no manifest path given (paths.manifest or --manifest)")
            if not Path(self.paths.manifest).is_file():
                raise FileNotFoundError(f"manifest not found: {self.paths.manifest}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet"]["dropout_rates"] = list(self.unet.dropout_rates)
        if isinstance(self.unet.width_scale, Fraction):
            d["unet"]["width_scale"] = str(self.unet.width_scale)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, data: Any, where: str, nested: dict | None = None):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = dict(data)
    for key, sub in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = _build(sub, kwargs[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_width_scale(value) -> float | Fraction:
    """Accept numbers or rational strings such as ``"1/4"``."""
    if isinstance(value, str):
        try:
            return Fraction(value)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"width_scale {value!r} is not a number or fraction") from None
    if isinstance(value, bool) or not isinstance(value, (int, float, Fraction)):
        raise ConfigError(f"width_scale {value!r} is not a number")
    return value


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    unet_data = data.get("unet")
    if unet_data is None:
        unet_data = {}
    if not isinstance(unet_data, dict):
        raise ConfigError("unet: expected an object")
    unet_data = dict(unet_data)
    if "width_scale" in unet_data:
        unet_data["width_scale"] = parse_width_scale(unet_data["width_scale"])
    if "dropout_rates" in unet_data:
        unet_data["dropout_rates"] = tuple(unet_data["dropout_rates"])
    cfg = RunConfig(
        unet=_build(UNetConfig, unet_data, "unet"),
        fl=_build(FLConfig, data.get("fl"), "fl", {"aggregator": AggregatorSpec}),
        augment=_build(AugmentConfig, data.get("augment"), "augment"),
        metrics=_build(MetricsConfig, data.get("metrics"), "metrics"),
        paths=_build(PathsConfig, data.get("paths"), "paths"),
    )
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return cfg.with_seed(seed)


def load_config(path: str | Path | None) -> RunConfig:
    """Read a config file; ``None`` gives the desk-scale defaults.

    A relative ``paths.manifest`` is resolved against the config file's directory.
    """
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {p}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    cfg = from_dict(data)
    m = cfg.paths.manifest
    if m and not Path(m).is_absolute():
        cfg = cfg.with_paths(manifest=str(p.parent / m))
    return cfg
