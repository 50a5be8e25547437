"""Flat JSON run configuration shared by every CLI subcommand.

One object maps keys onto ``ReentryConfig`` (with ``slsyn_``-prefixed keys for the sync
network), ``TrainPlan``, ``SyntheticAVConfig`` and the simulation sizes below. ``preset``
picks the starting point (``desk`` or ``full``); ``image_size`` sets both the synthetic
face size and the visual front-end input size.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .datasim import SyntheticAVConfig
from .reentry import ReentryConfig
from .slsyn import SLSynConfig
from .training import TrainPlan

PRESETS = ("desk", "full")


@dataclass
class SimulationSizes:
    n_sync_train: int = 2000
    n_sync_val: int = 200
    clip_len_s: Optional[float] = 2.0
    n_mix_train: int = 64
    n_mix_val: int = 16
    n_mix_test: int = 32
    n_interferers: int = 1
    split: tuple = (0.5, 0.25, 0.25)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ReentryConfig
    plan: TrainPlan
    synth: SyntheticAVConfig
    sizes: SimulationSizes
    preset: str = "desk"
    raw: dict = dataclasses.field(default_factory=dict)


def _names(cls) -> set:
    return {f.name for f in fields(cls)}


def parse_config(flat: dict) -> RunConfig:
    if not isinstance(flat, dict):
        raise ConfigError("config must be a JSON object")
    flat = dict(flat)
    preset = flat.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
    image_size = flat.pop("image_size", 32 if preset == "desk" else 112)

    model_keys = _names(ReentryConfig) - {"slsyn"}
    slsyn_keys = _names(SLSynConfig) - {"image_size"}
    plan_keys = _names(TrainPlan)
    synth_keys = _names(SyntheticAVConfig) - {"image_size"}
    size_keys = _names(SimulationSizes)
    buckets = {k: {} for k in ("model", "slsyn", "plan", "synth", "sizes")}
    unknown = []
    for key, value in flat.items():
        if key in model_keys:
            buckets["model"][key] = value
        elif key.startswith("slsyn_") and key[6:] in slsyn_keys:
            buckets["slsyn"][key[6:]] = value
        elif key in plan_keys:
            buckets["plan"][key] = value
        elif key in synth_keys:
            buckets["synth"][key] = value
        elif key in size_keys:
            buckets["sizes"][key] = value
        else:
            unknown.append(key)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        base_sync = SLSynConfig.toy(image_size) if preset == "desk" else SLSynConfig(image_size=image_size)
        sync_cfg = dataclasses.replace(base_sync, **{
            k: tuple(v) if isinstance(v, list) else v for k, v in buckets["slsyn"].items()
        })
        if preset == "desk":
            model = ReentryConfig.desk(image_size=image_size, **buckets["model"])
            model = dataclasses.replace(model, slsyn=sync_cfg)
        else:
            model = ReentryConfig(slsyn=sync_cfg, **buckets["model"])
        plan = TrainPlan.from_dict(buckets["plan"])
        synth = SyntheticAVConfig(image_size=image_size, **buckets["synth"])
        synth.bands()
        sizes = SimulationSizes(**buckets["sizes"])
        sizes.split = tuple(sizes.split)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(model, plan, synth, sizes, preset, dict(flat, preset=preset, image_size=image_size))


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    p = Path(path)
    try:
        flat = json.loads(p.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return parse_config(flat)
