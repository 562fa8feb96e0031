"""Plain-text scene configuration: one ``key = value`` per line.

Blank lines and ``#`` comments are ignored. Tuples are comma separated.
``sensor`` may repeat, one line per sensor in index order; giving any
``sensor`` line replaces the default sensor layout. Every other key may
appear at most once. See ``configs/default.conf`` for the full list.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .core import DomainError, Position3D
from .synth import GridPlan, SceneConfig, grid_plan


class ConfigError(ValueError):
    def __init__(self, path, lineno: int | None, message: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class PlanSettings:
    grid_nx: int = 5
    grid_ny: int = 5
    grid_margin: float = 0.5
    grid_heights: tuple[float, ...] = (0.6, 1.3, 2.0)
    frames_per_point: int = 20
    rate_hz: float = 50.0
    travel_gap_s: float = 1.0
    hover_jitter_m: float = 0.003

    def build(self, scene: SceneConfig) -> GridPlan:
        return grid_plan(
            scene,
            nx=self.grid_nx,
            ny=self.grid_ny,
            heights=self.grid_heights,
            frames_per_point=self.frames_per_point,
            margin=self.grid_margin,
            rate_hz=self.rate_hz,
            travel_gap_s=self.travel_gap_s,
            hover_jitter_m=self.hover_jitter_m,
        )


def _float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def _finite(text: str) -> float:
    v = _float(text)
    if not math.isfinite(v):
        raise ValueError("value must be finite")
    return v


def _int(text: str) -> int:
    return int(text)


def _tuple(parse: Callable[[str], float], n: int | None = None):
    def inner(text: str):
        parts = [p.strip() for p in text.split(",")]
        if any(not p for p in parts):
            raise ValueError("empty list element")
        if n is not None and len(parts) != n:
            raise ValueError(f"expected {n} comma-separated values, got {len(parts)}")
        return tuple(parse(p) for p in parts)

    return inner


_SCENE_KEYS: dict[str, Callable[[str], object]] = {
    "room_x": _tuple(_finite, 2),
    "room_y": _tuple(_finite, 2),
    "room_z": _tuple(_finite, 2),
    "subcarrier_count": _int,
    "carrier_freq_hz": _finite,
    "subcarrier_spacing_hz": _finite,
    "pathloss_exponent": _finite,
    "ref_loss_db": _finite,
    "multipath_taps": _int,
    "rician_k_db": _finite,
    "noise_floor_db": _float,  # -inf disables noise
    "agc_target_db": _finite,
    "agc_range_db": _tuple(_finite, 2),
    "agc_step_db": _finite,
    "rng_seed": _int,
}

_PLAN_KEYS: dict[str, Callable[[str], object]] = {
    "grid_nx": _int,
    "grid_ny": _int,
    "grid_margin": _finite,
    "grid_heights": _tuple(_finite),
    "frames_per_point": _int,
    "rate_hz": _finite,
    "travel_gap_s": _finite,
    "hover_jitter_m": _finite,
}


def parse_config(text: str, path: str | Path = "<config>") -> tuple[SceneConfig, PlanSettings]:
    scene_kw: dict[str, object] = {}
    plan_kw: dict[str, object] = {}
    sensors: list[Position3D] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(path, lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not value:
            raise ConfigError(path, lineno, f"missing value for {key!r}")
        if key == "sensor":
            try:
                sensors.append(Position3D.from_seq(_tuple(_finite, 3)(value)))
            except ValueError as exc:
                raise ConfigError(path, lineno, f"bad sensor position: {exc}") from None
            continue
        if key in seen:
            raise ConfigError(path, lineno, f"duplicate key {key!r} (first set on line {seen[key]})")
        target = scene_kw if key in _SCENE_KEYS else plan_kw if key in _PLAN_KEYS else None
        if target is None:
            raise ConfigError(path, lineno, f"unknown key {key!r}")
        parse = _SCENE_KEYS.get(key) or _PLAN_KEYS[key]
        try:
            target[key] = parse(value)
        except ValueError as exc:
            raise ConfigError(path, lineno, f"bad value for {key!r}: {exc}") from None
        seen[key] = lineno
    if sensors:
        scene_kw["sensor_positions"] = tuple(sensors)
    try:
        scene = SceneConfig(**scene_kw)
        plan = PlanSettings(**plan_kw)
        plan.build(scene)
    except DomainError as exc:
        raise ConfigError(path, None, str(exc)) from None
    return scene, plan


def load_config(path: str | Path) -> tuple[SceneConfig, PlanSettings]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(path, None, f"cannot read config ({exc.strerror})") from None
    return parse_config(text, path)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(scene: SceneConfig, plan: PlanSettings | None = None) -> str:
    """Render a config that parses back to the same scene and plan."""
    lines = []
    for f in dataclasses.fields(scene):
        if f.name == "sensor_positions":
            lines += [f"sensor = {_fmt((p.x, p.y, p.z))}" for p in scene.sensor_positions]
        else:
            lines.append(f"{f.name} = {_fmt(getattr(scene, f.name))}")
    for f in dataclasses.fields(plan or PlanSettings()):
        lines.append(f"{f.name} = {_fmt(getattr(plan or PlanSettings(), f.name))}")
    return "\n".join(lines) + "\n"


_FAULT_KEYS = {
    "drop_rate": _finite,
    "reorder_rate": _finite,
    "duplicate_rate": _finite,
    "max_delay_ms": _finite,
    "rng_seed": _int,
}


def parse_fault_profile(text: str, path: str | Path = "<faults>") -> dict:
    """Fault profile file in the same ``key = value`` format; returns the fields."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(path, lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FAULT_KEYS:
            raise ConfigError(path, lineno, f"unknown key {key!r}")
        if key in out:
            raise ConfigError(path, lineno, f"duplicate key {key!r}")
        try:
            out[key] = _FAULT_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(path, lineno, f"bad value for {key!r}: {exc}") from None
    return out
