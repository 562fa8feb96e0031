"""Synthetic indoor CSI scenes with AGC distortion.

The channel between a ceiling sensor and the UAV is a line-of-sight ray plus
specular reflections off the first few room surfaces (image sources), each
attenuated by log-distance path loss and jointly scaled to the Rician
K-factor. Frame-to-frame variation comes from the hovering UAV's position
wobble and thermal noise. The receiver AGC then scales the whole frame by a
quantized, clamped gain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CsiFrame, Dataset, DomainError, LabeledSample, Position3D

SPEED_OF_LIGHT = 299_792_458.0
MIN_DISTANCE_M = 0.01
POWER_FLOOR_DB = -120.0

# image-source order; taps are taken from the front of this list
SURFACES = ("floor", "x_min", "x_max", "y_min", "y_max", "ceiling")


@dataclass(frozen=True)
class SceneConfig:
    room_x: tuple[float, float] = (0.0, 5.0)
    room_y: tuple[float, float] = (0.0, 5.0)
    room_z: tuple[float, float] = (0.0, 2.5)
    sensor_positions: tuple[Position3D, ...] = (
        # deliberately asymmetric so no sensor sits on a mirror plane of the room
        Position3D(0.6, 0.4, 2.5),
        Position3D(4.5, 0.9, 2.5),
        Position3D(2.1, 4.6, 2.5),
    )
    subcarrier_count: int = 50
    carrier_freq_hz: float = 2.437e9
    subcarrier_spacing_hz: float = 312_500.0
    pathloss_exponent: float = 2.2
    ref_loss_db: float = 40.0
    multipath_taps: int = 3
    rician_k_db: float = 6.0
    noise_floor_db: float = -75.0
    agc_target_db: float = -25.0
    agc_range_db: tuple[float, float] = (-30.0, 30.0)
    agc_step_db: float = 1.0
    rng_seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "sensor_positions", tuple(self.sensor_positions))
        for name in ("room_x", "room_y", "room_z", "agc_range_db"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not self.sensor_positions:
            raise DomainError("scene needs at least one sensor")
        if self.subcarrier_count < 1:
            raise DomainError("subcarrier_count must be >= 1")
        if not 1.5 <= self.pathloss_exponent <= 6.0:
            raise DomainError(f"pathloss_exponent {self.pathloss_exponent} outside [1.5, 6]")
        if not 0 <= self.multipath_taps <= len(SURFACES):
            raise DomainError(f"multipath_taps must be in [0, {len(SURFACES)}]")
        lo, hi = self.agc_range_db
        if lo > hi:
            raise DomainError("agc_range_db min exceeds max")
        if self.agc_step_db <= 0:
            raise DomainError("agc_step_db must be positive")
        for box in (self.room_x, self.room_y, self.room_z):
            if box[0] >= box[1]:
                raise DomainError(f"degenerate room extent {box}")
        for i, p in enumerate(self.sensor_positions):
            if not self.contains(p):
                raise DomainError(f"sensor {i} at {p} lies outside the room")

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_positions)

    def contains(self, p: Position3D) -> bool:
        return (
            self.room_x[0] <= p.x <= self.room_x[1]
            and self.room_y[0] <= p.y <= self.room_y[1]
            and self.room_z[0] <= p.z <= self.room_z[1]
        )

    def subcarrier_freqs(self) -> np.ndarray:
        k = np.arange(self.subcarrier_count) - (self.subcarrier_count - 1) / 2.0
        return self.carrier_freq_hz + k * self.subcarrier_spacing_hz


@dataclass(frozen=True)
class GridPlan:
    grid_points: tuple[Position3D, ...]
    frames_per_point: int
    rate_hz: float = 50.0
    # idle time between grid points while the UAV repositions
    travel_gap_s: float = 1.0
    # std-dev of the hovering UAV's per-frame position wobble around the grid point
    hover_jitter_m: float = 0.003

    def __post_init__(self):
        object.__setattr__(self, "grid_points", tuple(self.grid_points))
        if self.frames_per_point < 1:
            raise DomainError("frames_per_point must be >= 1")
        if self.rate_hz <= 0:
            raise DomainError("rate_hz must be positive")
        if not self.grid_points:
            raise DomainError("plan has no grid points")
        if self.hover_jitter_m < 0:
            raise DomainError("hover_jitter_m must be non-negative")

    def validate_for(self, scene: SceneConfig) -> None:
        for i, p in enumerate(self.grid_points):
            if not scene.contains(p):
                raise DomainError(f"grid point {i} at {p} lies outside the room")


def grid_plan(
    scene: SceneConfig,
    nx: int = 5,
    ny: int = 5,
    heights: tuple[float, ...] = (0.6, 1.3, 2.0),
    frames_per_point: int = 20,
    margin: float = 0.5,
    rate_hz: float = 50.0,
    travel_gap_s: float = 1.0,
    hover_jitter_m: float = 0.003,
) -> GridPlan:
    """Regular horizontal grid inset by ``margin`` from the walls, repeated at each height."""
    if nx < 1 or ny < 1:
        raise DomainError("grid needs at least one point per axis")
    xs = np.linspace(scene.room_x[0] + margin, scene.room_x[1] - margin, nx) if nx > 1 else [sum(scene.room_x) / 2]
    ys = np.linspace(scene.room_y[0] + margin, scene.room_y[1] - margin, ny) if ny > 1 else [sum(scene.room_y) / 2]
    points = [Position3D(float(x), float(y), float(z)) for z in heights for y in ys for x in xs]
    plan = GridPlan(
        tuple(points), frames_per_point, rate_hz=rate_hz, travel_gap_s=travel_gap_s, hover_jitter_m=hover_jitter_m
    )
    plan.validate_for(scene)
    return plan


def path_amplitude(scene: SceneConfig, distance_m):
    """Linear amplitude after log-distance path loss."""
    d = np.maximum(distance_m, MIN_DISTANCE_M)
    loss_db = scene.ref_loss_db + 10.0 * scene.pathloss_exponent * np.log10(d)
    return 10.0 ** (-loss_db / 20.0)


def _image_source(scene: SceneConfig, p: np.ndarray, surface: str) -> np.ndarray:
    img = p.copy()
    axis, bound = {
        "floor": (2, scene.room_z[0]),
        "ceiling": (2, scene.room_z[1]),
        "x_min": (0, scene.room_x[0]),
        "x_max": (0, scene.room_x[1]),
        "y_min": (1, scene.room_y[0]),
        "y_max": (1, scene.room_y[1]),
    }[surface]
    img[axis] = 2.0 * bound - p[axis]
    return img


def path_lengths(scene: SceneConfig, uav: Position3D, sensor_index: int) -> np.ndarray:
    """Line-of-sight distance followed by one reflected path length per tap."""
    s = scene.sensor_positions[sensor_index].as_array()
    u = uav.as_array()
    lengths = [np.linalg.norm(u - s)]
    for surface in SURFACES[: scene.multipath_taps]:
        lengths.append(np.linalg.norm(u - _image_source(scene, s, surface)))
    return np.maximum(np.array(lengths), MIN_DISTANCE_M)


def true_channel(scene: SceneConfig, uav: Position3D, sensor_index: int, rng: np.random.Generator) -> np.ndarray:
    """Distortion-free CSI of one sensor/UAV link, shape ``(f,)`` complex.

    Reflections are scaled so that line-of-sight power over total reflected
    power equals the Rician K-factor. Only the thermal noise draws from ``rng``.
    """
    if not 0 <= sensor_index < scene.n_sensors:
        raise DomainError(f"sensor_index {sensor_index} out of range")
    if not scene.contains(uav):
        raise DomainError(f"UAV position {uav} lies outside the room")

    freqs = scene.subcarrier_freqs()
    d = path_lengths(scene, uav, sensor_index)
    gains = path_amplitude(scene, d)
    if scene.multipath_taps > 0:
        k_lin = 10.0 ** (scene.rician_k_db / 10.0)
        gains[1:] *= gains[0] / math.sqrt(k_lin * float((gains[1:] ** 2).sum()))
    steering = np.exp(-2j * np.pi * np.outer(d, freqs) / SPEED_OF_LIGHT)  # (paths, f)
    h = gains @ steering
    if math.isfinite(scene.noise_floor_db):
        sigma_n = math.sqrt(10.0 ** (scene.noise_floor_db / 10.0) / 2.0)
        h = h + sigma_n * (rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size))
    return h


def received_power_db(channel: np.ndarray) -> float:
    power = float(np.mean(np.abs(channel) ** 2))
    if power <= 0.0:
        return POWER_FLOOR_DB
    return max(10.0 * math.log10(power), POWER_FLOOR_DB)


def agc_gain_db(channel: np.ndarray, scene: SceneConfig) -> float:
    step = scene.agc_step_db
    lo = math.ceil(scene.agc_range_db[0] / step - 1e-9)
    hi = math.floor(scene.agc_range_db[1] / step + 1e-9)
    steps = round((scene.agc_target_db - received_power_db(channel)) / step)
    return min(max(steps, lo), hi) * step


def apply_agc(channel: np.ndarray, scene: SceneConfig) -> tuple[np.ndarray, float]:
    channel = np.asarray(channel, dtype=np.complex128)
    if channel.size == 0:
        raise ValueError("channel must be non-empty")
    gain = agc_gain_db(channel, scene)
    return channel * 10.0 ** (gain / 20.0), gain


def _frame_rng(seed: int, point: int, frame: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, point, frame]))


def hover_position(scene: SceneConfig, point: Position3D, jitter_m: float, rng: np.random.Generator) -> Position3D:
    """Where the UAV actually is while nominally hovering at ``point``."""
    if jitter_m <= 0:
        return point
    p = point.as_array() + jitter_m * rng.standard_normal(3)
    lo = np.array([scene.room_x[0], scene.room_y[0], scene.room_z[0]])
    hi = np.array([scene.room_x[1], scene.room_y[1], scene.room_z[1]])
    return Position3D.from_seq(np.clip(p, lo, hi))


def generate_dataset(scene: SceneConfig, plan: GridPlan) -> Dataset:
    plan.validate_for(scene)
    period_us = int(round(1e6 / plan.rate_hz))
    gap_us = int(round(plan.travel_gap_s * 1e6))
    samples = []
    counter = 0
    for p_idx, point in enumerate(plan.grid_points):
        for j in range(plan.frames_per_point):
            rng = _frame_rng(scene.rng_seed, p_idx, j)
            ts = counter * period_us + p_idx * gap_us
            actual = hover_position(scene, point, plan.hover_jitter_m, rng)
            frames = []
            for s in range(scene.n_sensors):
                distorted, gain = apply_agc(true_channel(scene, actual, s, rng), scene)
                frames.append(CsiFrame(s, counter, ts, gain, distorted))
            samples.append(LabeledSample(tuple(frames), point))
            counter += 1
    return Dataset(samples, meta={"scene_seed": scene.rng_seed, "points": len(plan.grid_points)})


@dataclass(frozen=True)
class SpikeRecord:
    sample: int
    sensor: int
    subcarrier: int
    original_amp: float

    def to_json(self) -> dict:
        return {
            "sample": self.sample,
            "sensor": self.sensor,
            "subcarrier": self.subcarrier,
            "original_amp": self.original_amp,
        }


def inject_spikes(
    dataset: Dataset, spike_rate: float, spike_gain: float, rng_seed: int
) -> tuple[Dataset, list[SpikeRecord]]:
    """Multiply randomly chosen subcarriers by ``spike_gain``.

    Each (sample, sensor, subcarrier) cell is hit independently with
    probability ``spike_rate``. Returns the new dataset and the injection log.
    """
    if not 0.0 <= spike_rate <= 1.0:
        raise ValueError(f"spike_rate {spike_rate} outside [0, 1]")
    if len(dataset) == 0 or spike_rate == 0.0:
        return dataset, []
    csi = dataset.csi_array()
    rng = np.random.default_rng(rng_seed)
    hit = rng.random(csi.shape) < spike_rate
    idx = np.argwhere(hit)
    log = [SpikeRecord(int(i), int(s), int(k), float(abs(csi[i, s, k]))) for i, s, k in idx]
    csi = csi.copy()
    csi[hit] *= spike_gain
    return dataset.with_csi(csi), log
