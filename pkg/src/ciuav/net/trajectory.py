"""UAV trajectories: timestamped waypoints with linear interpolation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import Position3D
from ..synth import GridPlan


@dataclass(frozen=True, eq=False)
class Trajectory:
    times_us: np.ndarray  # (K,), non-decreasing
    points: np.ndarray  # (K, 3)

    def __post_init__(self):
        t = np.asarray(self.times_us, dtype=np.int64).reshape(-1)
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if t.size == 0:
            raise ValueError("trajectory has no waypoints")
        if t.size != p.shape[0]:
            raise ValueError("times and points differ in length")
        if (np.diff(t) < 0).any():
            raise ValueError("trajectory timestamps must be non-decreasing")
        object.__setattr__(self, "times_us", t)
        object.__setattr__(self, "points", p)

    @classmethod
    def from_waypoints(cls, waypoints) -> "Trajectory":
        """Build from an iterable of ``(timestamp_us, Position3D)`` pairs."""
        pairs = list(waypoints)
        return cls(np.array([t for t, _ in pairs]), np.array([p.as_array() for _, p in pairs]))

    @property
    def start_us(self) -> int:
        return int(self.times_us[0])

    @property
    def end_us(self) -> int:
        return int(self.times_us[-1])

    def covers(self, t_us) -> np.ndarray | bool:
        return (np.asarray(t_us) >= self.start_us) & (np.asarray(t_us) <= self.end_us)

    def position_at(self, t_us: float) -> Position3D:
        return Position3D.from_seq(self.positions_at(np.array([t_us]))[0])

    def positions_at(self, t_us: np.ndarray) -> np.ndarray:
        """Linear interpolation; callers must stay within the covered range."""
        t = np.asarray(t_us, dtype=np.float64)
        if not np.all(self.covers(t)):
            raise ValueError("timestamp outside the trajectory")
        tt = self.times_us.astype(np.float64)
        return np.stack([np.interp(t, tt, self.points[:, k]) for k in range(3)], axis=-1)


def plan_trajectory(plan: GridPlan) -> Trajectory:
    """Hover at each grid point for its frames, then fly straight to the next.

    Uses the same timing as the synthetic dataset generator, so frames from a
    simulated sensor line up with generated samples.
    """
    period_us = int(round(1e6 / plan.rate_hz))
    gap_us = int(round(plan.travel_gap_s * 1e6))
    times, points = [], []
    for k, p in enumerate(plan.grid_points):
        start = k * (plan.frames_per_point * period_us + gap_us)
        end = start + (plan.frames_per_point - 1) * period_us
        times += [start, end]
        points += [p.as_array(), p.as_array()]
    return Trajectory(np.array(times), np.array(points))


def write_trajectory(traj: Trajectory, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_us", "x", "y", "z"])
        for t, p in zip(traj.times_us, traj.points):
            w.writerow([int(t), *(repr(float(v)) for v in p)])


def read_trajectory(path: str | Path) -> Trajectory:
    times, points = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp_us", "x", "y", "z"]:
            raise ValueError(f"{path}:1: expected header timestamp_us,x,y,z")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                t, x, y, z = row
                times.append(int(t))
                points.append([float(x), float(y), float(z)])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad waypoint {row!r}") from exc
    return Trajectory(np.array(times, dtype=np.int64), np.array(points))
