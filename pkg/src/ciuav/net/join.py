"""Join persisted sensor frames with the UAV trajectory into labeled samples."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ..core import CsiFrame, Dataset, LabeledSample, Position3D
from .trajectory import Trajectory

# half the frame period at 50 Hz
DEFAULT_TOLERANCE_US = 10_000


@dataclass
class JoinStats:
    frames: int = 0
    out_of_range: int = 0
    groups: int = 0
    complete: int = 0
    incomplete_kept: int = 0
    incomplete_dropped: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def read_frames(path: str | Path) -> list[CsiFrame]:
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frames.append(CsiFrame.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed frame ({exc})") from exc
    return frames


def _group(frames: list[CsiFrame], tolerance_us: int) -> list[list[CsiFrame]]:
    """Cluster time-sorted frames; a group spans at most ``tolerance_us`` and
    holds one frame per sensor."""
    groups: list[list[CsiFrame]] = []
    for fr in sorted(frames, key=lambda f: (f.timestamp_us, f.sensor_id, f.seq)):
        cur = groups[-1] if groups else None
        if (
            cur is not None
            and fr.timestamp_us - cur[0].timestamp_us <= tolerance_us
            and all(g.sensor_id != fr.sensor_id for g in cur)
        ):
            cur.append(fr)
        else:
            groups.append([fr])
    return groups


def join_labels(
    frames: Iterable[CsiFrame],
    trajectory: Trajectory,
    n_sensors: int | None = None,
    tolerance_us: int = DEFAULT_TOLERANCE_US,
    keep_incomplete: bool = False,
) -> tuple[Dataset, JoinStats]:
    """Group frames by capture instant and label each group from the trajectory.

    The label is the trajectory interpolated at the mean timestamp of the
    group. Groups missing a sensor are dropped, or with ``keep_incomplete``
    zero-filled (seq -1, gain 0) and listed in ``LabeledSample.missing``.
    Frames outside the trajectory's time range are excluded and counted.
    """
    frames = list(frames)
    stats = JoinStats(frames=len(frames))
    if not frames:
        return Dataset([], meta={"join": stats.to_json()}), stats
    if n_sensors is None:
        n_sensors = max(f.sensor_id for f in frames) + 1
    n_sub = frames[0].n_sub
    inside = []
    for fr in frames:
        if fr.n_sub != n_sub:
            raise ValueError(f"frame ({fr.sensor_id}, {fr.seq}) has {fr.n_sub} subcarriers, expected {n_sub}")
        if not 0 <= fr.sensor_id < n_sensors:
            raise ValueError(f"sensor_id {fr.sensor_id} outside [0, {n_sensors})")
        if trajectory.covers(fr.timestamp_us):
            inside.append(fr)
        else:
            stats.out_of_range += 1

    samples = []
    for group in _group(inside, tolerance_us):
        stats.groups += 1
        instant = float(np.mean([g.timestamp_us for g in group]))
        by_sensor = {g.sensor_id: g for g in group}
        missing = tuple(s for s in range(n_sensors) if s not in by_sensor)
        if missing and not keep_incomplete:
            stats.incomplete_dropped += 1
            continue
        if missing:
            stats.incomplete_kept += 1
        else:
            stats.complete += 1
        ts = int(round(instant))
        row = tuple(
            by_sensor.get(s) or CsiFrame(s, -1, ts, 0.0, np.zeros(n_sub, dtype=np.complex128))
            for s in range(n_sensors)
        )
        samples.append(LabeledSample(row, trajectory.position_at(instant), missing))
    return Dataset(samples, meta={"join": stats.to_json()}), stats
