"""Simulated sensor node: captures CSI for the UAV's position and streams it."""

from __future__ import annotations

import logging
import math
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..core import CsiFrame
from ..synth import SceneConfig, apply_agc, true_channel
from .trajectory import Trajectory
from .wire import encode_frame_ex, end_of_stream

log = logging.getLogger(__name__)

REORDER_WINDOW = 64


@dataclass(frozen=True)
class FaultProfile:
    drop_rate: float = 0.0
    reorder_rate: float = 0.0
    duplicate_rate: float = 0.0
    max_delay_ms: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("drop_rate", "reorder_rate", "duplicate_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} {v} outside [0, 1]")
        if self.max_delay_ms < 0:
            raise ValueError("max_delay_ms must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SendStats:
    sensor_id: int
    generated: int = 0
    sent: int = 0  # distinct frames put on the wire
    dropped: int = 0
    duplicated: int = 0
    reordered: int = 0
    datagrams: int = 0
    saturated: int = 0
    send_errors: int = 0
    unreachable: bool = False
    interrupted: bool = False

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class _Fate:
    drop: bool
    copies: int
    delay_ticks: int


class FaultInjector:
    """Per-frame fault decisions from a dedicated random stream.

    Every frame consumes the same number of draws whatever its fate, so the
    pattern for frame k depends only on the seed and k.
    """

    def __init__(self, profile: FaultProfile, sensor_id: int, rate_hz: float):
        self.profile = profile
        self._rng = np.random.default_rng(np.random.SeedSequence([profile.rng_seed, sensor_id]))
        ticks = math.ceil(profile.max_delay_ms * rate_hz / 1000.0)
        self.max_delay_ticks = min(max(ticks, 1), REORDER_WINDOW - 1)

    def next(self) -> _Fate:
        u_drop, u_dup, u_re = self._rng.random(3)
        delay = int(self._rng.integers(1, self.max_delay_ticks + 1))
        p = self.profile
        return _Fate(
            drop=bool(u_drop < p.drop_rate),
            copies=2 if u_dup < p.duplicate_rate else 1,
            delay_ticks=delay if u_re < p.reorder_rate else 0,
        )


class UdpSender:
    """Connected UDP socket with bounded retry on refusal."""

    def __init__(self, addr: tuple[str, int], retries: int = 4, backoff_s: float = 0.01):
        self.addr = addr
        self.retries = retries
        self.backoff_s = backoff_s
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.connect(addr)

    def __call__(self, data: bytes) -> None:
        delay = self.backoff_s
        for attempt in range(self.retries + 1):
            try:
                self.sock.send(data)
                return
            except (ConnectionRefusedError, BlockingIOError):
                if attempt == self.retries:
                    raise
                time.sleep(delay)
                delay *= 2

    def close(self) -> None:
        self.sock.close()


def capture_frame(scene: SceneConfig, sensor_index: int, seq: int, timestamp_us: int, trajectory: Trajectory) -> CsiFrame:
    """One simulated ping/reply exchange: the CSI the sensor sees at this instant."""
    pos = trajectory.position_at(timestamp_us)
    rng = np.random.default_rng(np.random.SeedSequence([scene.rng_seed, sensor_index, seq]))
    distorted, gain = apply_agc(true_channel(scene, pos, sensor_index, rng), scene)
    return CsiFrame(sensor_index, seq, timestamp_us, gain, distorted)


def tick_times(trajectory: Trajectory, rate_hz: float, n_ticks: int | None = None) -> np.ndarray:
    """Capture instants from the trajectory start at ``rate_hz``.

    Without ``n_ticks`` the node runs until the trajectory ends.
    """
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    period = 1e6 / rate_hz
    if n_ticks is None:
        n_ticks = int((trajectory.end_us - trajectory.start_us) // period) + 1
    t = trajectory.start_us + np.round(np.arange(n_ticks) * period).astype(np.int64)
    if n_ticks and t[-1] > trajectory.end_us:
        raise ValueError(f"{n_ticks} ticks at {rate_hz} Hz run past the end of the trajectory")
    return t


def sensor_node_run(
    scene: SceneConfig,
    sensor_index: int,
    trajectory: Trajectory,
    rate_hz: float,
    collector_addr: tuple[str, int] | None,
    faults: FaultProfile | None = None,
    n_ticks: int | None = None,
    realtime: bool = False,
    send: Callable[[bytes], None] | None = None,
    stop: threading.Event | None = None,
    eos_copies: int = 3,
) -> SendStats:
    """Capture and stream frames through the fault layer, then an end marker.

    ``send`` overrides the UDP transport (useful for in-process tests). In
    non-realtime mode ticks are emitted back to back with a short pause so
    the receiver keeps up. The end-of-stream marker bypasses the fault layer.
    """
    faults = faults or FaultProfile()
    injector = FaultInjector(faults, sensor_index, rate_hz)
    stats = SendStats(sensor_id=sensor_index)
    times = tick_times(trajectory, rate_hz, n_ticks)
    owned = None
    if send is None:
        if collector_addr is None:
            raise ValueError("need a collector address or a send callable")
        owned = send = UdpSender(collector_addr)
    pause = 1.0 / rate_hz if realtime else 2e-4

    pending: dict[int, list[tuple[int, bytes]]] = {}
    max_seq_out = -1
    reordered: set[int] = set()

    def emit(seq: int, data: bytes) -> None:
        nonlocal max_seq_out
        if seq < max_seq_out:
            reordered.add(seq)
        max_seq_out = max(max_seq_out, seq)
        send(data)
        stats.datagrams += 1

    try:
        last = len(times) - 1
        for tick in range(len(times) + injector.max_delay_ticks):
            if stop is not None and stop.is_set():
                stats.interrupted = True
                break
            if tick <= last:
                frame = capture_frame(scene, sensor_index, tick, int(times[tick]), trajectory)
                stats.generated += 1
                fate = injector.next()
                if fate.drop:
                    stats.dropped += 1
                else:
                    enc = encode_frame_ex(frame)
                    data = enc.data
                    stats.saturated += enc.saturated
                    stats.sent += 1
                    stats.duplicated += fate.copies - 1
                    release = tick + fate.delay_ticks
                    pending.setdefault(release, []).extend([(tick, data)] * fate.copies)
            for seq, data in sorted(pending.pop(tick, []), key=lambda item: item[0]):
                emit(seq, data)
            if tick >= last and not pending:
                break
            time.sleep(pause)
        if not stats.interrupted:
            end_ts = int(times[-1]) if len(times) else trajectory.start_us
            marker = end_of_stream(sensor_index, stats.generated, end_ts)
            for _ in range(eos_copies):
                send(marker)
                time.sleep(pause)
    except OSError as exc:
        log.warning("sensor %d: collector unreachable (%s)", sensor_index, exc)
        stats.send_errors += 1
        stats.unreachable = True
    finally:
        if owned is not None:
            owned.close()
    stats.reordered = len(reordered)
    return stats
