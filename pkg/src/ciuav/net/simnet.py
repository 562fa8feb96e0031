"""End-to-end network simulation: sensor threads streaming to a collector."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

from ..synth import SceneConfig
from .collector import Collector, UdpCollector
from .node import FaultProfile, SendStats, sensor_node_run
from .trajectory import Trajectory


@dataclass
class SimnetResult:
    node_stats: list[SendStats]
    collector: dict | None  # None when streaming to an external collector
    completed: bool
    interrupted: bool = False

    def conserved(self) -> bool:
        """Every generated frame is either persisted or counted as a gap."""
        if self.collector is None:
            return False
        generated = sum(s.generated for s in self.node_stats)
        return self.collector["persisted"] + self.collector["gaps"] == generated

    def to_json(self) -> dict:
        return {
            "nodes": [s.to_json() for s in self.node_stats],
            "collector": self.collector,
            "completed": self.completed,
            "interrupted": self.interrupted,
            "totals": {
                k: sum(getattr(s, k) for s in self.node_stats)
                for k in ("generated", "sent", "dropped", "duplicated", "reordered", "datagrams")
            },
        }


def run_simnet(
    scene: SceneConfig,
    trajectory: Trajectory,
    output_path: str | Path | None,
    n_sensors: int | None = None,
    faults: FaultProfile | None = None,
    n_ticks: int | None = None,
    rate_hz: float = 50.0,
    realtime: bool = False,
    collector_addr: tuple[str, int] | None = None,
    stop: threading.Event | None = None,
    idle_s: float = 1.0,
) -> SimnetResult:
    """Run one thread per sensor against a local or external collector.

    With ``collector_addr`` the frames go to an already running collector and
    nothing is persisted here. ``stop`` interrupts the sensors; the local
    collector still resolves gaps and flushes its state before returning.
    """
    n_sensors = scene.n_sensors if n_sensors is None else n_sensors
    if not 1 <= n_sensors <= scene.n_sensors:
        raise ValueError(f"scene defines {scene.n_sensors} sensors, asked for {n_sensors}")
    stop = stop or threading.Event()
    server = None
    if collector_addr is None:
        if output_path is None:
            raise ValueError("need an output path for the local collector")
        server = UdpCollector(Collector(output_path, n_sensors)).start()
        collector_addr = server.address

    stats: list[SendStats | None] = [None] * n_sensors

    def node(s: int) -> None:
        stats[s] = sensor_node_run(
            scene, s, trajectory, rate_hz, collector_addr, faults, n_ticks=n_ticks, realtime=realtime, stop=stop
        )

    threads = [threading.Thread(target=node, args=(s,), name=f"sensor-{s}", daemon=True) for s in range(n_sensors)]
    for t in threads:
        t.start()
    try:
        for t in threads:
            while t.is_alive():
                t.join(0.1)
    except KeyboardInterrupt:
        stop.set()
        for t in threads:
            t.join()
    interrupted = stop.is_set()
    completed = False
    state = None
    if server is not None:
        completed = False if interrupted else server.wait_quiescent(idle_s=idle_s)
        state = server.stop()
    node_stats = [s if s is not None else SendStats(sensor_id=i, interrupted=True) for i, s in enumerate(stats)]
    return SimnetResult(node_stats, state, completed, interrupted)
