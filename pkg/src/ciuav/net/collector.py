"""Datagram collector: dedup, bounded reordering, gap accounting, persistence."""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..core import CsiFrame
from .node import REORDER_WINDOW
from .wire import WireError, decode_frame, is_end_of_stream

log = logging.getLogger(__name__)

STATUS_REQUEST = b"STATUS?"


@dataclass
class SensorState:
    next_seq: int = 0  # everything below is persisted or declared a gap
    last_seq: int = -1  # highest seq seen
    received: int = 0  # distinct data frames accepted
    persisted: int = 0
    gaps: int = 0
    duplicates: int = 0
    late: int = 0  # arrived after being declared a gap
    expected_total: int | None = None  # from the end-of-stream marker
    buffer: dict[int, CsiFrame] = field(default_factory=dict, repr=False)
    gap_seqs: set[int] = field(default_factory=set, repr=False)

    @property
    def complete(self) -> bool:
        return self.expected_total is not None and self.next_seq >= self.expected_total

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("buffer", "gap_seqs")}
        d["buffered"] = len(self.buffer)
        return d


class Collector:
    """Transport-independent collector core.

    Frames are deduplicated on ``(sensor_id, seq)`` and held until every lower
    seq has arrived or the buffer spans ``reorder_window`` frames, at which
    point the missing seq is declared a gap. Persisted frames go to a JSONL
    file in seq order per sensor. Restarting on an existing output resumes
    from each sensor's persisted high-water mark.
    """

    def __init__(self, output_path: str | Path, expected_sensors: int | None = None, reorder_window: int = REORDER_WINDOW):
        if reorder_window < 1:
            raise ValueError("reorder_window must be >= 1")
        self.output_path = Path(output_path)
        self.state_path = self.output_path.with_name(self.output_path.name + ".state.json")
        self.expected_sensors = expected_sensors
        self.reorder_window = reorder_window
        self.sensors: dict[int, SensorState] = {}
        self.decode_errors = 0
        self.datagrams = 0
        self.error: str | None = None
        self._lock = threading.Lock()
        self._resume()
        self._out = open(self.output_path, "a", encoding="utf-8")

    # -- persistence

    def _resume(self) -> None:
        if not self.output_path.exists():
            return
        if self.state_path.exists():
            saved = json.loads(self.state_path.read_text(encoding="utf-8"))
            for sid, st in saved.get("sensors", {}).items():
                keep = {k: st[k] for k in ("next_seq", "last_seq", "received", "persisted", "gaps", "duplicates", "late")}
                self.sensors[int(sid)] = SensorState(**keep, expected_total=st.get("expected_total"))
            self.decode_errors = saved.get("decode_errors", 0)
            self.datagrams = saved.get("datagrams", 0)
        # the data file is authoritative for what was actually written
        with open(self.output_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    st = self.sensors.setdefault(obj["sensor_id"], SensorState())
                    st.next_seq = max(st.next_seq, obj["seq"] + 1)
                    st.last_seq = max(st.last_seq, obj["seq"])

    def _persist(self, frame: CsiFrame) -> None:
        self._out.write(json.dumps(frame.to_json(), separators=(",", ":")))
        self._out.write("\n")

    def flush_state(self) -> None:
        with self._lock:
            self._flush_locked()

    def _flush_locked(self) -> None:
        try:
            self._out.flush()
        except OSError as exc:
            self.error = self.error or f"write failed: {exc}"
        self.state_path.write_text(json.dumps(self._snapshot_locked(), sort_keys=True), encoding="utf-8")

    # -- ingestion

    def ingest(self, datagram: bytes) -> None:
        with self._lock:
            if self.error:
                return
            self.datagrams += 1
            try:
                frame = decode_frame(datagram)
            except WireError as exc:
                self.decode_errors += 1
                log.debug("decode error: %s", exc)
                return
            try:
                self._accept(frame)
            except OSError as exc:
                # disk full or similar: stop accepting, keep what we have
                self.error = f"write failed: {exc}"
                log.error("collector stopped: %s", exc)

    def _accept(self, frame: CsiFrame) -> None:
        st = self.sensors.setdefault(frame.sensor_id, SensorState())
        if is_end_of_stream(frame):
            # the marker follows every data frame, so remaining holes are losses
            st.expected_total = frame.seq
            self._drain(st, frame.sensor_id, final=True)
            return
        s = frame.seq
        st.last_seq = max(st.last_seq, s)
        if s in st.gap_seqs:
            st.late += 1
            return
        if s < st.next_seq or s in st.buffer:
            st.duplicates += 1
            return
        st.received += 1
        st.buffer[s] = frame
        self._drain(st, frame.sensor_id)

    def _drain(self, st: SensorState, sensor_id: int, final: bool = False) -> None:
        while True:
            if st.next_seq in st.buffer:
                self._persist(st.buffer.pop(st.next_seq))
                st.persisted += 1
                st.next_seq += 1
                continue
            overflow = st.buffer and max(st.buffer) - st.next_seq >= self.reorder_window
            ended = st.expected_total is not None and st.next_seq < st.expected_total and final
            trailing_hole = st.buffer and final
            if overflow or ended or trailing_hole:
                st.gaps += 1
                st.gap_seqs.add(st.next_seq)
                st.next_seq += 1
                continue
            break

    def finalize(self) -> None:
        """Quiescence: resolve every remaining hole as a gap and flush."""
        with self._lock:
            for sid, st in self.sensors.items():
                self._drain(st, sid, final=True)
            self._flush_locked()

    def all_complete(self) -> bool:
        with self._lock:
            if self.expected_sensors is not None and len(self.sensors) < self.expected_sensors:
                return False
            return bool(self.sensors) and all(st.complete for st in self.sensors.values())

    # -- reporting

    def _snapshot_locked(self) -> dict:
        return {
            "sensors": {str(k): v.to_json() for k, v in sorted(self.sensors.items())},
            "persisted": sum(st.persisted for st in self.sensors.values()),
            "gaps": sum(st.gaps for st in self.sensors.values()),
            "duplicates": sum(st.duplicates for st in self.sensors.values()),
            "decode_errors": self.decode_errors,
            "datagrams": self.datagrams,
            "error": self.error,
        }

    def snapshot(self) -> dict:
        with self._lock:
            return self._snapshot_locked()

    def status_line(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))

    def close(self) -> None:
        self.finalize()
        with self._lock:
            self._out.close()


class UdpCollector:
    """Runs a :class:`Collector` behind a UDP socket on a background thread.

    A datagram equal to ``STATUS?`` is answered with the status line instead
    of being ingested.
    """

    def __init__(self, collector: Collector, listen_addr: tuple[str, int] = ("127.0.0.1", 0)):
        self.collector = collector
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 22)
        self.sock.bind(listen_addr)
        self.sock.settimeout(0.05)
        self.last_activity = time.monotonic()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="collector", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def start(self) -> "UdpCollector":
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, peer = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            self.last_activity = time.monotonic()
            if data == STATUS_REQUEST:
                self.sock.sendto(self.collector.status_line().encode(), peer)
                continue
            self.collector.ingest(data)
            if self.collector.error:
                break

    def wait_quiescent(self, idle_s: float = 0.5, timeout_s: float = 60.0) -> bool:
        """Block until every expected sensor ended its stream or traffic stops.

        Returns True when all streams completed.
        """
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self.collector.all_complete():
                return True
            if self.collector.error or time.monotonic() - self.last_activity > idle_s:
                return self.collector.all_complete()
            time.sleep(0.01)
        return False

    def stop(self) -> dict:
        self._stop.set()
        self._thread.join()
        self.sock.close()
        self.collector.close()
        return self.collector.snapshot()


def query_status(addr: tuple[str, int], timeout_s: float = 1.0) -> dict:
    """Ask a running collector for its counters."""
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.settimeout(timeout_s)
        s.sendto(STATUS_REQUEST, addr)
        data, _ = s.recvfrom(1 << 20)
    return json.loads(data)


def collector_run(
    listen_addr: tuple[str, int],
    output_path: str | Path,
    expected_sensors: int,
    stop: threading.Event | None = None,
    idle_s: float = 2.0,
    timeout_s: float | None = None,
) -> dict:
    """Serve until all expected sensors finish, traffic idles, or ``stop`` is set."""
    server = UdpCollector(Collector(output_path, expected_sensors), listen_addr).start()
    started = time.monotonic()
    try:
        while not (stop is not None and stop.is_set()):
            if server.collector.all_complete() or server.collector.error:
                break
            idle = time.monotonic() - server.last_activity
            if server.collector.datagrams and idle > idle_s:
                break
            if timeout_s is not None and time.monotonic() - started > timeout_s:
                break
            time.sleep(0.01)
    finally:
        state = server.stop()
    return state
