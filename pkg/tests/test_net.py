import json
import math
import threading

import numpy as np
import pytest

from ciuav.core import CsiFrame, Position3D
from ciuav.net.collector import Collector, UdpCollector, query_status
from ciuav.net.join import join_labels, read_frames
from ciuav.net.node import FaultProfile, capture_frame, sensor_node_run, tick_times
from ciuav.net.simnet import run_simnet
from ciuav.net.trajectory import Trajectory, plan_trajectory, read_trajectory, write_trajectory
from ciuav.net.wire import decode_frame, encode_frame, is_end_of_stream
from ciuav.synth import SceneConfig, generate_dataset, grid_plan

SCENE = SceneConfig()
LINE = Trajectory.from_waypoints([(0, Position3D(0.5, 0.5, 1.0)), (100_000_000, Position3D(4.5, 4.5, 2.0))])


def run_node(sensor=0, n=100, faults=None):
    sent = []
    stats = sensor_node_run(SCENE, sensor, LINE, 50.0, None, faults, n_ticks=n, send=sent.append)
    return stats, sent


def data_frames(datagrams):
    return [f for f in map(decode_frame, datagrams) if not is_end_of_stream(f)]


# ------------------------------------------------------------------ trajectory


def test_trajectory_interpolation():
    traj = Trajectory.from_waypoints([(0, Position3D(0, 0, 0)), (1000, Position3D(2, 4, 6))])
    assert traj.position_at(500) == Position3D(1, 2, 3)
    with pytest.raises(ValueError):
        traj.position_at(1001)
    with pytest.raises(ValueError):
        Trajectory(np.array([5, 1]), np.zeros((2, 3)))


def test_trajectory_csv_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    write_trajectory(LINE, path)
    back = read_trajectory(path)
    np.testing.assert_array_equal(back.times_us, LINE.times_us)
    np.testing.assert_array_equal(back.points, LINE.points)
    path.write_text("timestamp_us,x,y,z\n0,1,2,3\n10,oops,2,3\n")
    with pytest.raises(ValueError, match=r"t.csv:3"):
        read_trajectory(path)


def test_plan_trajectory_matches_generator_labels():
    plan = grid_plan(SCENE, nx=2, ny=2, heights=(1.0,), frames_per_point=3, hover_jitter_m=0.0)
    traj = plan_trajectory(plan)
    ds = generate_dataset(SCENE, plan)
    for smp in ds.samples:
        assert traj.position_at(smp.frames[0].timestamp_us) == smp.truth


def test_capture_matches_trajectory_position():
    fr = capture_frame(SCENE, 1, 5, 2_000_000, LINE)
    assert fr.sensor_id == 1 and fr.seq == 5 and fr.n_sub == SCENE.subcarrier_count
    assert fr.same_as(capture_frame(SCENE, 1, 5, 2_000_000, LINE))


# ------------------------------------------------------------------ sensor node


def test_fault_free_node_sends_every_frame_in_order():
    stats, sent = run_node(n=100)
    frames = data_frames(sent)
    assert [f.seq for f in frames] == list(range(100))
    assert stats.generated == stats.sent == 100 and stats.dropped == stats.duplicated == 0
    assert sum(is_end_of_stream(decode_frame(d)) for d in sent) == 3
    ts = [f.timestamp_us for f in frames]
    assert ts == list(tick_times(LINE, 50.0, 100))


def test_drop_rate_binomial():
    stats, sent = run_node(n=1000, faults=FaultProfile(drop_rate=0.5, rng_seed=3))
    assert abs(stats.sent - 500) <= 3 * math.sqrt(1000 * 0.25)
    assert stats.sent + stats.dropped == 1000
    assert len(data_frames(sent)) == stats.sent


def test_duplicate_everything():
    stats, sent = run_node(n=100, faults=FaultProfile(duplicate_rate=1.0, rng_seed=1))
    seqs = [f.seq for f in data_frames(sent)]
    assert stats.duplicated == 100 and sorted(seqs) == sorted(list(range(100)) * 2)


def test_reordering_is_bounded_and_counted():
    stats, sent = run_node(n=300, faults=FaultProfile(reorder_rate=0.3, max_delay_ms=200, rng_seed=2))
    seqs = [f.seq for f in data_frames(sent)]
    assert sorted(seqs) == list(range(300))
    assert seqs != sorted(seqs) and stats.reordered > 0
    # a frame is never overtaken by one more than the delay bound ahead of it
    for pos, s in enumerate(seqs):
        assert max(seqs[: pos + 1]) - s <= 10


def test_fault_pattern_is_deterministic():
    faults = FaultProfile(drop_rate=0.2, reorder_rate=0.2, duplicate_rate=0.2, max_delay_ms=100, rng_seed=9)
    a = run_node(n=200, faults=faults)
    b = run_node(n=200, faults=faults)
    assert a[1] == b[1] and a[0] == b[0]
    c = run_node(n=200, faults=FaultProfile(drop_rate=0.2, rng_seed=10))
    assert c[1] != a[1]


def test_unreachable_collector_is_reported():
    def refuse(_data):
        raise ConnectionRefusedError("no listener")

    stats = sensor_node_run(SCENE, 0, LINE, 50.0, None, n_ticks=10, send=refuse)
    assert stats.unreachable and stats.send_errors == 1


def test_fault_profile_validation():
    with pytest.raises(ValueError):
        FaultProfile(drop_rate=1.5)
    with pytest.raises(ValueError):
        FaultProfile(max_delay_ms=-1)


# ------------------------------------------------------------------ collector


def feed(collector, datagrams):
    for d in datagrams:
        collector.ingest(d)


def test_collector_persists_three_clean_streams(tmp_path):
    col = Collector(tmp_path / "f.jsonl", expected_sensors=3)
    for s in range(3):
        feed(col, run_node(sensor=s, n=100)[1])
    assert col.all_complete()
    col.close()
    snap = col.snapshot()
    assert (snap["persisted"], snap["gaps"], snap["duplicates"]) == (300, 0, 0)
    assert len(read_frames(tmp_path / "f.jsonl")) == 300


def test_collector_deduplicates(tmp_path):
    col = Collector(tmp_path / "f.jsonl")
    feed(col, run_node(n=100, faults=FaultProfile(duplicate_rate=1.0))[1])
    col.close()
    st = col.snapshot()["sensors"]["0"]
    assert st["persisted"] == 100 and st["duplicates"] == 100


def test_conservation_under_faults(tmp_path):
    col = Collector(tmp_path / "f.jsonl")
    faults = FaultProfile(drop_rate=0.1, reorder_rate=0.2, duplicate_rate=0.1, max_delay_ms=100, rng_seed=7)
    all_stats = []
    for s in range(3):
        stats, sent = run_node(sensor=s, n=500, faults=faults)
        all_stats.append(stats)
        feed(col, sent)
    col.close()
    for stats in all_stats:
        st = col.snapshot()["sensors"][str(stats.sensor_id)]
        assert st["persisted"] + st["gaps"] == stats.generated
        assert st["persisted"] == stats.sent and st["gaps"] == stats.dropped
        assert st["duplicates"] == stats.duplicated


def test_persisted_frames_are_in_seq_order(tmp_path):
    col = Collector(tmp_path / "f.jsonl")
    feed(col, run_node(n=200, faults=FaultProfile(reorder_rate=0.5, max_delay_ms=300, rng_seed=4))[1])
    col.close()
    seqs = [f.seq for f in read_frames(tmp_path / "f.jsonl")]
    assert seqs == list(range(200))


def test_reorder_window_overflow_declares_gap(tmp_path):
    col = Collector(tmp_path / "f.jsonl", reorder_window=4)
    frames = [CsiFrame(0, s, s * 20_000, 0.0, np.ones(2)) for s in range(10)]
    feed(col, [encode_frame(f) for f in frames if f.seq != 2])
    st = col.snapshot()["sensors"]["0"]
    assert st["gaps"] == 1 and st["persisted"] == 9
    col.ingest(encode_frame(frames[2]))
    assert col.snapshot()["sensors"]["0"]["late"] == 1
    col.close()


def test_replay_is_byte_identical(tmp_path):
    faults = FaultProfile(drop_rate=0.1, reorder_rate=0.3, duplicate_rate=0.3, max_delay_ms=100, rng_seed=5)
    log = []
    for s in range(3):
        log += run_node(sensor=s, n=200, faults=faults)[1]
    outputs = []
    for name in ("a.jsonl", "b.jsonl"):
        col = Collector(tmp_path / name)
        feed(col, log)
        col.close()
        outputs.append((tmp_path / name).read_bytes())
    assert outputs[0] == outputs[1]
    # replaying the same log into the same file changes nothing either
    col = Collector(tmp_path / "a.jsonl")
    feed(col, log)
    col.close()
    assert (tmp_path / "a.jsonl").read_bytes() == outputs[0]


def test_restart_resumes_from_high_water_mark(tmp_path):
    _, sent = run_node(n=100)
    col = Collector(tmp_path / "f.jsonl")
    feed(col, sent[:50])
    col.flush_state()
    col._out.close()  # simulated crash: no finalize
    col = Collector(tmp_path / "f.jsonl")
    feed(col, sent)
    col.close()
    seqs = [f.seq for f in read_frames(tmp_path / "f.jsonl")]
    assert seqs == list(range(100))


def test_decode_errors_are_counted_not_fatal(tmp_path):
    col = Collector(tmp_path / "f.jsonl")
    _, sent = run_node(n=20)
    feed(col, [b"garbage", sent[0][:-1], *sent])
    col.close()
    snap = col.snapshot()
    assert snap["decode_errors"] == 2 and snap["persisted"] == 20


def test_write_failure_stops_cleanly(tmp_path):
    col = Collector(tmp_path / "f.jsonl")

    def broken(_frame):
        raise OSError(28, "No space left on device")

    col._persist = broken
    _, sent = run_node(n=5)
    feed(col, sent)
    assert col.error and "No space" in col.error
    assert col.state_path.parent.exists()
    col.finalize()
    assert json.loads(col.state_path.read_text())["error"] == col.error


def test_udp_collector_answers_status(tmp_path):
    server = UdpCollector(Collector(tmp_path / "f.jsonl", 1)).start()
    try:
        stats = sensor_node_run(SCENE, 0, LINE, 50.0, server.address, n_ticks=30)
        assert server.wait_quiescent(idle_s=1.0, timeout_s=20)
        status = query_status(server.address)
        assert status["persisted"] == 30 and status["sensors"]["0"]["expected_total"] == 30
    finally:
        snap = server.stop()
    assert stats.sent == 30 and snap["gaps"] == 0


# ------------------------------------------------------------------ join


def aligned_frames(n=10, sensors=3):
    return [
        CsiFrame(s, k, k * 20_000 + 300 * s, 0.0, np.full(4, 1.0 + s)) for k in range(n) for s in range(sensors)
    ]


def test_join_aligned():
    traj = Trajectory.from_waypoints([(0, Position3D(0, 0, 0)), (200_000, Position3D(2, 0, 0))])
    ds, stats = join_labels(aligned_frames(), traj, 3)
    assert len(ds) == 10 and stats.complete == 10 and stats.incomplete_dropped == 0
    assert all(not s.missing for s in ds.samples)
    assert ds.samples[1].truth.x == pytest.approx((20_000 + 300) / 100_000)


def test_join_one_silent_sensor():
    frames = [f for f in aligned_frames() if f.sensor_id != 1]
    ds, stats = join_labels(frames, LINE, 3)
    assert len(ds) == 0 and stats.incomplete_dropped == 10
    ds, stats = join_labels(frames, LINE, 3, keep_incomplete=True)
    assert len(ds) == 10 and all(s.missing == (1,) for s in ds.samples)
    assert all(s.frames[1].seq == -1 and not s.frames[1].subcarriers.any() for s in ds.samples)


def test_join_midpoint_label():
    traj = Trajectory.from_waypoints([(0, Position3D(1, 1, 1)), (1000, Position3D(3, 5, 2))])
    frames = [CsiFrame(s, 0, 500, 0.0, np.ones(2)) for s in range(3)]
    ds, _ = join_labels(frames, traj, 3)
    assert ds.samples[0].truth == Position3D(2, 3, 1.5)


def test_join_counts_out_of_range():
    traj = Trajectory.from_waypoints([(0, Position3D(0, 0, 0)), (100_000, Position3D(1, 0, 0))])
    ds, stats = join_labels(aligned_frames(), traj, 3)
    # ticks 6..9 fall past the end; at tick 5 only sensor 0 lands exactly on the last waypoint
    assert stats.out_of_range == 3 * 4 + 2
    assert len(ds) == 5 and stats.incomplete_dropped == 1


# ------------------------------------------------------------------ end to end


def test_simnet_three_sensors(tmp_path):
    res = run_simnet(SCENE, LINE, tmp_path / "f.jsonl", n_ticks=100)
    assert res.completed and res.conserved()
    assert res.collector["persisted"] == 300 and res.collector["gaps"] == 0
    ds, stats = join_labels(read_frames(tmp_path / "f.jsonl"), LINE, 3)
    assert len(ds) == 100 and stats.complete == 100


def test_simnet_conservation_with_drops(tmp_path):
    faults = FaultProfile(drop_rate=0.1, reorder_rate=0.1, duplicate_rate=0.05, max_delay_ms=60, rng_seed=11)
    res = run_simnet(SCENE, LINE, tmp_path / "f.jsonl", faults=faults, n_ticks=400)
    assert res.conserved()
    assert res.collector["persisted"] == sum(s.sent for s in res.node_stats)


def test_simnet_stop_flushes_state(tmp_path):
    stop = threading.Event()
    timer = threading.Timer(0.3, stop.set)
    timer.start()
    res = run_simnet(SCENE, LINE, tmp_path / "f.jsonl", realtime=True, stop=stop)
    timer.cancel()
    assert res.interrupted and not res.completed
    state = json.loads((tmp_path / "f.jsonl.state.json").read_text())
    assert state["persisted"] == res.collector["persisted"] > 0
