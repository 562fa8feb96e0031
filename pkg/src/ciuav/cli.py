"""``ciuav`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import signal
import sys
import threading
from pathlib import Path

from . import pipeline
from .config import ConfigError, PlanSettings, load_config, parse_fault_profile
from .core import DomainError, ShapeError
from .dsp import HampelParams
from .model import NumericError
from .synth import SceneConfig
from .trainer import DEFAULT_FRACTIONS, DEFAULT_SENSOR_CONFIGS, TrainingError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("ciuav")


class UsageError(Exception):
    """Bad flags or unusable inputs; maps to exit code 2."""


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _csv_list(text: str) -> tuple[str, ...]:
    items = tuple(t.strip() for t in text.split(",") if t.strip())
    if not items:
        raise argparse.ArgumentTypeError("empty list")
    return items


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in _csv_list(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in _csv_list(text))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ------------------------------------------------------------------ scene


def _scene_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scene")
    g.add_argument("--config", help="scene/plan config file (key = value lines)")
    g.add_argument("--frames-per-point", type=int)
    g.add_argument("--grid-nx", type=int)
    g.add_argument("--grid-ny", type=int)
    g.add_argument("--heights", type=_float_list, help="comma-separated UAV heights in meters")
    g.add_argument("--hover-jitter", type=float, help="hover wobble std-dev in meters")


def _load_scene(args) -> tuple[SceneConfig, PlanSettings]:
    if args.config:
        scene, plan = load_config(args.config)
    else:
        scene, plan = SceneConfig(), PlanSettings()
    overrides = {
        "frames_per_point": args.frames_per_point,
        "grid_nx": args.grid_nx,
        "grid_ny": args.grid_ny,
        "grid_heights": args.heights,
        "hover_jitter_m": args.hover_jitter,
    }
    plan = dataclasses.replace(plan, **{k: v for k, v in overrides.items() if v is not None})
    try:
        plan.build(scene)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    return scene, plan


# ------------------------------------------------------------------ training flags


def _train_args(p: argparse.ArgumentParser, fractions: bool = True) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--subsets", type=_csv_list, default=DEFAULT_SENSOR_CONFIGS, help="e.g. 1,3,1-3,1-2-3")
    if fractions:
        g.add_argument("--fractions", type=_float_list, default=(1.0,))
    g.add_argument("--epochs", type=int, default=200)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--task-sampling", choices=("round-robin", "proportional"), default="round-robin")
    g.add_argument("--feature-dim", type=int, default=128)
    g.add_argument("--hidden", type=_int_list, default=(256, 256))
    g.add_argument("--lambda-s", type=float, default=0.01)
    g.add_argument("--lambda-v", type=float, default=0.1)
    g.add_argument("--log-every", type=int, default=10)
    g.add_argument("--dac", type=_on_off, default=True, metavar="on|off")
    g.add_argument("--hampel", type=_on_off, default=True, metavar="on|off")


def _train_options(args, fractions=None) -> pipeline.TrainOptions:
    if args.epochs < 1 or args.batch_size < 1 or args.log_every < 1:
        raise UsageError("--epochs, --batch-size and --log-every must be positive")
    if not (args.lr > 0 and math.isfinite(args.lr)):
        raise UsageError("--lr must be positive and finite")
    if args.lambda_s < 0 or args.lambda_v < 0:
        raise UsageError("--lambda-s and --lambda-v must be non-negative")
    return pipeline.TrainOptions(
        subsets=tuple(args.subsets),
        fractions=tuple(fractions or getattr(args, "fractions", (1.0,))),
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        task_sampling=args.task_sampling,
        feature_dim=args.feature_dim,
        hidden_dims=tuple(args.hidden),
        lambda_s=args.lambda_s,
        lambda_v=args.lambda_v,
        log_every=args.log_every,
        dac=args.dac,
        hampel=args.hampel,
    )


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    if args.frames_per_point is not None and args.frames_per_point < 1:
        raise UsageError("--frames-per-point must be >= 1")
    if not 0.0 <= args.spike_rate <= 1.0:
        raise UsageError("--spike-rate must lie in [0, 1]")
    scene, plan = _load_scene(args)
    # without --seed the config's own rng_seed drives the scene
    summary = pipeline.generate_to(scene, plan, args.out, args.spike_rate, args.spike_gain, args.seed)
    print(f"N={summary['N']} S={summary['S']} f={summary['f']} spikes={summary['spikes']} -> {summary['out']}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    src = _existing(args.input)
    hp = HampelParams(window_half=args.window_half, k_mad=args.k_mad)
    summary = pipeline.preprocess_to(src, args.out, args.dac, args.hampel, hp)
    _emit(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    src = _existing(args.data)
    summary = pipeline.train_to(src, args.out_dir, _train_options(args), _seed(args))
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, data = _existing(args.model), _existing(args.data)
    report = pipeline.evaluate_to(model, data, args.mask, args.out, args.dac, args.hampel, args.cdf_csv)
    _emit({k: v for k, v in report.to_json().items() if k != "cdf"})
    return EXIT_OK


def cmd_ablate(args) -> int:
    train, test = _existing(args.train), _existing(args.test)
    rows = pipeline.ablate_to(train, test, args.out_dir, _train_options(args), _seed(args))
    for r in rows:
        _emit(r)
    return EXIT_OK


def cmd_sweep(args) -> int:
    train, test = _existing(args.train), _existing(args.test)
    opts = _train_options(args, fractions=(1.0,))
    rows = pipeline.sweep_to(train, test, args.out_dir, opts, args.fractions, _seed(args))
    for r in rows:
        _emit(r)
    return EXIT_OK


def cmd_simnet(args) -> int:
    from .net.join import join_labels, read_frames
    from .net.node import FaultProfile
    from .net.simnet import run_simnet
    from .net.trajectory import plan_trajectory, read_trajectory
    from .core import write_dataset

    scene, plan = _load_scene(args)
    fault_kw = {}
    if args.faults:
        path = _existing(args.faults)
        fault_kw = parse_fault_profile(path.read_text(encoding="utf-8"), path)
    for key, flag in (
        ("drop_rate", args.drop),
        ("reorder_rate", args.reorder),
        ("duplicate_rate", args.duplicate),
        ("max_delay_ms", args.max_delay_ms),
    ):
        if flag is not None:
            fault_kw[key] = flag
    fault_kw.setdefault("rng_seed", pipeline.derive_seed(_seed(args), "faults"))
    try:
        faults = FaultProfile(**fault_kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    traj = read_trajectory(_existing(args.trajectory)) if args.trajectory else plan_trajectory(plan.build(scene))
    if args.collector_addr is None and args.out is None:
        raise UsageError("--out is required unless --collector-addr points at a running collector")
    out = Path(args.out) if args.out else None
    if out is not None and out.exists() and not args.resume:
        out.unlink()
        state = out.with_name(out.name + ".state.json")
        if state.exists():
            state.unlink()

    stop = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        result = run_simnet(
            scene,
            traj,
            out,
            n_sensors=args.sensors,
            faults=faults,
            n_ticks=args.frames,
            rate_hz=plan.rate_hz,
            realtime=args.realtime,
            collector_addr=args.collector_addr,
            stop=stop,
        )
    finally:
        signal.signal(signal.SIGINT, previous)
    report = result.to_json()
    report["faults"] = faults.to_json()
    if args.stats:
        pipeline.dump_json(report, args.stats)
    summary = dict(report["totals"])
    if report["collector"] is not None:
        summary.update(persisted=report["collector"]["persisted"], gaps=report["collector"]["gaps"])
    _emit(summary)
    if result.interrupted:
        where = f"{out} (state in {out}.state.json)" if out else "the remote collector"
        print(f"interrupted: partial output kept in {where}", file=sys.stderr)
        return EXIT_RUNTIME
    if any(s.unreachable for s in result.node_stats):
        print("error: collector unreachable", file=sys.stderr)
        return EXIT_RUNTIME
    if args.join and out is not None:
        n = args.sensors or scene.n_sensors
        dataset, jstats = join_labels(read_frames(out), traj, n, keep_incomplete=args.keep_incomplete)
        write_dataset(dataset, args.join)
        _emit({"joined": len(dataset), **jstats.to_json()})
    return EXIT_OK


def cmd_collect(args) -> int:
    from .net.collector import Collector, UdpCollector

    stop = threading.Event()
    server = UdpCollector(Collector(args.out, args.sensors), args.listen).start()
    print(f"listening on {server.address[0]}:{server.address[1]}", file=sys.stderr, flush=True)
    previous = {
        signal.SIGINT: signal.signal(signal.SIGINT, lambda *_: stop.set()),
        signal.SIGTERM: signal.signal(signal.SIGTERM, lambda *_: stop.set()),
    }
    if hasattr(signal, "SIGUSR1"):
        previous[signal.SIGUSR1] = signal.signal(
            signal.SIGUSR1, lambda *_: print(server.collector.status_line(), file=sys.stderr, flush=True)
        )
    try:
        while not stop.wait(0.05):
            if server.collector.all_complete() or server.collector.error:
                break
    finally:
        state = server.stop()
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    _emit(state)
    return EXIT_RUNTIME if state.get("error") else EXIT_OK


def cmd_join(args) -> int:
    from .core import write_dataset
    from .net.join import join_labels, read_frames
    from .net.trajectory import read_trajectory

    frames = read_frames(_existing(args.frames))
    traj = read_trajectory(_existing(args.trajectory))
    dataset, stats = join_labels(frames, traj, args.sensors, args.tolerance_us, args.keep_incomplete)
    write_dataset(dataset, args.out)
    _emit({"samples": len(dataset), **stats.to_json()})
    return EXIT_OK


def cmd_status(args) -> int:
    if args.service:
        import urllib.request

        with urllib.request.urlopen(args.service.rstrip("/") + "/collector/status", timeout=args.timeout) as resp:
            print(resp.read().decode().strip())
        return EXIT_OK
    from .net.collector import query_status

    print(json.dumps(query_status(args.collector_addr, args.timeout), sort_keys=True, separators=(",", ":")))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--seed", type=int, help="root seed; every random stream derives from it by name (default 0)"
    )
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = argparse.ArgumentParser(prog="ciuav", description="Synthetic CSI localization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="synthesize a labeled CSI dataset")
    _scene_args(p)
    p.add_argument("--spike-rate", type=float, default=0.0)
    p.add_argument("--spike-gain", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", parents=[common], help="DAC and Hampel stages, writes an amplitude matrix")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--dac", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--hampel", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--window-half", type=int, default=HampelParams().window_half)
    p.add_argument("--k-mad", type=float, default=HampelParams().k_mad)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="jointly train over sensor subsets and sample fractions")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint under a sensor mask")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", default="1-2-3")
    p.add_argument("--dac", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--hampel", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--out", required=True)
    p.add_argument("--cdf-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="2x2 DAC/Hampel ablation")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out-dir", required=True)
    _train_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", parents=[common], help="training-fraction sweep")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out-dir", required=True)
    _train_args(p, fractions=False)
    p.add_argument("--fractions", type=_float_list, default=DEFAULT_FRACTIONS)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simnet", parents=[common], help="simulate sensors streaming to a collector")
    _scene_args(p)
    p.add_argument("--sensors", type=int)
    p.add_argument("--frames", type=int, help="ticks per sensor (default: whole trajectory)")
    p.add_argument("--trajectory", help="CSV with timestamp_us,x,y,z")
    p.add_argument("--faults", help="fault profile file (key = value)")
    p.add_argument("--drop", type=float)
    p.add_argument("--reorder", type=float)
    p.add_argument("--duplicate", type=float)
    p.add_argument("--max-delay-ms", type=float)
    p.add_argument("--collector-addr", type=_addr, help="stream to a running collector instead of a local one")
    p.add_argument("--out", help="persisted frames (JSONL)")
    p.add_argument("--resume", action="store_true", help="continue an existing output instead of replacing it")
    p.add_argument("--stats", help="write sensor and collector counters as JSON")
    p.add_argument("--join", help="also write a labeled dataset joined with the trajectory")
    p.add_argument("--keep-incomplete", action="store_true")
    p.add_argument("--realtime", action="store_true", help="pace frames at the capture rate")
    p.set_defaults(func=cmd_simnet)

    p = sub.add_parser("collect", parents=[common], help="run a standalone UDP collector")
    p.add_argument("--listen", type=_addr, default=("127.0.0.1", 9750))
    p.add_argument("--out", required=True)
    p.add_argument("--sensors", type=int, default=3)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("join", parents=[common], help="label persisted frames from a trajectory")
    p.add_argument("--frames", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--sensors", type=int)
    p.add_argument("--tolerance-us", type=int, default=10_000)
    p.add_argument("--keep-incomplete", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_join)

    p = sub.add_parser("status", parents=[common], help="one-line counters from a running collector")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--collector-addr", type=_addr)
    target.add_argument("--service", help="base URL of a running ciuav service")
    p.add_argument("--timeout", type=float, default=1.0)
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8750)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, pipeline.OptionsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NumericError, ShapeError, DomainError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
