"""File-level pipeline steps shared by the command line and the HTTP service.

Every step writes its outputs plus a ``*.fingerprint.json`` stamp holding a
hash of all parameters and input digests, and returns a JSON-able summary.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PlanSettings
from .core import Dataset, MetricsReport, read_dataset, write_dataset
from .dsp import AmplitudeMatrix, HampelParams, preprocess, write_amplitudes
from .model import SisConfig, load_checkpoint, save_checkpoint
from .synth import SceneConfig, generate_dataset, inject_spikes
from .trainer import (
    TrainingData,
    TrainSchedule,
    ablation_grid,
    build_tasks,
    dump_json,
    evaluate,
    fingerprint,
    parse_subset,
    sample_sweep,
    subset_label,
    train,
    write_curve_csv,
)


def derive_seed(seed: int, name: str) -> int:
    """Independent named substream of a root seed."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _stamp(path: Path, fp: str, command: str, **extra) -> None:
    meta = {"command": command, "config_fingerprint": fp, **extra}
    dump_json(meta, path.with_name(path.name + ".fingerprint.json"))


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------ generate


def generate_to(
    scene: SceneConfig,
    plan: PlanSettings,
    out: str | Path,
    spike_rate: float = 0.0,
    spike_gain: float = 10.0,
    seed: int | None = None,
) -> dict:
    """Synthesize a dataset, optionally with spikes, and write it as JSONL.

    With ``seed`` the scene noise and spike positions come from named
    substreams of it; otherwise from the scene's own ``rng_seed``.
    """
    out = Path(out)
    if seed is not None:
        scene = dataclasses.replace(scene, rng_seed=derive_seed(seed, "scene"))
    spike_seed = derive_seed(scene.rng_seed, "spikes")
    dataset = generate_dataset(scene, plan.build(scene))
    dataset, log = inject_spikes(dataset, spike_rate, spike_gain, spike_seed)
    write_dataset(dataset, out)
    log_path = out.with_name(out.name + ".spikes.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
    fp = fingerprint("generate", scene, plan, spike_rate, spike_gain, spike_seed)
    _stamp(out, fp, "generate", sha256=file_digest(out))
    return {
        "N": len(dataset),
        "S": dataset.n_sensors,
        "f": dataset.n_sub,
        "spikes": len(log),
        "out": str(out),
        "spike_log": str(log_path),
        "config_fingerprint": fp,
    }


# ------------------------------------------------------------------ preprocess


def preprocess_to(
    in_path: str | Path, out: str | Path, dac: bool = True, hampel: bool = True, hampel_params: HampelParams | None = None
) -> dict:
    dataset = read_dataset(in_path)
    hp = hampel_params or HampelParams()
    amps = preprocess(dataset, dac, hampel, hp)
    out = Path(out)
    write_amplitudes(amps, out)
    flagged = int(amps.outlier_mask.sum()) if amps.outlier_mask is not None else 0
    fp = fingerprint("preprocess", file_digest(in_path), dac, hampel, hp)
    _stamp(out, fp, "preprocess")
    n, s, f = amps.shape
    return {
        "N": n,
        "S": s,
        "f": f,
        "provenance": list(amps.provenance),
        "outliers": flagged,
        "out": str(out),
        "config_fingerprint": fp,
    }


def load_training_data(path: str | Path, dac: bool, hampel: bool, hp: HampelParams | None = None) -> TrainingData:
    dataset = read_dataset(path)
    if len(dataset) == 0:
        raise ValueError(f"{path}: dataset is empty")
    return TrainingData.from_parts(preprocess(dataset, dac, hampel, hp), dataset)


# ------------------------------------------------------------------ train / eval


class OptionsError(ValueError):
    """A training or evaluation option is invalid for the data it meets."""


@dataclasses.dataclass(frozen=True)
class TrainOptions:
    subsets: tuple[str, ...] = ("1", "3", "1-3", "1-2-3")
    fractions: tuple[float, ...] = (1.0,)
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    task_sampling: str = "round-robin"
    feature_dim: int = 128
    hidden_dims: tuple[int, ...] = (256, 256)
    lambda_s: float = 0.01
    lambda_v: float = 0.1
    log_every: int = 10
    dac: bool = True
    hampel: bool = True

    def schedule(self, S: int, sample_seed: int) -> TrainSchedule:
        try:
            tasks = build_tasks(list(self.subsets), list(self.fractions), S, sample_seed)
            return TrainSchedule(
                tuple(tasks), epochs=self.epochs, batch_size=self.batch_size, task_sampling=self.task_sampling, lr=self.lr
            )
        except ValueError as exc:
            raise OptionsError(str(exc)) from None

    def model_config(self, data: TrainingData) -> SisConfig:
        return SisConfig(
            f=data.f,
            f_h=self.feature_dim,
            hidden_dims=self.hidden_dims,
            S=data.S,
            N_train=len(data),
            lambda_s=self.lambda_s,
            lambda_v=self.lambda_v,
        )


def train_to(data_path: str | Path, out_dir: str | Path, opts: TrainOptions, seed: int = 0) -> dict:
    """Train on a dataset file; writes model.sism, result.json and loss_curve.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_training_data(data_path, opts.dac, opts.hampel)
    config = opts.model_config(data)
    schedule = opts.schedule(data.S, derive_seed(seed, "sample"))
    params, result = train(data, schedule, config, derive_seed(seed, "train"), log_every=opts.log_every)
    model_path = out_dir / "model.sism"
    save_checkpoint(params, model_path)
    dump_json(result.to_json(), out_dir / "result.json")
    write_curve_csv([(s, l, "loss_total") for s, l in result.loss_curve], out_dir / "loss_curve.csv")
    fp = fingerprint("train", result.config_fingerprint, opts)
    _stamp(model_path, fp, "train")
    return {
        "model": str(model_path),
        "per_task": {k: v.to_json()["lmse_m2"] for k, v in result.per_task.items()},
        "final_loss": result.loss_curve[-1][1],
        "config_fingerprint": fp,
    }


def evaluate_to(
    model_path: str | Path,
    data_path: str | Path,
    mask: str,
    out: str | Path | None = None,
    dac: bool = True,
    hampel: bool = True,
    cdf_csv: str | Path | None = None,
) -> MetricsReport:
    params = load_checkpoint(model_path)
    data = load_training_data(data_path, dac, hampel)
    try:
        m = parse_subset(mask, params.config.S)
    except ValueError as exc:
        raise OptionsError(f"--mask: {exc}") from None
    report = evaluate(params, data, m)
    if out is not None:
        out = Path(out)
        dump_json(report.to_json(), out)
        fp = fingerprint("eval", file_digest(model_path), file_digest(data_path), m, dac, hampel)
        _stamp(out, fp, "eval")
    if cdf_csv is not None:
        write_curve_csv([(e, p, subset_label(m)) for e, p in report.error_cdf], cdf_csv)
    return report


def ablate_to(train_path: str | Path, test_path: str | Path, out_dir: str | Path, opts: TrainOptions, seed: int = 0) -> list[dict]:
    """2x2 DAC/Hampel grid; writes ablation.csv and ablation.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_raw, test_raw = read_dataset(train_path), read_dataset(test_path)
    probe = TrainingData(np.zeros((len(train_raw), train_raw.n_sensors, train_raw.n_sub)), train_raw.truths())
    config = opts.model_config(probe)
    schedule = opts.schedule(train_raw.n_sensors, derive_seed(seed, "sample"))
    cells = ablation_grid(train_raw, config, schedule, test_raw, seed=derive_seed(seed, "train"))
    rows = [
        {"dac": c.dac, "hampel": c.hampel, **{k: v for k, v in c.report.to_json().items() if k != "cdf"}}
        for c in cells
    ]
    with open(out_dir / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write("dac,hampel,mae_m,lmse_m2,r2\n")
        for r in rows:
            r2 = "" if r["r2"] is None else repr(r["r2"])
            fh.write(f"{int(r['dac'])},{int(r['hampel'])},{r['mae_m']!r},{r['lmse_m2']!r},{r2}\n")
    fp = fingerprint("ablate", file_digest(train_path), file_digest(test_path), opts, seed)
    dump_json({"config_fingerprint": fp, "cells": rows}, out_dir / "ablation.json")
    _stamp(out_dir / "ablation.csv", fp, "ablate")
    return rows


def sweep_to(
    train_path: str | Path,
    test_path: str | Path,
    out_dir: str | Path,
    opts: TrainOptions,
    fractions: Sequence[float] = (0.25, 0.5, 0.75, 1.0),
    seed: int = 0,
) -> list[dict]:
    """Training-fraction sweep; writes sweep.json and one curve CSV per metric."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = load_training_data(train_path, opts.dac, opts.hampel)
    test = load_training_data(test_path, opts.dac, opts.hampel)
    schedule = opts.schedule(data.S, derive_seed(seed, "sample"))
    points = sample_sweep(
        data,
        opts.model_config(data),
        fractions,
        schedule,
        test,
        sensor_configs=list(opts.subsets),
        seed=derive_seed(seed, "train"),
        sample_seed=derive_seed(seed, "sample"),
    )
    rows = [{"fraction": p, **{k: v for k, v in r.to_json().items() if k != "cdf"}} for p, r in points]
    full = subset_label([True] * data.S)
    for metric in ("mae_m", "lmse_m2", "r2"):
        curve = [(r["fraction"], r[metric], full) for r in rows if r[metric] is not None]
        write_curve_csv(curve, out_dir / f"sweep_{metric}.csv")
    fp = fingerprint("sweep", file_digest(train_path), file_digest(test_path), opts, list(fractions), seed)
    dump_json({"config_fingerprint": fp, "points": rows}, out_dir / "sweep.json")
    _stamp(out_dir / "sweep.json", fp, "sweep")
    return rows
