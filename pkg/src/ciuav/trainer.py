"""Multi-task training over sensor subsets and sample fractions, plus evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Dataset, MetricsReport, ShapeError, compute_metrics
from .dsp import AmplitudeMatrix, HampelParams, preprocess
from .model import (
    AdamState,
    NumericError,
    SisConfig,
    SisParams,
    adam_step,
    as_mask,
    gradients,
    init_params,
    predict,
)

log = logging.getLogger(__name__)

DEFAULT_SENSOR_CONFIGS = ("1", "3", "1-3", "1-2-3")
DEFAULT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class TrainingError(RuntimeError):
    def __init__(self, step: int, task: str, cause: Exception):
        self.step = step
        self.task = task
        super().__init__(f"step {step}, task {task!r}: {cause}")


# ------------------------------------------------------------------ tasks


def parse_subset(subset: str | Sequence[int], S: int) -> tuple[bool, ...]:
    """'1-3' (1-based sensor numbers) or an iterable of numbers -> boolean mask."""
    ids = [int(t) for t in subset.split("-")] if isinstance(subset, str) else [int(t) for t in subset]
    if not ids:
        raise ValueError("empty sensor subset")
    mask = [False] * S
    for i in ids:
        if not 1 <= i <= S:
            raise ValueError(f"sensor {i} outside 1..{S}")
        mask[i - 1] = True
    return tuple(mask)


def subset_label(mask: Sequence[bool]) -> str:
    return "-".join(str(i + 1) for i, on in enumerate(mask) if on)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    mask: tuple[bool, ...]
    sample_fraction: float = 1.0
    sample_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mask", tuple(bool(m) for m in self.mask))
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError(f"sample_fraction {self.sample_fraction} outside (0, 1]")
        if not any(self.mask):
            raise ValueError(f"task {self.name!r} has no active sensor")

    def sample_indices(self, n: int) -> np.ndarray:
        """First ceil(fraction * n) entries of a seed-fixed permutation, so smaller fractions nest."""
        perm = np.random.default_rng(self.sample_seed).permutation(n)
        k = max(1, math.ceil(self.sample_fraction * n - 1e-9))
        return np.sort(perm[:k])


def build_tasks(
    sensor_configs: Sequence[str | Sequence[int]], fractions: Sequence[float], S: int = 3, sample_seed: int = 0
) -> list[TaskSpec]:
    if not sensor_configs or not fractions:
        raise ValueError("need at least one sensor subset and one fraction")
    tasks = []
    for subset in sensor_configs:
        mask = parse_subset(subset, S)
        for frac in fractions:
            tasks.append(TaskSpec(f"{subset_label(mask)}@{frac:g}", mask, float(frac), sample_seed))
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ValueError("duplicate task names in schedule")
    return tasks


@dataclass(frozen=True)
class TrainSchedule:
    tasks: tuple[TaskSpec, ...]
    epochs: int = 400
    batch_size: int = 32
    task_sampling: str = "round-robin"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # None: ceil(largest task subset / batch_size)
    steps_per_epoch: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("schedule needs at least one task")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be positive and finite, got {self.lr}")
        if self.task_sampling not in ("round-robin", "proportional"):
            raise ValueError(f"unknown task_sampling {self.task_sampling!r}")
        if len({t.name for t in self.tasks}) != len(self.tasks):
            raise ValueError("task names must be unique")


# ------------------------------------------------------------------ data


@dataclass(frozen=True, eq=False)
class TrainingData:
    amplitudes: np.ndarray  # (N, S, f)
    truths: np.ndarray  # (N, 3)

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=np.float64)
        t = np.asarray(self.truths, dtype=np.float64).reshape(-1, 3)
        if a.ndim != 3 or a.shape[0] != t.shape[0]:
            raise ShapeError(f"amplitudes {a.shape} and truths {t.shape} disagree")
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "truths", t)

    @classmethod
    def from_parts(cls, amps: AmplitudeMatrix, dataset: Dataset) -> "TrainingData":
        return cls(amps.values, dataset.truths())

    def __len__(self) -> int:
        return self.truths.shape[0]

    @property
    def S(self) -> int:
        return self.amplitudes.shape[1]

    @property
    def f(self) -> int:
        return self.amplitudes.shape[2]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.amplitudes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.truths, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class ExperimentResult:
    per_task: dict[str, MetricsReport]
    loss_curve: list[tuple[int, float]]
    config_fingerprint: str

    def to_json(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "per_task": {k: v.to_json() for k, v in self.per_task.items()},
            "loss_curve": [[s, l] for s, l in self.loss_curve],
        }


def fingerprint(*parts) -> str:
    """sha256 over the canonical JSON of ``parts``."""

    def default(o):
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.integer, np.floating)):
            return o.item()
        raise TypeError(f"cannot fingerprint {type(o)}")

    blob = json.dumps(parts, sort_keys=True, default=default, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ------------------------------------------------------------------ training


def _input_stats(amps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = amps.reshape(-1, amps.shape[-1])
    mean = flat.mean(axis=0)
    scale = flat.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


class _TaskStream:
    """Endless shuffled batches over one task's sample subset."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator):
        self.indices = indices
        self.rng = rng
        self.order = rng.permutation(indices)
        self.pos = 0

    def next_batch(self, size: int) -> np.ndarray:
        if len(self.indices) <= size:
            return self.rng.permutation(self.indices)
        if self.pos + size > len(self.order):
            self.order = self.rng.permutation(self.indices)
            self.pos = 0
        batch = self.order[self.pos : self.pos + size]
        self.pos += size
        return batch


def train(
    data: TrainingData,
    schedule: TrainSchedule,
    config: SisConfig,
    seed: int = 0,
    eval_data: TrainingData | None = None,
    log_every: int = 1,
) -> tuple[SisParams, ExperimentResult]:
    """Joint training over every task in the schedule.

    Each step picks a task (round-robin or proportional to subset size),
    draws a batch from that task's samples, applies its sensor mask and takes
    one Adam step on the shared parameters.
    """
    if (data.S, data.f) != (config.S, config.f) or len(data) != config.N_train:
        raise ShapeError(
            f"data (N={len(data)}, S={data.S}, f={data.f}) does not match config "
            f"(N={config.N_train}, S={config.S}, f={config.f})"
        )
    n = len(data)
    subsets = [t.sample_indices(n) for t in schedule.tasks]
    used = np.unique(np.concatenate(subsets))
    mean, scale = _input_stats(data.amplitudes[used])

    root = np.random.SeedSequence(seed)
    init_ss, order_ss, *task_ss = root.spawn(2 + len(schedule.tasks))
    params = init_params(config, np.random.default_rng(init_ss), mean, scale)
    params["reg.b"] = np.tile(data.truths[used].mean(axis=0), (config.S, 1))
    streams = [_TaskStream(idx, np.random.default_rng(ss)) for idx, ss in zip(subsets, task_ss)]
    order_rng = np.random.default_rng(order_ss)
    sizes = np.array([len(s) for s in subsets], dtype=np.float64)

    steps_per_epoch = schedule.steps_per_epoch or max(1, math.ceil(sizes.max() / schedule.batch_size))
    total_steps = schedule.epochs * steps_per_epoch
    state = AdamState()
    curve: list[tuple[int, float]] = []
    n_tasks = len(schedule.tasks)

    for step in range(total_steps):
        if schedule.task_sampling == "round-robin":
            k = step % n_tasks
        else:
            k = int(order_rng.choice(n_tasks, p=sizes / sizes.sum()))
        task = schedule.tasks[k]
        batch = streams[k].next_batch(schedule.batch_size)
        try:
            terms, grads = gradients(
                data.amplitudes[batch], data.truths[batch], batch, np.array(task.mask), params, config
            )
            adam_step(params, grads, state, schedule.lr, schedule.betas, schedule.eps)
        except (NumericError, FloatingPointError) as exc:
            raise TrainingError(step, task.name, exc) from exc
        if step % log_every == 0 or step == total_steps - 1:
            curve.append((step, terms.total))
        if step % max(1, total_steps // 10) == 0:
            log.debug("step %d/%d task %s loss %.5f", step, total_steps, task.name, terms.total)

    target = eval_data if eval_data is not None else data
    per_task = {}
    for task, idx in zip(schedule.tasks, subsets):
        sub = target if eval_data is not None else TrainingData(data.amplitudes[idx], data.truths[idx])
        per_task[task.name] = evaluate(params, sub, task.mask)
    fp = fingerprint(
        "train", config, schedule, seed, data.digest(), eval_data.digest() if eval_data is not None else None
    )
    return params, ExperimentResult(per_task, curve, fp)


def evaluate(params: SisParams, test: TrainingData, mask=None) -> MetricsReport:
    """Fused predictions under ``mask`` scored against the test labels."""
    if (test.S, test.f) != (params.config.S, params.config.f):
        raise ShapeError(f"test data (S={test.S}, f={test.f}) does not match model")
    m = as_mask(mask, params.config.S)
    preds = predict(test.amplitudes, m, params)
    return compute_metrics(preds, test.truths)


def mean_predictor_metrics(train_truths: np.ndarray, test: TrainingData) -> MetricsReport:
    """Baseline that always answers the mean training position."""
    centre = np.asarray(train_truths, dtype=np.float64).reshape(-1, 3).mean(axis=0)
    return compute_metrics(np.repeat(centre[None], len(test), axis=0), test.truths)


# ------------------------------------------------------------------ experiments


@dataclass
class AblationCell:
    dac: bool
    hampel: bool
    report: MetricsReport
    params: SisParams = field(repr=False)
    test: TrainingData = field(repr=False)


def ablation_grid(
    dataset_raw: Dataset,
    config: SisConfig,
    schedule: TrainSchedule,
    test_raw: Dataset | None = None,
    seed: int = 0,
    hampel_params: HampelParams | None = None,
) -> list[AblationCell]:
    """Train one identically-seeded model per (DAC, Hampel) on/off combination."""
    cells = []
    for dac in (False, True):
        for hampel in (False, True):
            amps = preprocess(dataset_raw, dac, hampel, hampel_params)
            data = TrainingData.from_parts(amps, dataset_raw)
            if test_raw is not None:
                test = TrainingData.from_parts(preprocess(test_raw, dac, hampel, hampel_params), test_raw)
            else:
                test = data
            params, _ = train(data, schedule, config, seed)
            report = evaluate(params, test)
            log.info("ablation dac=%s hampel=%s lmse=%.4f", dac, hampel, report.lmse_m2)
            cells.append(AblationCell(dac, hampel, report, params, test))
    return cells


def sample_sweep(
    data: TrainingData,
    config: SisConfig,
    fractions: Sequence[float],
    schedule: TrainSchedule,
    test: TrainingData | None = None,
    sensor_configs: Sequence[str] = ("1-2-3",),
    seed: int = 0,
    sample_seed: int = 0,
) -> list[tuple[float, MetricsReport]]:
    """Localization quality as a function of the training-set fraction.

    For each fraction p a model is trained jointly on every task whose
    nested sample subset fits inside p (sensor subsets x fractions <= p), with
    the optimizer step budget of the full-data run so only data quantity
    varies. Each model is evaluated with all sensors active.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    if fractions != sorted(fractions):
        raise ValueError("fractions must be sorted ascending")
    steps = schedule.steps_per_epoch or max(1, math.ceil(len(data) / schedule.batch_size))
    target = test if test is not None else data
    out = []
    for p in fractions:
        tasks = build_tasks(sensor_configs, [f for f in fractions if f <= p], config.S, sample_seed)
        sched = TrainSchedule(
            tasks=tuple(tasks),
            epochs=schedule.epochs,
            batch_size=schedule.batch_size,
            task_sampling=schedule.task_sampling,
            lr=schedule.lr,
            betas=schedule.betas,
            eps=schedule.eps,
            steps_per_epoch=steps,
        )
        params, _ = train(data, sched, config, seed)
        report = evaluate(params, target)
        log.info("sweep fraction=%g lmse=%.4f", p, report.lmse_m2)
        out.append((p, report))
    return out


def write_curve_csv(rows: Sequence[tuple[float, float, str]], path: str | Path) -> None:
    """CSV with columns x, metric, task."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "metric", "task"])
        for x, metric, task in rows:
            w.writerow([repr(float(x)), repr(float(metric)), task])
