"""Shared domain types, dataset I/O and localization metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array or list shapes do not agree."""


class DomainError(ValueError):
    """Raised when a value lies outside the domain an operation accepts."""


@dataclass(frozen=True, eq=False)
class CsiFrame:
    sensor_id: int
    seq: int
    timestamp_us: int
    agc_gain_db: float
    subcarriers: np.ndarray  # complex128, length f

    def __post_init__(self):
        sub = np.asarray(self.subcarriers, dtype=np.complex128)
        if sub.ndim != 1:
            raise ShapeError("subcarriers must be one-dimensional")
        if not math.isfinite(self.agc_gain_db):
            raise ValueError(f"agc_gain_db must be finite, got {self.agc_gain_db}")
        sub.setflags(write=False)
        object.__setattr__(self, "subcarriers", sub)

    @property
    def n_sub(self) -> int:
        return self.subcarriers.shape[0]

    def replace(self, **changes) -> "CsiFrame":
        kw = dict(
            sensor_id=self.sensor_id,
            seq=self.seq,
            timestamp_us=self.timestamp_us,
            agc_gain_db=self.agc_gain_db,
            subcarriers=self.subcarriers,
        )
        kw.update(changes)
        return CsiFrame(**kw)

    def same_as(self, other: "CsiFrame") -> bool:
        return (
            self.sensor_id == other.sensor_id
            and self.seq == other.seq
            and self.timestamp_us == other.timestamp_us
            and self.agc_gain_db == other.agc_gain_db
            and np.array_equal(self.subcarriers, other.subcarriers)
        )

    def to_json(self) -> dict:
        return {
            "sensor_id": int(self.sensor_id),
            "seq": int(self.seq),
            "timestamp_us": int(self.timestamp_us),
            "agc_gain_db": float(self.agc_gain_db),
            "re": [float(v) for v in self.subcarriers.real],
            "im": [float(v) for v in self.subcarriers.imag],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CsiFrame":
        re = np.asarray(obj["re"], dtype=np.float64)
        im = np.asarray(obj["im"], dtype=np.float64)
        if re.shape != im.shape:
            raise ShapeError("re and im must have equal length")
        return cls(
            sensor_id=int(obj["sensor_id"]),
            seq=int(obj["seq"]),
            timestamp_us=int(obj["timestamp_us"]),
            agc_gain_db=float(obj["agc_gain_db"]),
            subcarriers=re + 1j * im,
        )


@dataclass(frozen=True)
class Position3D:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite position {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_seq(cls, xyz: Sequence[float]) -> "Position3D":
        x, y, z = (float(v) for v in xyz)
        return cls(x, y, z)


@dataclass(frozen=True, eq=False)
class LabeledSample:
    frames: tuple[CsiFrame, ...]
    truth: Position3D
    # sensor ids whose frame was absent at capture and zero-filled
    missing: tuple[int, ...] = ()

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ShapeError("a sample needs at least one frame")
        n = frames[0].n_sub
        if any(fr.n_sub != n for fr in frames):
            raise ShapeError("all frames in a sample must share the subcarrier count")
        object.__setattr__(self, "frames", frames)

    def to_json(self) -> dict:
        obj: dict[str, Any] = {
            "sensor_frames": [fr.to_json() for fr in self.frames],
            "truth": [self.truth.x, self.truth.y, self.truth.z],
        }
        if self.missing:
            obj["missing"] = list(self.missing)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "LabeledSample":
        return cls(
            frames=tuple(CsiFrame.from_json(f) for f in obj["sensor_frames"]),
            truth=Position3D.from_seq(obj["truth"]),
            missing=tuple(int(s) for s in obj.get("missing", ())),
        )


@dataclass(eq=False)
class Dataset:
    samples: list[LabeledSample]
    meta: Any = None

    def __post_init__(self):
        if self.samples:
            s0 = len(self.samples[0].frames)
            f0 = self.samples[0].frames[0].n_sub
            for i, smp in enumerate(self.samples):
                if len(smp.frames) != s0 or smp.frames[0].n_sub != f0:
                    raise ShapeError(f"sample {i} does not match S={s0}, f={f0}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_sensors(self) -> int:
        return len(self.samples[0].frames) if self.samples else 0

    @property
    def n_sub(self) -> int:
        return self.samples[0].frames[0].n_sub if self.samples else 0

    def csi_array(self) -> np.ndarray:
        """Complex CSI as an (N, S, f) array."""
        return np.array([[fr.subcarriers for fr in s.frames] for s in self.samples])

    def gains_db(self) -> np.ndarray:
        return np.array([[fr.agc_gain_db for fr in s.frames] for s in self.samples], dtype=np.float64)

    def timestamps_us(self) -> np.ndarray:
        return np.array([[fr.timestamp_us for fr in s.frames] for s in self.samples], dtype=np.int64)

    def truths(self) -> np.ndarray:
        """Ground-truth positions as an (N, 3) array."""
        return np.array([s.truth.as_array() for s in self.samples]).reshape(-1, 3)

    def with_csi(self, csi: np.ndarray) -> "Dataset":
        """Copy of the dataset with every frame's subcarriers replaced from an (N, S, f) array."""
        csi = np.asarray(csi)
        if csi.shape != (len(self), self.n_sensors, self.n_sub):
            raise ShapeError(f"csi shape {csi.shape} does not match dataset")
        samples = [
            LabeledSample(
                frames=tuple(fr.replace(subcarriers=csi[i, s]) for s, fr in enumerate(smp.frames)),
                truth=smp.truth,
                missing=smp.missing,
            )
            for i, smp in enumerate(self.samples)
        ]
        return Dataset(samples, meta=self.meta)

    def iter_json_lines(self) -> Iterator[str]:
        for smp in self.samples:
            yield json.dumps(smp.to_json(), separators=(",", ":"))


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in dataset.iter_json_lines():
            fh.write(line)
            fh.write("\n")


def read_dataset(path: str | Path) -> Dataset:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                samples.append(LabeledSample.from_json(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample ({exc})") from exc
    return Dataset(samples, meta={"source": str(path)})


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    mae_m: float
    lmse_m2: float
    r2: float | None  # None when every truth is identical
    error_cdf: tuple[tuple[float, float], ...]

    def to_json(self) -> dict:
        return {
            "mae_m": self.mae_m,
            "lmse_m2": self.lmse_m2,
            "r2": self.r2,
            "cdf": [[e, p] for e, p in self.error_cdf],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(
            mae_m=float(obj["mae_m"]),
            lmse_m2=float(obj["lmse_m2"]),
            r2=None if obj["r2"] is None else float(obj["r2"]),
            error_cdf=tuple((float(e), float(p)) for e, p in obj["cdf"]),
        )

    def cdf_at(self, error_m: float) -> float:
        """Fraction of samples with error <= error_m."""
        frac = 0.0
        for e, p in self.error_cdf:
            if e <= error_m:
                frac = p
            else:
                break
        return frac


def euclidean_error(pred: Position3D, truth: Position3D) -> float:
    return math.dist((pred.x, pred.y, pred.z), (truth.x, truth.y, truth.z))


def _as_points(points: Iterable[Position3D] | np.ndarray) -> np.ndarray:
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64)
    else:
        arr = np.array([p.as_array() for p in points], dtype=np.float64)
    return arr.reshape(-1, 3)


def empirical_cdf(errors: np.ndarray) -> tuple[tuple[float, float], ...]:
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    n = errors.size
    values, counts = np.unique(errors, return_counts=True)
    cum = np.cumsum(counts)
    out = [(float(v), float(c) / n) for v, c in zip(values, cum)]
    # guard the final point against float drift
    if out:
        out[-1] = (out[-1][0], 1.0)
    return tuple(out)


def compute_metrics(preds, truths) -> MetricsReport:
    """Localization metrics over paired predictions and truths.

    ``preds`` and ``truths`` may be sequences of :class:`Position3D` or
    ``(N, 3)`` arrays. MAE is the mean 3D Euclidean error, LMSE its square,
    and R^2 is pooled over all 3N coordinates.
    """
    p = _as_points(preds)
    t = _as_points(truths)
    if p.shape != t.shape:
        raise ShapeError(f"{p.shape[0]} predictions vs {t.shape[0]} truths")
    if p.shape[0] == 0:
        raise ShapeError("metrics need at least one sample")
    errors = np.sqrt(((p - t) ** 2).sum(axis=1))
    mae = float(errors.mean())
    ss_res = float(((p - t) ** 2).sum())
    ss_tot = float(((t - t.mean(axis=0)) ** 2).sum())
    r2 = None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return MetricsReport(mae_m=mae, lmse_m2=mae * mae, r2=r2, error_cdf=empirical_cdf(errors))
