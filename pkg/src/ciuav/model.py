"""Sensor-in-Sample multi-task localization model.

A shared perceptron turns each sensor's subcarrier amplitudes into a feature
vector; a per-sensor affine head maps that sensor's feature row to a 3D
position estimate. Per-sensor estimates are fused with softmax(w_s) over the
active sensors. Training minimizes

    L = L_pred + lambda_s * ||w_s||_1 + lambda_v * L_sam

with hand-written backpropagation (float64 throughout).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ShapeError

CKPT_MAGIC = b"SISM"
CKPT_VERSION = 1


class NumericError(FloatingPointError):
    """A non-finite value appeared in a named tensor."""

    def __init__(self, tensor: str, message: str = ""):
        self.tensor = tensor
        super().__init__(f"non-finite values in {tensor}" + (f": {message}" if message else ""))


@dataclass(frozen=True)
class SisConfig:
    f: int = 50
    f_h: int = 128
    hidden_dims: tuple[int, ...] = (256, 256)
    S: int = 3
    N_train: int = 1
    lambda_s: float = 0.01
    lambda_v: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min(self.f, self.f_h, self.S, self.N_train, *self.hidden_dims) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.lambda_s < 0 or self.lambda_v < 0:
            raise ValueError("regularization coefficients must be non-negative")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.f, *self.hidden_dims, self.f_h)


def extractor_names(config: SisConfig) -> list[str]:
    names = []
    for i in range(len(config.layer_dims) - 1):
        names += [f"ext.W{i}", f"ext.b{i}"]
    return names


# trainable tensors in checkpoint order; buffers follow
def trainable_names(config: SisConfig) -> list[str]:
    return extractor_names(config) + ["reg.W", "reg.b", "w_s", "v"]


BUFFER_NAMES = ("input_mean", "input_scale")


@dataclass
class SisParams:
    config: SisConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    @property
    def trainable(self) -> list[str]:
        return trainable_names(self.config)

    def copy(self) -> "SisParams":
        return SisParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        dims = cfg.layer_dims
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(len(dims) - 1):
            shapes[f"ext.W{i}"] = (dims[i], dims[i + 1])
            shapes[f"ext.b{i}"] = (dims[i + 1],)
        shapes["reg.W"] = (cfg.S, cfg.f_h, 3)
        shapes["reg.b"] = (cfg.S, 3)
        shapes["w_s"] = (cfg.S,)
        shapes["v"] = (cfg.N_train,)
        shapes["input_mean"] = (cfg.f,)
        shapes["input_scale"] = (cfg.f,)
        return shapes

    def validate(self) -> None:
        for name, shape in self.expected_shapes().items():
            if name not in self.tensors:
                raise ShapeError(f"missing tensor {name}")
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise NumericError(name)

    def fingerprint_bytes(self) -> bytes:
        return b"".join(self.tensors[k].astype("<f8").tobytes() for k in sorted(self.tensors))


def init_params(config: SisConfig, rng: np.random.Generator, input_mean=None, input_scale=None) -> SisParams:
    """Fan-in scaled uniform weights, zero biases, w_s = 0, v = 1."""
    t: dict[str, np.ndarray] = {}
    dims = config.layer_dims
    for i in range(len(dims) - 1):
        bound = math.sqrt(6.0 / dims[i])
        t[f"ext.W{i}"] = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
        t[f"ext.b{i}"] = np.zeros(dims[i + 1])
    bound = math.sqrt(3.0 / config.f_h)
    t["reg.W"] = rng.uniform(-bound, bound, size=(config.S, config.f_h, 3))
    t["reg.b"] = np.zeros((config.S, 3))
    t["w_s"] = np.zeros(config.S)
    t["v"] = np.ones(config.N_train)
    t["input_mean"] = np.zeros(config.f) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
    t["input_scale"] = np.ones(config.f) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
    params = SisParams(config, t)
    params.validate()
    return params


# ------------------------------------------------------------ activation


def _silu(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sig = 0.5 * (1.0 + np.tanh(0.5 * a))  # overflow-free logistic
    return a * sig, sig


def _silu_grad(a: np.ndarray, sig: np.ndarray) -> np.ndarray:
    return sig * (1.0 + a * (1.0 - sig))


# ------------------------------------------------------------ masks


def as_mask(mask, S: int) -> np.ndarray:
    m = np.ones(S, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != (S,):
        raise ShapeError(f"mask must have length {S}")
    if not m.any():
        raise ValueError("sensor mask needs at least one active sensor")
    return m


# ------------------------------------------------------------ forward


def _check_input(x: np.ndarray, config: SisConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.S, config.f):
        raise ShapeError(f"input shape {x.shape} does not match (B, {config.S}, {config.f})")
    return x


def _extract(x: np.ndarray, mask: np.ndarray, params: SisParams, keep: bool = False):
    # only active sensor rows are computed; inactive rows stay zero
    cfg = params.config
    B = x.shape[0]
    xa = x[:, mask].reshape(-1, cfg.f)
    h = (xa - params["input_mean"]) / params["input_scale"]
    cache = []
    for i in range(len(cfg.layer_dims) - 1):
        a = h @ params[f"ext.W{i}"] + params[f"ext.b{i}"]
        out, sig = _silu(a)
        if keep:
            cache.append((h, a, sig))
        h = out
    full = np.zeros((B, cfg.S, cfg.f_h))
    full[:, mask] = h.reshape(B, -1, cfg.f_h)
    return full, cache


def extract_features(x, mask, params: SisParams) -> np.ndarray:
    """Shared extractor applied per sensor; inactive sensor rows are zero.

    ``x`` is ``(S, f)`` for one sample or ``(B, S, f)`` for a batch.
    """
    single = np.ndim(x) == 2
    xb = _check_input(x, params.config)
    h, _ = _extract(xb, as_mask(mask, params.config.S), params)
    return h[0] if single else h


def regress_positions(h, params: SisParams) -> np.ndarray:
    """Per-sensor affine heads: row s of ``h`` goes through head s."""
    h = np.asarray(h, dtype=np.float64)
    cfg = params.config
    if h.shape[-2:] != (cfg.S, cfg.f_h):
        raise ShapeError(f"features {h.shape} do not end in ({cfg.S}, {cfg.f_h})")
    return np.einsum("...sh,shk->...sk", h, params["reg.W"]) + params["reg.b"]


def fusion_weights(w_s, mask) -> np.ndarray:
    w = np.asarray(w_s, dtype=np.float64)
    m = as_mask(mask, w.shape[0])
    logits = np.where(m, w, -np.inf)
    logits = logits - logits[m].max()
    e = np.where(m, np.exp(logits), 0.0)
    return e / e.sum()


def fuse_prediction(per_sensor, mask, w_s) -> np.ndarray:
    """Softmax(w_s)-weighted sum of the active per-sensor predictions."""
    per_sensor = np.asarray(per_sensor, dtype=np.float64)
    coeff = fusion_weights(w_s, mask)
    return np.tensordot(per_sensor, coeff, axes=([-2], [0]))


def predict_per_sensor(x, mask, params: SisParams) -> np.ndarray:
    return regress_positions(extract_features(x, mask, params), params)


def predict(x, mask, params: SisParams) -> np.ndarray:
    """Fused (B, 3) positions for a batch of (B, S, f) amplitudes."""
    m = as_mask(mask, params.config.S)
    per = predict_per_sensor(_check_input(x, params.config), m, params)
    return fuse_prediction(per, m, params["w_s"])


# ------------------------------------------------------------ losses


def _masked(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeError(f"pred {pred.shape} and truth {truth.shape} must both be (N, S, 3)")
    m = as_mask(mask, pred.shape[1])
    return pred[:, m] - truth[:, m]


def loss_pred(pred, truth, mask=None) -> float:
    err = _masked(pred, truth, mask)
    n, a = err.shape[:2]
    return float((err**2).sum() / (n * a))


def loss_sor(w_s, lambda_s: float) -> float:
    return float(lambda_s * np.abs(np.asarray(w_s, dtype=np.float64)).sum())


def loss_sam(pred, truth, v, mask=None) -> float:
    err = _masked(pred, truth, mask)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (err.shape[0],):
        raise ShapeError(f"v has shape {v.shape}, expected ({err.shape[0]},)")
    if (v < 0).any():
        raise ValueError("sample weights must be non-negative")
    sq = (err**2).sum(axis=2)  # (N, active)
    return float(((v**2)[:, None] * sq).sum() / err.shape[1])


@dataclass(frozen=True)
class LossTerms:
    pred: float
    sor: float
    sam: float
    lambda_v: float

    @property
    def total(self) -> float:
        return self.pred + self.sor + self.lambda_v * self.sam


def loss_total(pred, truth, params: SisParams, config: SisConfig | None = None, mask=None, sample_index=None) -> float:
    return loss_terms(pred, truth, params, config, mask, sample_index).total


def loss_terms(pred, truth, params: SisParams, config=None, mask=None, sample_index=None) -> LossTerms:
    cfg = config or params.config
    v = params["v"] if sample_index is None else params["v"][np.asarray(sample_index)]
    return LossTerms(
        pred=loss_pred(pred, truth, mask),
        sor=loss_sor(params["w_s"], cfg.lambda_s),
        sam=loss_sam(pred, truth, v, mask),
        lambda_v=cfg.lambda_v,
    )


def replicate_truth(truth_xyz: np.ndarray, S: int) -> np.ndarray:
    """(N, 3) positions -> (N, S, 3) per-sensor labels."""
    t = np.asarray(truth_xyz, dtype=np.float64).reshape(-1, 3)
    return np.repeat(t[:, None, :], S, axis=1)


# ------------------------------------------------------------ gradients


def gradients(x, truth, sample_index, mask, params: SisParams, config: SisConfig | None = None):
    """Loss terms and analytic gradients of the total loss for one batch.

    ``truth`` may be (B, 3) or (B, S, 3); ``sample_index`` selects the rows
    of ``v`` belonging to the batch. Returns ``(LossTerms, grads)`` where
    ``grads`` maps every trainable tensor name to an array of its shape.
    """
    cfg = config or params.config
    xb = _check_input(x, cfg)
    B, S = xb.shape[:2]
    m = as_mask(mask, S)
    y = np.asarray(truth, dtype=np.float64)
    if y.ndim == 2:
        y = replicate_truth(y, S)
    if y.shape != (B, S, 3):
        raise ShapeError(f"truth shape {y.shape} does not match batch ({B}, {S}, 3)")
    idx = np.asarray(sample_index, dtype=np.int64)
    if idx.shape != (B,):
        raise ShapeError("sample_index must hold one index per batch row")

    h, cache = _extract(xb, m, params, keep=True)
    pred = regress_positions(h, params)
    v_b = params["v"][idx]
    terms = loss_terms(pred, y, params, cfg, m, idx)
    if not math.isfinite(terms.total):
        raise NumericError("loss_total")

    a = int(m.sum())
    err = (pred - y) * m[None, :, None]
    sq = (err**2).sum(axis=2)
    coef = 2.0 / (B * a) + cfg.lambda_v * 2.0 / a * (v_b**2)  # (B,)
    d_pred = coef[:, None, None] * err

    grads: dict[str, np.ndarray] = {}
    # inactive heads see zero error and get zero gradient
    grads["reg.W"] = np.einsum("bsh,bsk->shk", h, d_pred)
    grads["reg.b"] = d_pred.sum(axis=0)
    d_h = np.einsum("bsk,shk->bsh", d_pred[:, m], params["reg.W"][m]).reshape(-1, cfg.f_h)

    for i in reversed(range(len(cfg.layer_dims) - 1)):
        h_in, a_pre, sig = cache[i]
        d_a = d_h * _silu_grad(a_pre, sig)
        grads[f"ext.W{i}"] = h_in.T @ d_a
        grads[f"ext.b{i}"] = d_a.sum(axis=0)
        if i > 0:
            d_h = d_a @ params[f"ext.W{i}"].T

    grads["w_s"] = cfg.lambda_s * np.sign(params["w_s"])
    g_v = np.zeros_like(params["v"])
    np.add.at(g_v, idx, cfg.lambda_v * 2.0 / a * v_b * sq.sum(axis=1))
    grads["v"] = g_v

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(name, "gradient")
    return terms, grads


# ------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    s: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.s.items()}, self.t)


def project_sample_weights(v: np.ndarray) -> np.ndarray:
    v = np.maximum(v, 0.0)
    mean = v.mean()
    if mean <= 0.0:
        return np.ones_like(v)
    return v / mean


def adam_step(
    params: SisParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[SisParams, AdamState]:
    """One Adam update in place, then project v onto {v >= 0, mean(v) = 1}."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.s[name] = np.zeros_like(g)
        m = state.m[name]
        s = state.s[name]
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * g * g
        params[name] = params[name] - lr * (m / c1) / (np.sqrt(s / c2) + eps)
    if "v" in params.tensors:
        params["v"] = project_sample_weights(params["v"])
    return params, state


# ------------------------------------------------------------ checkpoints

_CKPT_HEAD = struct.Struct("<4sHIIIIIdd")


def save_checkpoint(params: SisParams, path: str | Path) -> None:
    """Binary checkpoint; layout documented in the README."""
    cfg = params.config
    params.validate()
    names = trainable_names(cfg) + list(BUFFER_NAMES)
    out = bytearray(
        _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, cfg.f, cfg.f_h, cfg.S, cfg.N_train, len(cfg.hidden_dims),
                        cfg.lambda_s, cfg.lambda_v)
    )
    out += struct.pack(f"<{len(cfg.hidden_dims)}I", *cfg.hidden_dims)
    out += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("ascii")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> SisParams:
    data = Path(path).read_bytes()
    try:
        magic, version, f, f_h, S, n_train, n_hidden, lam_s, lam_v = _CKPT_HEAD.unpack_from(data, 0)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off = _CKPT_HEAD.size
        hidden = struct.unpack_from(f"<{n_hidden}I", data, off)
        off += 4 * n_hidden
        cfg = SisConfig(f=f, f_h=f_h, hidden_dims=hidden, S=S, N_train=n_train, lambda_s=lam_s, lambda_v=lam_v)
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("ascii")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 8 * size
            tensors[name] = arr
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    params = SisParams(cfg, tensors)
    params.validate()
    return params
