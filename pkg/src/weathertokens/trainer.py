"""Adam + MSE training with early stopping, and the WMTK checkpoint format."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import ForecastSample, NormalizationStats, _atomic_write, stack_samples
from .encoder import EncoderConfig
from .errors import ConfigError, CorruptionError, FingerprintError, FormatError, NumericalError
from .transformer import ForecastModel, TransformerConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"WMTK"
CKPT_VERSION = 1
EVAL_BATCH = 32


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    precision: str = "32"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.precision not in ("32", "64"):
            raise ConfigError("precision must be '32' or '64'")


# ---------------------------------------------------------------------------
# optimiser


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray]],
    step: int,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> int:
    """One bias-corrected Adam update, in place. Returns the new step count."""
    m_all, v_all = moments
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for parameter {name!r} ({bad} entries) at step {step + 1}")
    step += 1
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = m_all[name], v_all[name]
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return step


class Adam:
    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        self.steps = adam_step(arrays, grads, (self.m, self.v), self.steps,
                               self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# early stopping


@dataclass
class EarlyStopping:
    """Strict-improvement early stopping on a validation loss."""

    patience: int = 20
    best_loss: float = float("inf")
    best_epoch: int = 0
    since_improvement: int = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record one epoch; returns True when ``loss`` is a new best."""
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.since_improvement = loss, epoch, 0
            return True
        self.since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience


# ---------------------------------------------------------------------------
# model state and checkpoints


def fingerprint_of(model_config: dict) -> bytes:
    blob = json.dumps(model_config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def model_config_dict(model: ForecastModel, stats: NormalizationStats | None) -> dict:
    # round-trip through JSON so in-memory and loaded configs compare equal
    return json.loads(json.dumps({
        "encoder": asdict(model.enc_config),
        "transformer": asdict(model.tr_config),
        "batch_norm": {"momentum": T.BN_MOMENTUM, "eps": T.BN_EPS},
        "stats_sha256": stats.digest() if stats is not None else None,
    }))


@dataclass
class ModelState:
    """Named parameters, BN buffers, Adam moments and the configuration they belong to."""

    config: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @property
    def fingerprint(self) -> bytes:
        return fingerprint_of(self.config["model"])

    @property
    def stats(self) -> NormalizationStats | None:
        text = self.config.get("stats")
        return NormalizationStats.from_text(text) if text else None

    @classmethod
    def capture(cls, model: ForecastModel, optimizer: Adam | None = None,
                stats: NormalizationStats | None = None, extra: dict | None = None) -> "ModelState":
        config = {"model": model_config_dict(model, stats), "stats": stats.to_text() if stats else None}
        config.update(json.loads(json.dumps(extra or {})))
        params = {k: p.data.copy() for k, p in model.parameters().items()}
        buffers = {k: b.copy() for k, b in model.buffers().items()}
        if optimizer is None:
            return cls(config, params, buffers)
        return cls(config, params, buffers,
                   {k: a.copy() for k, a in optimizer.m.items()},
                   {k: a.copy() for k, a in optimizer.v.items()},
                   optimizer.steps)

    def build_model(self) -> ForecastModel:
        cfg = self.config["model"]
        enc = dict(cfg["encoder"])
        enc["conv_filters"] = tuple(enc["conv_filters"])
        model = ForecastModel(EncoderConfig(**enc), TransformerConfig(**cfg["transformer"]))
        self.restore(model)
        return model

    def restore(self, model: ForecastModel, optimizer: Adam | None = None) -> None:
        named = model.parameters()
        if set(named) != set(self.params):
            raise FingerprintError("parameter names in state do not match the model")
        for k, p in named.items():
            if p.data.shape != self.params[k].shape:
                raise FingerprintError(f"shape mismatch for {k}: {p.data.shape} vs {self.params[k].shape}")
            p.data = self.params[k].astype(p.data.dtype, copy=True)
        model.load_buffers(self.buffers)
        if optimizer is not None and self.m:
            optimizer.m = {k: a.copy() for k, a in self.m.items()}
            optimizer.v = {k: a.copy() for k, a in self.v.items()}
            optimizer.steps = self.step


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptionError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def checkpoint_bytes(state: ModelState, include_optimizer: bool = True) -> bytes:
    config_blob = json.dumps(state.config, sort_keys=True, separators=(",", ":")).encode()
    parts = [
        CKPT_MAGIC,
        struct.pack("<H", CKPT_VERSION),
        state.fingerprint,
        struct.pack("<I", len(config_blob)),
        config_blob,
        _pack_table(state.params),
        _pack_table(state.buffers),
    ]
    if include_optimizer and state.m:
        parts.append(struct.pack("<BQ", 1, state.step))
        parts.append(_pack_table(state.m))
        parts.append(_pack_table(state.v))
    else:
        parts.append(struct.pack("<B", 0))
    return b"".join(parts)


def save_checkpoint(state: ModelState, path: str | Path, include_optimizer: bool = True) -> None:
    _atomic_write(Path(path), checkpoint_bytes(state, include_optimizer))


def load_checkpoint(path: str | Path, expected_fingerprint: bytes | None = None) -> ModelState:
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a WMTK checkpoint")
    (version,) = rd.unpack("<H")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    stored = rd.take(32)
    (n,) = rd.unpack("<I")
    try:
        config = json.loads(rd.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable configuration block ({exc})") from None
    if fingerprint_of(config["model"]) != stored:
        raise FingerprintError(f"{path}: stored fingerprint does not match the model configuration")
    if expected_fingerprint is not None and stored != expected_fingerprint:
        raise FingerprintError(f"{path}: checkpoint fingerprint differs from the expected model configuration")
    params = rd.table()
    buffers = rd.table()
    (has_opt,) = rd.unpack("<B")
    state = ModelState(config, params, buffers)
    if has_opt:
        (state.step,) = rd.unpack("<Q")
        state.m = rd.table()
        state.v = rd.table()
    if rd.pos != len(rd.raw):
        raise CorruptionError(f"{path}: {len(rd.raw) - rd.pos} unexpected trailing bytes")
    return state


def parameter_payload_bytes(state: ModelState) -> int:
    return 4 * int(np.sum([a.size for a in state.params.values()]))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class TrainResult:
    state: ModelState
    history: list[EpochRecord]
    best_epoch: int
    stopped_epoch: int

    def loss_log_csv(self) -> str:
        rows = ["epoch,train_mse,val_mse"]
        rows += [f"{r.epoch},{r.train_mse!r},{r.val_mse!r}" for r in self.history]
        return "\n".join(rows) + "\n"


def evaluate_mse(model: ForecastModel, samples: Sequence[ForecastSample], batch_size: int = EVAL_BATCH) -> float:
    """Eval-mode MSE of raw (unclamped) outputs over all hours of ``samples``."""
    weather, target = stack_samples(samples)
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            out = model.forward(T.Tensor(weather[i:i + batch_size]), training=False).data
            diff = out.astype(np.float64) - target[i:i + batch_size]
            total += float((diff * diff).sum())
            count += diff.size
    return total / count


def train(
    model: ForecastModel,
    train_samples: Sequence[ForecastSample],
    validation_samples: Sequence[ForecastSample],
    config: TrainConfig = TrainConfig(),
    stats: NormalizationStats | None = None,
    validation_fn: Callable[[ForecastModel, int], float] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on MSE with early stopping; returns the best-epoch state.

    ``validation_fn(model, epoch)`` overrides the validation MSE (used to
    replay prescribed loss traces).
    """
    if not train_samples or not validation_samples:
        raise ConfigError("training needs non-empty train and validation splits")
    weather, target = stack_samples(train_samples)
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    extra = {"train": asdict(config)}
    best = ModelState.capture(model, optimizer, stats, extra)
    history: list[EpochRecord] = []
    n = len(train_samples)
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            out = model.forward(T.Tensor(weather[idx]), training=True)
            loss = T.mse_loss(out, target[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {b}")
            T.backward(loss)
            optimizer.step()
            total += value * idx.size
        train_mse = total / n
        val_mse = validation_fn(model, epoch) if validation_fn else evaluate_mse(model, validation_samples)
        if not np.isfinite(val_mse):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch, train_mse, float(val_mse))
        history.append(record)
        if on_epoch:
            on_epoch(record)
        if stopper.update(epoch, val_mse):
            best = ModelState.capture(model, optimizer, stats, extra)
        if stopper.should_stop:
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    best.config["best_epoch"] = stopper.best_epoch
    best.restore(model)
    return TrainResult(best, history, stopper.best_epoch, epoch)
