"""Linear + tanh hash head, its training losses, analytic gradients and optimizer.

Shapes: features ``x`` are (N, D); pre-activations ``v`` and relaxed codes
``h = tanh(v)`` are (N, K); centers are (C, K) with +-1 entries; labels are
(N, C) multi-hot. Everything is float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    s: float
    margin: float = 0.2
    lam: float = 0.1

    def __post_init__(self):
        if not self.s > 0:
            raise ConfigError(f"scale s must be > 0, got {self.s}")
        if not 0 <= self.margin < 1:
            raise ConfigError(f"margin must be in [0, 1), got {self.margin}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


def scale_factor(num_classes: int) -> float:
    """sqrt(2) * ln(C - 1)."""
    if num_classes < 3:
        raise ConfigError(f"automatic scale needs C >= 3, got {num_classes}")
    return math.sqrt(2.0) * math.log(num_classes - 1)


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5


class HashModel:
    """Parameters ``W`` (D, K) and ``b`` (K,) plus Adam moment buffers."""

    def __init__(self, W: np.ndarray, b: np.ndarray | None = None):
        W = np.array(W, dtype=np.float64)
        if W.ndim != 2:
            raise ConfigError("W must be a (D, K) matrix")
        self.W = W
        self.b = np.zeros(W.shape[1]) if b is None else np.array(b, dtype=np.float64).reshape(-1)
        if self.b.shape != (W.shape[1],):
            raise ConfigError("bias length must equal K")
        self.mW = np.zeros_like(self.W)
        self.vW = np.zeros_like(self.W)
        self.mb = np.zeros_like(self.b)
        self.vb = np.zeros_like(self.b)
        self.step = 0
        self.epoch = 0

    @classmethod
    def init(cls, D: int, K: int, seed=None) -> HashModel:
        """W ~ U(-1/sqrt(D), 1/sqrt(D)), b = 0."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(D)
        return cls(rng.uniform(-bound, bound, size=(D, K)))

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.W.shape[1]

    def copy(self) -> HashModel:
        other = HashModel(self.W, self.b)
        for name in ("mW", "vW", "mb", "vb"):
            setattr(other, name, getattr(self, name).copy())
        other.step, other.epoch = self.step, self.epoch
        return other

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in (self.W, self.b, self.mW, self.vW, self.mb, self.vb))


def forward(model: HashModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.shape[1] != model.D:
        raise ConfigError(f"feature dimension {x2.shape[1]} does not match model D={model.D}")
    v = x2 @ model.W + model.b
    h = np.tanh(v)
    return (v[0], h[0]) if single else (v, h)


def encode(model: HashModel, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Relaxed codes h for all rows, in fixed-size chunks."""
    x = np.asarray(x)
    parts = [forward(model, x[i:i + batch_size])[1] for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, model.K))


def margin_sim(v: np.ndarray, center: np.ndarray, is_target: bool, margin: float) -> float:
    v = np.asarray(v, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ConfigError("margin_sim is undefined for a zero vector")
    cos = float(v @ c) / (nv * np.linalg.norm(c))
    return cos - margin if is_target else cos


def _check_batch(v: np.ndarray, labels: np.ndarray, centers: np.ndarray):
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    if v.ndim != 2 or y.shape != (v.shape[0], c.shape[0]) or c.shape[1] != v.shape[1]:
        raise ConfigError(f"shape mismatch: v {v.shape}, labels {y.shape}, centers {c.shape}")
    if c.shape[0] < 2:
        raise ConfigError("need at least 2 centers")
    card = y.sum(axis=1)
    if (card <= 0).any():
        raise ConfigError(f"sample {int(np.flatnonzero(card <= 0)[0])} has no label")
    return v, y, c, card


def _logits(v, y, c, cfg: LossConfig):
    norm = np.maximum(np.linalg.norm(v, axis=1), NORM_EPS)
    u = v / norm[:, None]
    cnorm = np.linalg.norm(c, axis=1)
    cos = (u @ c.T) / cnorm
    return cfg.s * (cos - cfg.margin * y), u, norm, cnorm


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def probabilities(v, labels, centers, cfg: LossConfig) -> np.ndarray:
    v, y, c, _ = _check_batch(v, labels, centers)
    return np.exp(_log_softmax(_logits(v, y, c, cfg)[0]))


def loss_ce(v, labels, centers, cfg: LossConfig) -> float:
    """Margin cosine softmax cross-entropy, targets spread evenly over each sample's labels."""
    v, y, c, card = _check_batch(v, labels, centers)
    logp = _log_softmax(_logits(v, y, c, cfg)[0])
    target = y / card[:, None]
    return float(-(target * logp).sum() / v.shape[0])


def loss_q(h) -> float:
    h = np.asarray(h, dtype=np.float64)
    return float(((np.abs(h) - 1.0) ** 2).mean())


def loss_total(model: HashModel, x, labels, centers, cfg: LossConfig) -> float:
    v, h = forward(model, np.atleast_2d(x))
    return loss_ce(v, labels, centers, cfg) + cfg.lam * loss_q(h)


def backward(model: HashModel, x, labels, centers, cfg: LossConfig):
    """Loss value and its exact gradients ``(loss, dW, db)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v, h = forward(model, x)
    v, y, c, card = _check_batch(v, labels, centers)
    n, k = v.shape
    z, u, norm, cnorm = _logits(v, y, c, cfg)
    logp = _log_softmax(z)
    p = np.exp(logp)
    target = y / card[:, None]
    ce = float(-(target * logp).sum() / n)
    lq = float(((np.abs(h) - 1.0) ** 2).mean())

    dz = (p - target) / n
    du = cfg.s * (dz / cnorm) @ c
    # d(v/|v|)/dv projects out the radial part; inside the guard u = v/eps, so it is I/eps.
    guarded = np.linalg.norm(v, axis=1) < NORM_EPS
    radial = (u * du).sum(axis=1, keepdims=True)
    dv = np.where(guarded[:, None], du, du - u * radial) / norm[:, None]
    if cfg.lam:
        dh = 2.0 * (np.abs(h) - 1.0) * np.sign(h) / (n * k)
        dv = dv + cfg.lam * dh * (1.0 - h * h)
    return ce + cfg.lam * lq, x.T @ dv, dv.sum(axis=0)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from ``base_lr`` at epoch 0 down to 0 at ``total_epochs``."""
    if total_epochs <= 0:
        return base_lr
    t = min(max(epoch, 0), total_epochs)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total_epochs))


def optimizer_step(model: HashModel, dW: np.ndarray, db: np.ndarray, lr: float, cfg: AdamConfig) -> None:
    """One Adam step in place; weight decay is decoupled and touches W only."""
    if not (np.isfinite(dW).all() and np.isfinite(db).all()):
        raise FloatingPointError("non-finite gradient")
    model.step += 1
    t = model.step
    b1, b2 = cfg.beta1, cfg.beta2
    for p, g, m, s in ((model.W, dW, model.mW, model.vW), (model.b, db, model.mb, model.vb)):
        m *= b1
        m += (1 - b1) * g
        s *= b2
        s += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        s_hat = s / (1 - b2 ** t)
        if p is model.W and cfg.weight_decay:
            p -= lr * cfg.weight_decay * p
        p -= lr * m_hat / (np.sqrt(s_hat) + cfg.eps)
    if not model.is_finite():
        raise FloatingPointError("model parameters became non-finite")


# ---------------------------------------------------------------------------
# checkpoints: u32 header length, JSON header, then little-endian float64 arrays

_ARRAYS = ("W", "b", "mW", "vW", "mb", "vb")


def checkpoint_bytes(model: HashModel, schedule: dict | None = None) -> bytes:
    header = {
        "D": model.D,
        "K": model.K,
        "epoch": model.epoch,
        "step": model.step,
        "schedule": schedule or {},
        "arrays": [{"name": n, "length": int(getattr(model, n).size)} for n in _ARRAYS],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(getattr(model, n), dtype="<f8").tobytes() for n in _ARRAYS)
    return struct.pack("<I", len(head)) + head + body


def model_from_checkpoint(data: bytes) -> tuple[HashModel, dict]:
    if len(data) < 4:
        raise DataFormatError("checkpoint truncated before header length", 0)
    (hlen,) = struct.unpack_from("<I", data)
    try:
        header = json.loads(data[4:4 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"unreadable checkpoint header: {exc}", 4) from None
    D, K = header["D"], header["K"]
    lengths = {a["name"]: a["length"] for a in header["arrays"]}
    expected = 4 + hlen + 8 * sum(lengths.values())
    if len(data) != expected:
        raise DataFormatError(f"checkpoint length mismatch: expected {expected} bytes, got {len(data)}",
                              min(len(data), expected))
    off = 4 + hlen
    arrays = {}
    for name in _ARRAYS:
        n = lengths[name]
        arrays[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
    model = HashModel(arrays["W"].reshape(D, K), arrays["b"])
    model.mW, model.vW = arrays["mW"].reshape(D, K), arrays["vW"].reshape(D, K)
    model.mb, model.vb = arrays["mb"], arrays["vb"]
    model.step, model.epoch = header["step"], header["epoch"]
    return model, header


def save_checkpoint(model: HashModel, path, schedule: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, schedule))


def load_checkpoint(path) -> HashModel:
    return model_from_checkpoint(Path(path).read_bytes())[0]
