"""End-to-end training loop alternating hash-head epochs with center reassignment.

Randomness: the run seed feeds ``numpy.random.SeedSequence(seed).spawn(5)``;
the children, in order, drive codebook sampling, the initial assignment,
model initialization, per-epoch batch shuffling, and greedy class orders.
Toggling one feature therefore never shifts the draws of another.

Within an epoch the order is: train on all batches, reassign (if scheduled),
then advance the learning-rate schedule.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .assignment import (
    CenterAssignment,
    CostAccumulator,
    CostMatrix,
    head_candidates,
    head_cost_matrices,
    initial_assignment,
    solve_heads,
)
from .data import Dataset
from .errors import ConfigError, EmptyClassError, InfeasibleAssignmentError
from .hamming import (
    Codebook,
    HeadLayout,
    binarize,
    codebook_distance_stats,
    sample_codebook,
    slice_packed,
    write_codebook,
)
from .model import (
    AdamConfig,
    HashModel,
    LossConfig,
    backward,
    checkpoint_bytes,
    cosine_lr,
    encode,
    forward,
    optimizer_step,
    scale_factor,
)

log = logging.getLogger(__name__)

MODES = ("CRH", "CRH-M", "CRH-U")
STREAMS = ("codebook", "init", "model", "batch_order", "greedy_order")


def _interval(value) -> float:
    if value is None or value == "inf" or value == math.inf:
        return math.inf
    value = int(value)
    if value < 1:
        raise ConfigError(f"update interval must be >= 1 or 'inf', got {value}")
    return value


@dataclass(frozen=True)
class UpdateSchedule:
    """Reassign every ``warmup_interval`` epochs up to ``warmup_epochs``, then every ``later_interval``."""

    warmup_epochs: int = 20
    warmup_interval: float = 1
    later_interval: float = 5

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        object.__setattr__(self, "warmup_interval", _interval(self.warmup_interval))
        object.__setattr__(self, "later_interval", _interval(self.later_interval))

    @classmethod
    def never(cls) -> UpdateSchedule:
        return cls(0, math.inf, math.inf)

    @classmethod
    def every(cls, interval) -> UpdateSchedule:
        return cls(0, math.inf, interval)

    def to_dict(self) -> dict:
        enc = lambda v: "inf" if v == math.inf else int(v)  # noqa: E731
        return {"warmup_epochs": self.warmup_epochs, "warmup_interval": enc(self.warmup_interval),
                "later_interval": enc(self.later_interval)}


def should_update(epoch: int, schedule: UpdateSchedule) -> bool:
    """Whether a reassignment follows 1-based ``epoch``."""
    if epoch < 1:
        return False
    if epoch <= schedule.warmup_epochs:
        return schedule.warmup_interval != math.inf and epoch % schedule.warmup_interval == 0
    if schedule.later_interval == math.inf:
        return False
    return (epoch - schedule.warmup_epochs) % schedule.later_interval == 0


@dataclass(frozen=True)
class TrainConfig:
    K: int = 16
    M: int | None = None  # None: 2C
    H: int | None = None
    d: int | None = None  # None with H None: smallest power of two >= ceil(log2 M)
    lam: float = 0.1
    margin: float = 0.2
    s: float | str = "auto"
    epochs: int = 60
    batch_size: int = 128
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    update_schedule: UpdateSchedule = field(default_factory=UpdateSchedule)
    solver: str = "greedy"
    mode: str = "CRH"
    codebook_sampling: str = "unique"
    cost_source: str = "exact_recompute"
    greedy_order: str = "per_head"
    strict_heads: bool = False
    early_stop: bool = True

    def __post_init__(self):
        if isinstance(self.update_schedule, dict):
            object.__setattr__(self, "update_schedule", UpdateSchedule(**self.update_schedule))
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.solver not in ("greedy", "hungarian"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.codebook_sampling not in ("unique", "bernoulli"):
            raise ConfigError(f"unknown codebook sampling {self.codebook_sampling!r}")
        if self.cost_source not in ("exact_recompute", "incremental"):
            raise ConfigError(f"unknown cost source {self.cost_source!r}")
        if self.greedy_order not in ("per_head", "per_event"):
            raise ConfigError(f"unknown greedy order scope {self.greedy_order!r}")
        if self.s != "auto" and not (isinstance(self.s, (int, float)) and self.s > 0):
            raise ConfigError(f"s must be 'auto' or a positive number, got {self.s!r}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        out["update_schedule"] = self.update_schedule.to_dict()
        return out

    def replace(self, **changes) -> TrainConfig:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return TrainConfig(**data)

    # resolved values ------------------------------------------------------

    def codebook_size(self, num_classes: int) -> int:
        m = 2 * num_classes if self.M is None else int(self.M)
        if m < num_classes:
            raise InfeasibleAssignmentError(
                f"codebook size M={m} is smaller than C={num_classes}", available=m, needed=num_classes)
        return m

    def layout(self, m: int) -> HeadLayout:
        if self.mode == "CRH-M":
            return HeadLayout(1, self.K)
        if self.H is None and self.d is None:
            # smallest power of two not below ceil(log2 M)
            d = 1 << max(((m - 1).bit_length() - 1).bit_length(), 0)
            if d >= self.K or self.K % d:
                return HeadLayout(1, self.K)
            layout = HeadLayout.for_bits(self.K, head_bits=d)
        else:
            layout = HeadLayout.for_bits(self.K, self.H, self.d)
        if self.strict_heads:
            layout.check_strict(m)
        return layout

    def scale(self, num_classes: int) -> float:
        return scale_factor(num_classes) if self.s == "auto" else float(self.s)

    def loss_config(self, num_classes: int) -> LossConfig:
        return LossConfig(self.scale(num_classes), self.margin, self.lam)

    def adam_config(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, 1e-8, self.weight_decay)

    def reassigns(self) -> bool:
        return self.mode != "CRH-U"


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    reassigned: bool
    change_fraction: float | None
    d_min: int
    d_avg: float
    head_costs: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def change_fractions(self) -> list[tuple[int, float]]:
        return [(r.epoch, r.change_fraction) for r in self.records if r.reassigned]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


@dataclass
class TrainResult:
    model: HashModel
    assignment: CenterAssignment
    codebook: Codebook
    history: RunHistory
    initial: CenterAssignment
    config: TrainConfig
    stopped_early: bool = False


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


def initialize(config: TrainConfig, dataset: Dataset, streams: dict | None = None):
    """Codebook, initial assignment and model for a run."""
    if dataset.N == 0:
        raise ConfigError("dataset is empty")
    empty = dataset.empty_classes()
    if empty:
        raise EmptyClassError(empty[0])
    streams = streams or spawn_streams(config.seed)
    m = config.codebook_size(dataset.C)
    layout = config.layout(m)
    codebook = sample_codebook(config.K, m, config.codebook_sampling, streams["codebook"])
    assignment = initial_assignment(codebook, layout, dataset.C, streams["init"])
    model = HashModel.init(dataset.D, config.K, streams["model"])
    return codebook, assignment, model


def accumulate_costs(batches: Iterable[tuple[np.ndarray, np.ndarray]], codebook: Codebook,
                     layout: HeadLayout, num_classes: int) -> list[CostMatrix]:
    """Per-head cost matrices from a stream of (packed K-bit codes, labels) batches."""
    accs, firsts = [], []
    for h in range(layout.H):
        cand, first = head_candidates(codebook, layout, h)
        accs.append(CostAccumulator(num_classes, cand, layout.d))
        firsts.append(first)
    for codes, labels in batches:
        for h in range(layout.H):
            start, stop = layout.bounds(h)
            sub = codes if layout.H == 1 else slice_packed(codes, codebook.K, start, stop)
            accs[h].add(sub, labels)
    return [acc.matrix(first) for acc, first in zip(accs, firsts)]


def train(config: TrainConfig, dataset: Dataset, executor=None) -> TrainResult:
    streams = spawn_streams(config.seed)
    codebook, assignment, model = initialize(config, dataset, streams)
    initial = assignment
    layout = assignment.layout
    loss_cfg = config.loss_config(dataset.C)
    adam = config.adam_config()
    x = dataset.features.astype(np.float64)
    y = dataset.labels
    n = dataset.N
    centers = assignment.center_signs().astype(np.float64)
    history = RunHistory()
    prev_zero_event = False
    prev_loss = None
    stopped = False

    for epoch in range(1, config.epochs + 1):
        lr = cosine_lr(config.lr, epoch - 1, config.epochs)
        update = config.reassigns() and should_update(epoch, config.update_schedule)
        stream = [] if update and config.cost_source == "incremental" else None
        order = streams["batch_order"].permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            xb, yb = x[idx], y[idx]
            if stream is not None:
                stream.append((binarize(forward(model, xb)[1]), yb))
            loss, dW, db = backward(model, xb, yb, centers, loss_cfg)
            optimizer_step(model, dW, db, lr, adam)
            total += loss * idx.shape[0]
        mean_loss = total / n
        model.epoch = epoch

        change = None
        head_costs = None
        if update:
            try:
                if stream is not None:
                    mats = accumulate_costs(stream, codebook, layout, dataset.C)
                else:
                    codes = binarize(encode(model, x))
                    mats = head_cost_matrices(codes, y, codebook, layout)
                new = solve_heads(mats, codebook, layout, config.solver, streams["greedy_order"],
                                  config.greedy_order, executor)
            except InfeasibleAssignmentError as exc:
                raise InfeasibleAssignmentError(f"epoch {epoch}: {exc}", exc.head, exc.available,
                                                exc.needed) from exc
            change = float(new.changed(assignment).mean())
            head_costs = [float(t) for t in new.totals]
            assignment = new
            centers = assignment.center_signs().astype(np.float64)

        stats = codebook_distance_stats(centers)
        history.append(EpochRecord(epoch, mean_loss, lr, update, change, stats.d_min,
                                   stats.d_avg_float, head_costs))
        log.info("epoch %d loss %.6f%s", epoch, mean_loss,
                 f" change {change:.3f}" if change is not None else "")

        if update and config.early_stop:
            zero = change == 0.0
            if zero and prev_zero_event and prev_loss is not None and abs(prev_loss - mean_loss) < 1e-6:
                stopped = True
                break
            prev_zero_event = zero
        prev_loss = mean_loss

    return TrainResult(model, assignment, codebook, history, initial, config, stopped)


# ---------------------------------------------------------------------------
# run directories


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def write_run(result: TrainResult, out_dir) -> dict:
    """Write every run artifact plus a manifest of seeds and SHA-256 hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "config.json": _json_bytes(result.config.to_dict()),
        "assignment.json": _json_bytes(result.assignment.to_json_dict()),
        "initial_assignment.json": _json_bytes(result.initial.to_json_dict()),
        "model.ckpt": checkpoint_bytes(result.model, result.config.update_schedule.to_dict()),
        "history.jsonl": result.history.to_jsonl().encode(),
    }
    for name, blob in files.items():
        (out / name).write_bytes(blob)
    write_codebook(result.codebook, out / "codebook.crhc")
    hashes = {name: hashlib.sha256((out / name).read_bytes()).hexdigest()
              for name in sorted([*files, "codebook.crhc"])}
    manifest = {
        "seed": result.config.seed,
        "streams": list(STREAMS),
        "files": hashes,
        "initial_assignment": result.initial.to_json_dict(),
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
    }
    (out / "manifest.json").write_bytes(_json_bytes(manifest))
    return manifest
