"""Hyper-parameter grid search, early stopping and checkpoints.

Shared by grid-level pretraining and census-level growth training.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import torch

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rates: tuple[float, ...] = (1e-5, 1e-4, 1e-3)
    batch_sizes: tuple[int, ...] = (8, 16)
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    max_epochs: int = 100
    # None disables early stopping
    patience: int | None = 5
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "learning_rates", tuple(float(v) for v in self.learning_rates))
        object.__setattr__(self, "batch_sizes", tuple(int(v) for v in self.batch_sizes))
        object.__setattr__(self, "betas", tuple(float(v) for v in self.betas))
        if not self.learning_rates or not self.batch_sizes:
            raise ValueError("learning_rates and batch_sizes must be non-empty")
        if any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning rates must be positive")
        if any(bs < 1 for bs in self.batch_sizes):
            raise ValueError("batch sizes must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience is not None and not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must satisfy 0 < patience < max_epochs")

    @property
    def grid(self) -> list[tuple[float, int]]:
        return [(lr, bs) for lr in self.learning_rates for bs in self.batch_sizes]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig key {unknown[0]!r}")
        return cls(**d)


@dataclass
class RunResult:
    lr: float
    batch_size: int
    best_epoch: int | None = None
    best_metric: float = math.inf
    stop_epoch: int = 0
    status: str = "ok"
    history: list[dict] = field(default_factory=list)
    state: dict | None = None

    def log_record(self) -> dict:
        return {
            "lr": self.lr,
            "batch": self.batch_size,
            "best_epoch": self.best_epoch,
            "best_val_metric": self.best_metric if math.isfinite(self.best_metric) else None,
            "stop_epoch": self.stop_epoch,
            "status": self.status,
        }


def fit(
    train_epoch: Callable[[int], float],
    validate: Callable[[], float],
    snapshot: Callable[[], dict],
    result: RunResult,
    max_epochs: int,
    patience: int | None,
) -> RunResult:
    """Epoch loop with early stopping on a lower-is-better validation metric.

    Epochs are numbered from 1. Training stops once `patience` consecutive
    epochs fail to improve on the best value; the best-epoch state is kept.
    """
    since_best = 0
    for epoch in range(1, max_epochs + 1):
        loss = train_epoch(epoch)
        if not math.isfinite(loss):
            result.status = f"aborted: non-finite loss at epoch {epoch}"
            result.stop_epoch = epoch
            log.warning("lr=%g batch=%d %s", result.lr, result.batch_size, result.status)
            return result
        metric = validate()
        result.history.append({"epoch": epoch, "train_loss": loss, "val_metric": metric})
        result.stop_epoch = epoch
        if not math.isfinite(metric):
            result.status = f"aborted: non-finite validation metric at epoch {epoch}"
            return result
        if metric < result.best_metric:
            result.best_metric = metric
            result.best_epoch = epoch
            result.state = snapshot()
            since_best = 0
        else:
            since_best += 1
            if patience is not None and since_best >= patience:
                break
    return result


def select_best(results: list[RunResult]) -> RunResult:
    """Lowest validation metric; ties go to the lower lr, then smaller batch."""
    ok = [r for r in results if r.state is not None and math.isfinite(r.best_metric)]
    if not ok:
        raise TrainingError("every hyper-parameter run failed")
    return min(ok, key=lambda r: (r.best_metric, r.lr, r.batch_size))


def grid_search(run: Callable[[float, int], RunResult], config: TrainConfig) -> tuple[RunResult, list[dict]]:
    results = []
    for lr, bs in config.grid:
        res = run(lr, bs)
        log.info(
            "lr=%g batch=%d best_epoch=%s best_val=%.4f stop=%d",
            lr, bs, res.best_epoch, res.best_metric, res.stop_epoch,
        )
        results.append(res)
    best = select_best(results)
    return best, [r.log_record() for r in results]


def run_seed(seed: int, lr: float, batch_size: int) -> int:
    """Seed for one grid point, independent of the order runs execute in."""
    digest = hashlib.sha256(f"{seed}:{lr!r}:{batch_size}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def state_copy(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def state_hash(state: dict) -> str:
    """Content hash over tensor bytes, ordered by key."""
    h = hashlib.sha256()
    for k in sorted(state):
        v = state[k]
        h.update(k.encode())
        if isinstance(v, torch.Tensor):
            h.update(str(v.dtype).encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(v).encode())
    return h.hexdigest()


@dataclass
class Checkpoint:
    kind: str  # "population" or "growth"
    state: dict
    config: dict
    history: list[dict]
    selected: dict
    seed: int
    search_log: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(
            {
                "kind": self.kind,
                "state": self.state,
                "config": json.dumps(self.config, sort_keys=True),
                "history": json.dumps(self.history),
                "selected": json.dumps(self.selected, sort_keys=True),
                "seed": self.seed,
                "search_log": json.dumps(self.search_log),
                "meta": json.dumps(self.meta, sort_keys=True),
            },
            buf,
        )
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            raw = torch.load(Path(path), map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise TrainingError(f"checkpoint not found: {path}") from None
        return cls(
            kind=raw["kind"],
            state=raw["state"],
            config=json.loads(raw["config"]),
            history=json.loads(raw["history"]),
            selected=json.loads(raw["selected"]),
            seed=int(raw["seed"]),
            search_log=json.loads(raw["search_log"]),
            meta=json.loads(raw["meta"]),
        )

    def content_hash(self) -> str:
        return state_hash(self.state)

    def copy(self) -> "Checkpoint":
        return copy.deepcopy(self)
