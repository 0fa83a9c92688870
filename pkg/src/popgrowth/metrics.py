"""RMSE, MAE and R^2 plus evaluation reports at grid and census level."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LEVELS = ("grid", "census")
QUANTITIES = ("population_t1", "population_t2", "growth")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    entity_id: str
    y: float
    p: float
    level: str = "census"
    quantity: str = "growth"

    def __post_init__(self):
        if not (math.isfinite(self.y) and math.isfinite(self.p)):
            raise MetricError(f"{self.entity_id}: y and p must be finite")
        if self.level not in LEVELS:
            raise MetricError(f"level must be one of {LEVELS}")
        if self.quantity not in QUANTITIES:
            raise MetricError(f"quantity must be one of {QUANTITIES}")


def _arrays(records, p=None) -> tuple[np.ndarray, np.ndarray]:
    if p is not None:
        y_arr = np.asarray(records, dtype=np.float64)
        p_arr = np.asarray(p, dtype=np.float64)
    else:
        records = list(records)
        y_arr = np.array([r.y for r in records], dtype=np.float64)
        p_arr = np.array([r.p for r in records], dtype=np.float64)
    if y_arr.shape != p_arr.shape or y_arr.ndim != 1:
        raise MetricError(f"y and p must be 1-d and equally long, got {y_arr.shape} and {p_arr.shape}")
    if len(y_arr) == 0:
        raise MetricError("metrics need at least one record")
    return y_arr, p_arr


def rmse(records, p=None) -> float:
    """Root mean squared error. Accepts records, or parallel y and p sequences."""
    y, p = _arrays(records, p)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def mae(records, p=None) -> float:
    y, p = _arrays(records, p)
    return float(np.mean(np.abs(y - p)))


def r2(records, p=None) -> float:
    """1 - SS_res / SS_tot, with SS_tot taken about the mean of y."""
    y, p = _arrays(records, p)
    if len(y) < 2:
        raise MetricError("r2 needs at least two records")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("r2 is undefined for constant y")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _arrays(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.sum(xc ** 2)) * float(np.sum(yc ** 2)))
    if denom == 0.0:
        raise MetricError("correlation is undefined for constant input")
    return float(np.sum(xc * yc)) / denom


@dataclass
class EvaluationReport:
    level: str
    quantity: str
    records: list[PredictionRecord]
    rmse: float = field(init=False)
    mae: float = field(init=False)
    r2: float | None = field(init=False)
    n: int = field(init=False)
    method: str | None = None

    def __post_init__(self):
        if not self.records:
            raise MetricError("report has no records")
        self.n = len(self.records)
        self.rmse = rmse(self.records)
        self.mae = mae(self.records)
        try:
            self.r2 = r2(self.records)
        except MetricError:
            self.r2 = None

    def to_dict(self) -> dict:
        d = {
            "level": self.level,
            "quantity": self.quantity,
            "n": self.n,
            "rmse": self.rmse,
            "mae": self.mae,
            "r2": self.r2,
            "records": [{"id": r.entity_id, "y": r.y, "p": r.p} for r in self.records],
        }
        if self.method is not None:
            d["method"] = self.method
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        try:
            level, quantity = d["level"], d["quantity"]
            records = [PredictionRecord(r["id"], float(r["y"]), float(r["p"]), level, quantity) for r in d["records"]]
        except (KeyError, TypeError) as exc:
            raise MetricError(f"malformed report: {exc}") from None
        return cls(level, quantity, records, method=d.get("method"))

    @classmethod
    def load(cls, path: str | Path) -> "EvaluationReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise MetricError(f"{path}: not valid JSON ({exc})") from None

    def summary(self) -> dict:
        return {"level": self.level, "quantity": self.quantity, "method": self.method,
                "n": self.n, "rmse": self.rmse, "mae": self.mae, "r2": self.r2}


def _patch_fn(model, quantity: str) -> Callable:
    from .encoder import PopulationModel, predict_population
    from .growth import GrowthModel, predict_patch_growth

    if quantity == "growth":
        if isinstance(model, GrowthModel):
            return lambda s: predict_patch_growth(model, s)
        if isinstance(model, PopulationModel):
            return lambda s: predict_population(model, s.x_t2) - predict_population(model, s.x_t1)
    else:
        if isinstance(model, PopulationModel):
            return lambda patch: predict_population(model, patch)
        if isinstance(model, GrowthModel):
            raise MetricError("a growth model cannot predict population")
    if callable(model):
        return model
    raise MetricError(f"cannot evaluate {type(model).__name__} on {quantity}")


def evaluate(model, dataset, unit_ids: Iterable[str], level: str, quantity: str) -> EvaluationReport:
    """Compare predictions with truth on the given units.

    model is a PopulationModel (population, or PCC growth), a GrowthModel,
    or any callable mapping a RasterPatch (population) or BitemporalSample
    (growth) to a float. Grid level scores patches against the oracle;
    census level scores unit sums against census counts.
    """
    from .encoder import PopulationModel
    from .growth import GrowthModel, pcc_unit_growth, predict_unit_growth

    if level not in LEVELS or quantity not in QUANTITIES:
        raise MetricError(f"unsupported level/quantity {level}/{quantity}")
    unit_ids = sorted(unit_ids)
    if not unit_ids:
        raise MetricError("no units to evaluate")
    fn = _patch_fn(model, quantity)
    epoch = quantity[-2:] if quantity != "growth" else None
    method = None
    if quantity == "growth":
        method = "pcc" if isinstance(model, PopulationModel) else "proposed"

    records = []
    if level == "grid":
        if dataset.oracle is None:
            raise MetricError("grid-level evaluation needs an oracle")
        oracle = dataset.oracle
        for uid in unit_ids:
            for pid in sorted(dataset.unit(uid).patch_ids):
                if quantity == "growth":
                    y, p = oracle[pid].growth, fn(dataset.sample(pid))
                else:
                    y, p = oracle[pid].population(epoch), fn(dataset.patch(pid, epoch))
                records.append(PredictionRecord(pid, float(y), float(p), level, quantity))
    else:
        for uid in unit_ids:
            unit = dataset.unit(uid)
            pids = sorted(unit.patch_ids)
            if quantity == "growth":
                y = unit.growth
                if isinstance(model, GrowthModel):
                    p = predict_unit_growth(model, dataset, uid)
                elif isinstance(model, PopulationModel):
                    p = pcc_unit_growth(model, dataset, uid)
                else:
                    p = 0.0
                    for pid in pids:
                        p += fn(dataset.sample(pid))
            else:
                y = unit.population(epoch)
                p = 0.0
                for pid in pids:
                    p += fn(dataset.patch(pid, epoch))
            records.append(PredictionRecord(uid, float(y), float(p), level, quantity))
    return EvaluationReport(level, quantity, records, method=method)
