"""Experiment configuration (a single JSON file, validated before any work)."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .growth import WHITEN_RIDGE
from .synthcity import SynthConfig, SynthConfigError
from .training import TrainConfig

OUT_ENV = "POPGROWTH_OUT"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _train_config(d: dict | None, where: str, seed: int) -> TrainConfig:
    d = dict(d or {})
    d.setdefault("seed", seed)
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown config key")


@dataclass
class GrowthOptions:
    enabled: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    reuse_pretrain_hparams: bool = False
    head_init: str = "population"
    combine: str = "difference"
    use_cache: bool = True
    whiten: float | None = WHITEN_RIDGE


@dataclass
class EvalOptions:
    grid_epoch: str = "t2"
    plots: bool = False


@dataclass
class ExperimentConfig:
    dataset: Path
    output_dir: Path
    seed: int = 42
    width: float = 1.0
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    growth: GrowthOptions = field(default_factory=GrowthOptions)
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    synth: SynthConfig | None = None
    source: dict = field(default_factory=dict, repr=False)

    TOP_KEYS = {"dataset", "output_dir", "seed", "width", "pretrain", "growth", "evaluation", "synth"}
    GROWTH_KEYS = {"enabled", "train", "reuse_pretrain_hparams", "head_init", "combine", "use_cache", "whiten"}
    EVAL_KEYS = {"grid_epoch", "plots"}

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None, output_dir: str | Path | None = None,
                  base_dir: Path | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a JSON object")
        _check_keys(d, cls.TOP_KEYS, "")
        base_dir = base_dir or Path.cwd()
        src = json.loads(json.dumps(d))
        if seed is not None:
            src["seed"] = seed
        seed_val = src.get("seed", 42)
        if not isinstance(seed_val, int) or isinstance(seed_val, bool) or seed_val < 0:
            raise ConfigError("seed", f"must be a non-negative integer, got {seed_val!r}")

        out = output_dir or os.environ.get(OUT_ENV) or src.get("output_dir")
        if not out:
            raise ConfigError("output_dir", "required (or pass --out / set POPGROWTH_OUT)")
        if "dataset" not in src:
            raise ConfigError("dataset", "required")

        width = src.get("width", 1.0)
        if not isinstance(width, (int, float)) or isinstance(width, bool) or width <= 0:
            raise ConfigError("width", f"must be a positive number, got {width!r}")

        g = src.get("growth", {}) or {}
        _check_keys(g, cls.GROWTH_KEYS, "growth")
        growth = GrowthOptions(
            enabled=bool(g.get("enabled", True)),
            train=_train_config(g.get("train"), "growth.train", seed_val),
            reuse_pretrain_hparams=bool(g.get("reuse_pretrain_hparams", False)),
            head_init=g.get("head_init", "population"),
            combine=g.get("combine", "difference"),
            use_cache=bool(g.get("use_cache", True)),
            whiten=g.get("whiten", WHITEN_RIDGE),
        )
        if growth.whiten is not None and (
            not isinstance(growth.whiten, (int, float)) or isinstance(growth.whiten, bool) or growth.whiten <= 0
        ):
            raise ConfigError("growth.whiten", f"must be a positive number or null, got {growth.whiten!r}")
        if growth.head_init not in ("population", "random"):
            raise ConfigError("growth.head_init", f"must be 'population' or 'random', got {growth.head_init!r}")
        if growth.combine not in ("difference", "concat"):
            raise ConfigError("growth.combine", f"must be 'difference' or 'concat', got {growth.combine!r}")

        e = src.get("evaluation", {}) or {}
        _check_keys(e, cls.EVAL_KEYS, "evaluation")
        evaluation = EvalOptions(grid_epoch=e.get("grid_epoch", "t2"), plots=bool(e.get("plots", False)))
        if evaluation.grid_epoch not in ("t1", "t2"):
            raise ConfigError("evaluation.grid_epoch", "must be 't1' or 't2'")

        synth = None
        if src.get("synth") is not None:
            s = dict(src["synth"])
            s.setdefault("seed", seed_val)
            try:
                synth = SynthConfig.from_dict(s)
            except SynthConfigError as exc:
                raise ConfigError(f"synth.{exc.field}", str(exc)) from None
            except TypeError as exc:
                raise ConfigError("synth", str(exc)) from None

        def resolve(p) -> Path:
            p = Path(p)
            return p if p.is_absolute() else base_dir / p

        return cls(
            dataset=resolve(src["dataset"]),
            output_dir=Path(out) if output_dir or os.environ.get(OUT_ENV) else resolve(out),
            seed=seed_val,
            width=float(width),
            pretrain=_train_config(src.get("pretrain"), "pretrain", seed_val),
            growth=growth,
            evaluation=evaluation,
            synth=synth,
            source=src,
        )

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        return cls.from_dict(d, base_dir=path.parent, **overrides)

    def snapshot(self) -> dict:
        return {
            "dataset": str(self.dataset),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "width": self.width,
            "pretrain": self.pretrain.to_dict(),
            "growth": {
                "enabled": self.growth.enabled,
                "train": self.growth.train.to_dict(),
                "reuse_pretrain_hparams": self.growth.reuse_pretrain_hparams,
                "head_init": self.growth.head_init,
                "combine": self.growth.combine,
                "use_cache": self.growth.use_cache,
                "whiten": self.growth.whiten,
            },
            "evaluation": {"grid_epoch": self.evaluation.grid_epoch, "plots": self.evaluation.plots},
            "synth": self.synth.to_dict() if self.synth else None,
        }
