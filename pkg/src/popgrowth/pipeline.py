"""Experiment stages: data, pretraining, growth training, evaluation, outputs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import ExperimentConfig
from .encoder import load_population_model, pretrain_grid
from .geodata import MANIFEST_NAME, Dataset, DatasetSplit, load_dataset, split_units, write_dataset
from .growth import load_growth_model, predict_patch_growth, train_census_level
from .metrics import EvaluationReport, evaluate
from .synthcity import generate_city
from .training import Checkpoint

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunRecord:
    config: dict
    inputs: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def save(self, path: Path) -> Path:
        path.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n")
        return path


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dataset_hash(root: Path) -> str:
    """Hash of the manifest and every tile, in sorted name order."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class Layout:
    """Output directory structure of one experiment."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def __getattr__(self, name):
        paths = {
            "split": "split.json",
            "population_ckpt": "checkpoints/population.pt",
            "growth_ckpt": "checkpoints/growth.pt",
            "pretrain_log": "logs/pretrain_search.json",
            "growth_log": "logs/growth_search.json",
            "reports": "reports",
            "scatter": "scatter",
            "metrics": "metrics.json",
            "growth_map": "maps/growth_map.ndjson",
            "unit_growth": "maps/unit_growth.csv",
            "plots": "plots",
            "run_record": "run_record.json",
        }
        if name not in paths:
            raise AttributeError(name)
        return self.root / paths[name]


def _stage(name: str, timings: dict):
    class _Ctx:
        def __enter__(self):
            self.t = time.perf_counter()
            log.info("stage %s", name)

        def __exit__(self, exc_type, exc, tb):
            timings[name] = round(time.perf_counter() - self.t, 3)
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False

    return _Ctx()


def prepare_dataset(cfg: ExperimentConfig) -> Dataset:
    if not (cfg.dataset / MANIFEST_NAME).exists():
        if cfg.synth is None:
            raise FileNotFoundError(f"no dataset at {cfg.dataset} and no synth block to generate one")
        write_dataset(generate_city(cfg.synth), cfg.dataset)
    return load_dataset(cfg.dataset)


def load_or_make_split(dataset: Dataset, cfg: ExperimentConfig, layout: Layout) -> DatasetSplit:
    split = split_units(dataset.units.values(), cfg.seed)
    layout.split.parent.mkdir(parents=True, exist_ok=True)
    layout.split.write_text(json.dumps(split.to_dict(), indent=1) + "\n")
    return split


def run_pretrain(dataset: Dataset, split: DatasetSplit, cfg: ExperimentConfig, layout: Layout) -> Checkpoint:
    ckpt, search_log = pretrain_grid(
        dataset, split.train, split.val, cfg.pretrain, cfg.width, cfg.evaluation.grid_epoch
    )
    ckpt.save(layout.population_ckpt)
    layout.pretrain_log.parent.mkdir(parents=True, exist_ok=True)
    layout.pretrain_log.write_text(json.dumps(search_log, indent=1) + "\n")
    return ckpt


def run_growth(dataset: Dataset, split: DatasetSplit, cfg: ExperimentConfig, layout: Layout,
               encoder_ckpt: Checkpoint) -> Checkpoint:
    hparams = None
    if cfg.growth.reuse_pretrain_hparams:
        hparams = (encoder_ckpt.selected["lr"], encoder_ckpt.selected["batch"])
    ckpt, search_log = train_census_level(
        encoder_ckpt, dataset, split, cfg.growth.train, hparams=hparams,
        use_cache=cfg.growth.use_cache, combine=cfg.growth.combine, head_init=cfg.growth.head_init,
        whiten=cfg.growth.whiten,
    )
    ckpt.meta["encoder_checkpoint"] = str(layout.population_ckpt)
    ckpt.save(layout.growth_ckpt)
    layout.growth_log.parent.mkdir(parents=True, exist_ok=True)
    layout.growth_log.write_text(json.dumps(search_log, indent=1) + "\n")
    return ckpt


def write_scatter_csv(report: EvaluationReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "y", "p"])
        for r in report.records:
            w.writerow([r.entity_id, repr(r.y), repr(r.p)])
    return path


def population_reports(dataset: Dataset, split: DatasetSplit, pop_model, cfg: ExperimentConfig) -> dict:
    epoch = cfg.evaluation.grid_epoch
    reports = {}
    if dataset.oracle is not None:
        reports[f"grid_population_{epoch}"] = evaluate(pop_model, dataset, split.test, "grid", f"population_{epoch}")
    reports["census_population_t1"] = evaluate(pop_model, dataset, split.test, "census", "population_t1")
    reports["census_population_t2"] = evaluate(pop_model, dataset, split.test, "census", "population_t2")
    return reports


def growth_reports(dataset: Dataset, split: DatasetSplit, pop_model, growth_model) -> dict:
    return {
        "census_growth_proposed": evaluate(growth_model, dataset, split.test, "census", "growth"),
        "census_growth_pcc": evaluate(pop_model, dataset, split.test, "census", "growth"),
    }


def write_growth_maps(dataset: Dataset, split: DatasetSplit, growth_model, layout: Layout) -> dict:
    """Per-cell predicted growth (ndjson) and per-unit D vs dY (csv)."""
    layout.growth_map.parent.mkdir(parents=True, exist_ok=True)
    which = {uid: name for name in ("train", "val", "test") for uid in getattr(split, name)}
    lines = []
    unit_rows = []
    for uid in dataset.unit_ids:
        total = 0.0
        for pid in sorted(dataset.unit(uid).patch_ids):
            value = predict_patch_growth(growth_model, dataset.sample(pid))
            total += value
            patch = dataset.patch(pid, "t1")
            lines.append(json.dumps({"grid_row": patch.grid_row, "grid_col": patch.grid_col,
                                     "unit_id": uid, "value": value}))
        unit_rows.append([uid, which.get(uid, ""), repr(total), repr(dataset.unit(uid).growth)])
    layout.growth_map.write_text("\n".join(lines) + "\n")
    with layout.unit_growth.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "split", "predicted_growth", "census_growth"])
        w.writerows(unit_rows)
    return {"growth_map": str(layout.growth_map), "unit_growth": str(layout.unit_growth)}


def write_unit_maps(dataset: Dataset, layout: Layout) -> dict:
    """Choropleth-style cell maps of per-unit predicted and census growth."""
    import csv as _csv

    rows = {r["unit_id"]: r for r in _csv.DictReader(layout.unit_growth.open())}
    out = {}
    for key, column in (("unit_map_predicted", "predicted_growth"), ("unit_map_census", "census_growth")):
        path = layout.growth_map.parent / f"{key}.ndjson"
        lines = []
        for uid in dataset.unit_ids:
            for pid in sorted(dataset.unit(uid).patch_ids):
                patch = dataset.patch(pid, "t1")
                lines.append(json.dumps({"grid_row": patch.grid_row, "grid_col": patch.grid_col,
                                         "unit_id": uid, "value": float(rows[uid][column])}))
        path.write_text("\n".join(lines) + "\n")
        out[key] = str(path)
    return out


def save_reports(reports: dict, layout: Layout) -> tuple[dict, dict]:
    paths, scatter = {}, {}
    for name, report in reports.items():
        paths[name] = str(report.save(layout.reports / f"{name}.json"))
        scatter[name] = str(write_scatter_csv(report, layout.scatter / f"{name}.csv"))
    return paths, scatter


def write_metrics(reports: dict, layout: Layout) -> Path:
    summary = {name: reports[name].summary() for name in sorted(reports)}
    layout.metrics.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return layout.metrics


def run_pipeline(cfg: ExperimentConfig) -> RunRecord:
    """pretrain -> train-growth -> evaluate -> reports, scatter data and maps."""
    torch.use_deterministic_algorithms(True)
    layout = Layout(cfg.output_dir)
    layout.root.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config=cfg.snapshot())

    with _stage("data", record.timings):
        dataset = prepare_dataset(cfg)
        split = load_or_make_split(dataset, cfg, layout)
        record.inputs = {
            "dataset": str(cfg.dataset),
            "manifest_sha256": file_hash(cfg.dataset / MANIFEST_NAME),
            "dataset_sha256": dataset_hash(cfg.dataset),
        }

    with _stage("pretrain", record.timings):
        pop_ckpt = run_pretrain(dataset, split, cfg, layout)
        record.checkpoints["population"] = {"path": str(layout.population_ckpt), "hash": pop_ckpt.content_hash()}
        pop_model = load_population_model(pop_ckpt)

    reports = {}
    with _stage("evaluate-population", record.timings):
        reports.update(population_reports(dataset, split, pop_model, cfg))

    if cfg.growth.enabled:
        with _stage("train-growth", record.timings):
            growth_ckpt = run_growth(dataset, split, cfg, layout, pop_ckpt)
            record.checkpoints["growth"] = {"path": str(layout.growth_ckpt), "hash": growth_ckpt.content_hash(),
                                            "encoder_hash": growth_ckpt.meta["encoder_hash"]}
            growth_model = load_growth_model(growth_ckpt, pop_ckpt)
        with _stage("evaluate-growth", record.timings):
            reports.update(growth_reports(dataset, split, pop_model, growth_model))
            record.outputs.update(write_growth_maps(dataset, split, growth_model, layout))
            record.outputs.update(write_unit_maps(dataset, layout))

    with _stage("write-reports", record.timings):
        record.reports, scatter = save_reports(reports, layout)
        record.outputs["scatter"] = scatter
        record.outputs["metrics"] = str(write_metrics(reports, layout))

    if cfg.evaluation.plots:
        with _stage("plot", record.timings):
            record.outputs["plots"] = make_plots(layout, record)

    record.save(layout.run_record)
    return record


def make_plots(layout: Layout, record: RunRecord) -> list[str]:
    from .plotting import growth_map_plot, scatter_plot

    images = []
    for name, path in sorted(record.reports.items()):
        images.append(str(scatter_plot(path, layout.plots / f"{name}.png")))
    for key in ("growth_map", "unit_map_predicted", "unit_map_census"):
        if key in record.outputs:
            images.append(str(growth_map_plot(record.outputs[key], layout.plots / f"{key}.png",
                                              title=key.replace("_", " "))))
    return images
