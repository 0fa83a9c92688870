"""Command-line entry point: ``popgrowth [--config PATH] [--seed N] [--out DIR] <command>``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .compositing import CompositingError
from .config import ConfigError, ExperimentConfig
from .geodata import DatasetError
from .metrics import MetricError
from .plotting import PlotError
from .synthcity import SynthConfig, SynthConfigError
from .training import TrainingError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, SynthConfigError, DatasetError, CompositingError, MetricError, PlotError)

log = logging.getLogger("popgrowth")


class UsageError(ValueError):
    pass


def _experiment(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError(f"'{args.command}' needs --config PATH")
    return ExperimentConfig.load(args.config, seed=args.seed, output_dir=args.out)


def _save_record(out: Path, command: str, record: dict) -> Path:
    path = Path(out) / f"{command}_record.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def cmd_synth(args) -> int:
    from .geodata import write_dataset
    from .pipeline import dataset_hash
    from .synthcity import generate_city

    if not args.out:
        raise UsageError("'synth' needs --out DIR")
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if isinstance(d, dict) and isinstance(d.get("synth"), dict):
            d = d["synth"]
        if not isinstance(d, dict):
            raise ConfigError("config", "top level must be a JSON object")
    if args.seed is not None:
        d = {**d, "seed": args.seed}
    try:
        cfg = SynthConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError("synth", str(exc)) from None
    if args.noise_free:
        cfg = cfg.noise_free()
    out = Path(args.out)
    write_dataset(generate_city(cfg), out)
    print(f"wrote dataset to {out}")
    # kept outside the dataset directory so its hash stays stable
    _save_record(out.parent, f"synth_{out.name}", {"config": cfg.to_dict(), "dataset_sha256": dataset_hash(out)})
    return EXIT_OK


def cmd_composite(args) -> int:
    from .compositing import composite_directory

    if not args.out:
        raise UsageError("'composite' needs --out DIR")
    if not (Path(args.src) / "index.json").exists():
        raise CompositingError(f"no index.json in {args.src}")
    names = composite_directory(args.src, args.out, args.threshold)
    print(f"wrote {len(names)} tiles to {args.out}")
    return EXIT_OK


def _context(cfg: ExperimentConfig):
    from .pipeline import Layout, load_or_make_split, prepare_dataset

    layout = Layout(cfg.output_dir)
    layout.root.mkdir(parents=True, exist_ok=True)
    dataset = prepare_dataset(cfg)
    return dataset, load_or_make_split(dataset, cfg, layout), layout


def _load_ckpt(path: Path, what: str):
    from .training import Checkpoint

    if not Path(path).exists():
        raise TrainingError(f"{what} checkpoint not found at {path}; run the earlier stage first")
    return Checkpoint.load(path)


def cmd_pretrain(args) -> int:
    from .pipeline import run_pretrain

    cfg = _experiment(args)
    t = time.perf_counter()
    dataset, split, layout = _context(cfg)
    ckpt = run_pretrain(dataset, split, cfg, layout)
    print(f"selected lr={ckpt.selected['lr']} batch={ckpt.selected['batch']} "
          f"val={ckpt.selected['best_val_metric']:.4f}")
    _save_record(layout.root, "pretrain", {
        "config": cfg.snapshot(), "checkpoint": str(layout.population_ckpt), "hash": ckpt.content_hash(),
        "seconds": round(time.perf_counter() - t, 3)})
    return EXIT_OK


def cmd_train_growth(args) -> int:
    from .pipeline import run_growth

    cfg = _experiment(args)
    t = time.perf_counter()
    dataset, split, layout = _context(cfg)
    pop_ckpt = _load_ckpt(args.encoder or layout.population_ckpt, "population")
    ckpt = run_growth(dataset, split, cfg, layout, pop_ckpt)
    print(f"selected lr={ckpt.selected['lr']} batch={ckpt.selected['batch']} "
          f"val={ckpt.selected['best_val_metric']:.4f}")
    _save_record(layout.root, "train-growth", {
        "config": cfg.snapshot(), "checkpoint": str(layout.growth_ckpt), "hash": ckpt.content_hash(),
        "encoder_hash": ckpt.meta["encoder_hash"], "seconds": round(time.perf_counter() - t, 3)})
    return EXIT_OK


def _print_reports(reports: dict) -> None:
    for name in sorted(reports):
        r = reports[name]
        r2 = "n/a" if r.r2 is None else f"{r.r2:.3f}"
        print(f"{name:28s} n={r.n:4d} rmse={r.rmse:10.3f} mae={r.mae:10.3f} r2={r2}")


def _evaluate(args, with_population: bool) -> int:
    from .encoder import load_population_model
    from .growth import load_growth_model
    from .pipeline import (growth_reports, population_reports, save_reports, write_growth_maps, write_metrics,
                           write_unit_maps)

    cfg = _experiment(args)
    dataset, split, layout = _context(cfg)
    pop_ckpt = _load_ckpt(layout.population_ckpt, "population")
    pop_model = load_population_model(pop_ckpt)
    reports = population_reports(dataset, split, pop_model, cfg) if with_population else {}
    maps = {}
    if layout.growth_ckpt.exists():
        growth_model = load_growth_model(_load_ckpt(layout.growth_ckpt, "growth"), pop_ckpt)
        reports.update(growth_reports(dataset, split, pop_model, growth_model))
        if with_population:
            maps = write_growth_maps(dataset, split, growth_model, layout)
            maps.update(write_unit_maps(dataset, layout))
    elif not with_population:
        raise TrainingError(f"growth checkpoint not found at {layout.growth_ckpt}")
    paths, scatter = save_reports(reports, layout)
    if with_population:
        write_metrics(reports, layout)
    _print_reports(reports)
    if "census_growth_pcc" in reports and "census_growth_proposed" in reports:
        ratio = reports["census_growth_proposed"].rmse / reports["census_growth_pcc"].rmse
        print(f"rmse ratio proposed/pcc = {ratio:.3f}")
    _save_record(layout.root, args.command, {"config": cfg.snapshot(), "reports": paths, "scatter": scatter,
                                                "maps": maps})
    return EXIT_OK


def cmd_eval(args) -> int:
    return _evaluate(args, with_population=True)


def cmd_compare_pcc(args) -> int:
    return _evaluate(args, with_population=False)


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline

    cfg = _experiment(args)
    record = run_pipeline(cfg)
    summary = json.loads(Path(record.outputs["metrics"]).read_text())
    for name, m in summary.items():
        r2 = "n/a" if m["r2"] is None else f"{m['r2']:.3f}"
        print(f"{name:28s} n={m['n']:4d} rmse={m['rmse']:10.3f} mae={m['mae']:10.3f} r2={r2}")
    print(f"outputs in {cfg.output_dir}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import growth_map_plot, scatter_plot

    if not args.out:
        raise UsageError("'plot' needs --out DIR")
    out = Path(args.out)
    for f in args.files:
        f = Path(f)
        target = out / f"{f.stem}.png"
        if f.suffix == ".ndjson":
            growth_map_plot(f, target, title=f.stem.replace("_", " "))
        else:
            scatter_plot(f, target)
        print(f"wrote {target}")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic city dataset"),
    "composite": (cmd_composite, "cloud-masked median composites from scene stacks"),
    "pretrain": (cmd_pretrain, "grid-level population pretraining"),
    "train-growth": (cmd_train_growth, "census-level growth head training"),
    "eval": (cmd_eval, "population and growth reports from saved checkpoints"),
    "compare-pcc": (cmd_compare_pcc, "growth reports for the proposed model and PCC"),
    "pipeline": (cmd_pipeline, "pretrain, train-growth, evaluate and write outputs"),
    "plot": (cmd_plot, "scatter plots from reports, raster images from map files"),
}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="popgrowth", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=fn)
        if name == "synth":
            p.add_argument("--noise-free", action="store_true", help="zero texture and population noise")
        elif name == "composite":
            p.add_argument("src", help="directory with index.json and <patch>_<epoch>.npz stacks")
            p.add_argument("--threshold", type=float, default=0.5, help="cloud probability mask threshold")
        elif name == "train-growth":
            p.add_argument("--encoder", type=Path, help="population checkpoint (default: <out>/checkpoints)")
        elif name == "plot":
            p.add_argument("files", nargs="+", help="report .json or map .ndjson files")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    for name in ("config", "seed", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        cause = getattr(exc, "cause", None)
        if isinstance(cause, VALIDATION_ERRORS):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
