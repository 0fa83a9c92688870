"""Scatter plots and growth maps derived from report and map files.

Images are derived artefacts; nothing here writes to report or map files.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import TwoSlopeNorm  # noqa: E402

from .metrics import EvaluationReport, MetricError  # noqa: E402


class PlotError(ValueError):
    pass


def scatter_plot(report: EvaluationReport | str | Path, out: str | Path) -> Path:
    if not isinstance(report, EvaluationReport):
        try:
            report = EvaluationReport.load(report)
        except (MetricError, OSError) as exc:
            raise PlotError(f"cannot read report: {exc}") from None
    y = np.array([r.y for r in report.records])
    p = np.array([r.p for r in report.records])
    lo, hi = float(min(y.min(), p.min())), float(max(y.max(), p.max()))
    pad = 0.05 * (hi - lo or 1.0)

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(y, p, s=14, alpha=0.8, edgecolors="none")
    ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], "k--", lw=1)
    ax.set_xlim(lo - pad, hi + pad)
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_xlabel("true")
    ax.set_ylabel("predicted")
    title = f"{report.level} {report.quantity}"
    if report.method:
        title += f" ({report.method})"
    ax.set_title(title)
    r2_txt = "n/a" if report.r2 is None else f"{report.r2:.2f}"
    ax.text(0.04, 0.96, f"RMSE = {report.rmse:.1f}\nMAE = {report.mae:.1f}\n$R^2$ = {r2_txt}",
            transform=ax.transAxes, va="top", fontsize=9)
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def read_map(path: str | Path) -> list[dict]:
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise PlotError(f"cannot read map file: {exc}") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            records.append({
                "grid_row": int(rec["grid_row"]),
                "grid_col": int(rec["grid_col"]),
                "unit_id": rec.get("unit_id"),
                "value": float(rec["value"]),
            })
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise PlotError(f"{path}:{n}: malformed map record ({exc})") from None
    return records


def map_raster(records: list[dict]) -> np.ndarray:
    if not records:
        raise PlotError("map has no records")
    rows = max(r["grid_row"] for r in records) + 1
    cols = max(r["grid_col"] for r in records) + 1
    grid = np.full((rows, cols), np.nan)
    for r in records:
        grid[r["grid_row"], r["grid_col"]] = r["value"]
    return grid


def growth_map_plot(map_path: str | Path, out: str | Path, title: str = "population growth") -> Path:
    """Raster image with a diverging colour scale centred at zero growth."""
    grid = map_raster(read_map(map_path))
    vmax = float(np.nanmax(np.abs(grid))) or 1.0
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(grid, cmap="RdBu_r", norm=TwoSlopeNorm(vcenter=0.0, vmin=-vmax, vmax=vmax))
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, shrink=0.8, label="people")
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out
