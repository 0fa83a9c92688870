"""Synthetic bi-temporal cities with a known patch-level population oracle.

Generation is split into two steps so tests can pin the layout by hand:

* ``sample_layout`` draws the unit partition and per-patch built fractions;
* ``render_city`` turns a layout into imagery, populations and census counts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geodata import (
    N_BANDS,
    CensusUnit,
    Dataset,
    DatasetError,
    OraclePatch,
    RasterPatch,
)

# Re-exported under the name used by the data model.
SyntheticOracle = dict[str, OraclePatch]


class SynthConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    grid_rows: int = 20
    grid_cols: int = 20
    n_units: int = 160
    patch_size: int = 10
    pop_density_scale: float = 150.0
    growth_fraction: float = 0.4
    # share of the patches in a growth unit that actually densify
    growth_patch_share: float = 0.6
    allow_decline: bool = False
    decline_fraction: float = 0.1
    texture_sigma: float = 0.02
    pop_sigma: float = 5.0
    # additive per-band offset of the t1 vegetation signature: the t1 composite
    # comes from a drier season, so vegetation is darker in NIR
    t1_vegetation_shift: tuple[float, float, float, float] = (0.0, 0.0, 0.0, -0.1)
    # additive per-band offset of every t1 pixel (composite-level radiometric difference)
    t1_offset: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    # per-patch haze amplitude for (t1, t2): residual compositing artefacts
    haze_sigma: tuple[float, float] = (0.0, 0.0)
    haze_profile: tuple[float, float, float, float] = (1.0, 0.8, 0.6, 0.3)
    built_signature: tuple[float, float, float, float] = (0.20, 0.21, 0.23, 0.27)
    vegetation_signature: tuple[float, float, float, float] = (0.04, 0.07, 0.05, 0.36)
    # radius of the urban core as a fraction of the grid half-diagonal
    core_radius: float = 0.55
    # persistent non-residential built land (no population, never converted)
    industrial_patch_fraction: float = 0.0
    industrial_max_share: float = 0.4
    industrial_signature: tuple[float, float, float, float] = (0.26, 0.25, 0.24, 0.27)

    def __post_init__(self):
        for name in ("built_signature", "vegetation_signature", "industrial_signature", "t1_vegetation_shift",
                     "t1_offset", "haze_profile", "haze_sigma"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for name in ("grid_rows", "grid_cols", "n_units", "patch_size"):
            if int(getattr(self, name)) < 1:
                raise SynthConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.n_units > self.grid_rows * self.grid_cols:
            raise SynthConfigError(
                "n_units",
                f"{self.n_units} units cannot partition a {self.grid_rows}x{self.grid_cols} grid",
            )
        for name in ("texture_sigma", "pop_sigma", "pop_density_scale"):
            if getattr(self, name) < 0:
                raise SynthConfigError(name, f"must be >= 0, got {getattr(self, name)}")
        for name in ("growth_fraction", "growth_patch_share", "decline_fraction",
                     "industrial_patch_fraction", "industrial_max_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise SynthConfigError(name, f"must be in [0, 1], got {getattr(self, name)}")
        for name in ("built_signature", "vegetation_signature", "industrial_signature"):
            sig = getattr(self, name)
            if len(sig) != N_BANDS or not all(0.0 <= v <= 1.0 for v in sig):
                raise SynthConfigError(name, f"needs {N_BANDS} values in [0, 1], got {sig}")
        for name in ("t1_vegetation_shift", "t1_offset", "haze_profile"):
            if len(getattr(self, name)) != N_BANDS:
                raise SynthConfigError(name, f"needs {N_BANDS} values")
        if len(self.haze_sigma) != 2 or min(self.haze_sigma) < 0:
            raise SynthConfigError("haze_sigma", f"needs two values >= 0, got {self.haze_sigma}")
        if self.core_radius <= 0:
            raise SynthConfigError("core_radius", "must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SynthConfigError(unknown[0], "unknown config key")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def noise_free(self) -> "SynthConfig":
        d = self.to_dict()
        d.update(texture_sigma=0.0, pop_sigma=0.0)
        return SynthConfig.from_dict(d)


@dataclass
class CityLayout:
    """Unit partition and per-patch built fractions on the grid."""

    unit_map: np.ndarray  # (rows, cols) int unit index
    built_t1: np.ndarray  # (rows, cols) in [0, 1]
    built_t2: np.ndarray
    pop_residual: np.ndarray = field(default=None)  # (rows, cols), persistent across epochs
    industrial: np.ndarray = field(default=None)  # (rows, cols) non-residential built share

    def __post_init__(self):
        self.unit_map = np.asarray(self.unit_map, dtype=int)
        self.built_t1 = np.asarray(self.built_t1, dtype=float)
        self.built_t2 = np.asarray(self.built_t2, dtype=float)
        if self.pop_residual is None:
            self.pop_residual = np.zeros(self.unit_map.shape)
        if self.industrial is None:
            self.industrial = np.zeros(self.unit_map.shape)
        self.industrial = np.asarray(self.industrial, dtype=float)
        for name in ("built_t1", "built_t2", "pop_residual", "industrial"):
            if getattr(self, name).shape != self.unit_map.shape:
                raise DatasetError(f"layout {name} shape mismatch")
        for name in ("built_t1", "built_t2"):
            arr = getattr(self, name)
            if arr.min() < 0 or arr.max() > 1:
                raise DatasetError(f"layout {name} must lie in [0, 1]")
        if (np.maximum(self.built_t1, self.built_t2) + self.industrial).max() > 1 + 1e-12:
            raise DatasetError("layout residential plus industrial share exceeds 1")


def patch_id_for(row: int, col: int, n_cols: int) -> str:
    return f"p_{row * n_cols + col:04d}"


def unit_id_for(k: int) -> str:
    return f"u_{k:03d}"


def partition_grid(rows: int, cols: int, n_units: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded region growing from random centroids into contiguous units."""
    if n_units > rows * cols:
        raise SynthConfigError("n_units", "more units than grid cells")
    unit_map = -np.ones((rows, cols), dtype=int)
    seeds = rng.choice(rows * cols, size=n_units, replace=False)
    frontiers: list[list[tuple[int, int]]] = []
    for k, s in enumerate(sorted(seeds)):
        r, c = divmod(int(s), cols)
        unit_map[r, c] = k
        frontiers.append([(r, c)])
    remaining = rows * cols - n_units
    while remaining:
        active = [k for k, f in enumerate(frontiers) if f]
        k = active[rng.integers(len(active))]
        frontier = frontiers[k]
        # candidate free neighbours of the unit's current cells
        cand = []
        for r, c in frontier:
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols and unit_map[rr, cc] < 0:
                    cand.append((rr, cc))
        if not cand:
            frontier.clear()
            continue
        cand = sorted(set(cand))
        rr, cc = cand[rng.integers(len(cand))]
        unit_map[rr, cc] = k
        frontier.append((rr, cc))
        remaining -= 1
    return unit_map


def sample_layout(config: SynthConfig) -> CityLayout:
    root = np.random.default_rng(config.seed)
    part_rng, built_rng, growth_rng, pop_rng, ind_rng = root.spawn(5)
    rows, cols = config.grid_rows, config.grid_cols
    unit_map = partition_grid(rows, cols, config.n_units, part_rng)

    # urban intensity decays away from a jittered centre, plus smooth variation
    centre = np.array([(rows - 1) / 2, (cols - 1) / 2]) + built_rng.normal(0, 0.05, 2) * [rows, cols]
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    half_diag = 0.5 * np.hypot(rows, cols)
    dist = np.hypot(rr - centre[0], cc - centre[1]) / half_diag
    core = np.exp(-((dist / config.core_radius) ** 2))
    smooth = gaussian_filter(built_rng.normal(size=(rows, cols)), sigma=1.5, mode="reflect")
    smooth /= smooth.std() + 1e-12
    built_t1 = np.clip(0.95 * core + 0.12 * smooth - 0.05, 0.0, 1.0)
    has_ind = ind_rng.random((rows, cols)) < config.industrial_patch_fraction
    share = ind_rng.uniform(0.0, config.industrial_max_share, (rows, cols))
    industrial = np.where(has_ind, np.minimum(1.0 - built_t1, share), 0.0)

    n_growth = int(round(config.growth_fraction * config.n_units))
    order = growth_rng.permutation(config.n_units)
    growth_units = set(order[:n_growth].tolist())
    decline_units = set()
    if config.allow_decline:
        n_decline = int(round(config.decline_fraction * config.n_units))
        decline_units = set(order[n_growth:n_growth + n_decline].tolist())

    built_t2 = built_t1.copy()
    for k in range(config.n_units):
        if k not in growth_units and k not in decline_units:
            continue
        cells = np.argwhere(unit_map == k)
        chosen = growth_rng.random(len(cells)) < config.growth_patch_share
        chosen[growth_rng.integers(len(cells))] = True
        for (r, c), pick in zip(cells, chosen):
            if not pick:
                continue
            u = growth_rng.uniform(0.3, 0.9)
            if k in growth_units:
                built_t2[r, c] = built_t1[r, c] + u * (1.0 - built_t1[r, c] - industrial[r, c])
            else:
                built_t2[r, c] = built_t1[r, c] * (1.0 - u)

    pop_residual = pop_rng.normal(0.0, 1.0, (rows, cols)) * config.pop_sigma
    return CityLayout(unit_map, built_t1, built_t2, pop_residual, industrial)


def patch_population(built_fraction, residual, kappa: float):
    return np.maximum(0.0, kappa * np.asarray(built_fraction) + np.asarray(residual))


def _built_masks(bf1: float, bf2: float, npix: int, rng: np.random.Generator, ind: float = 0.0):
    """Pixel-level residential masks for both epochs, plus the industrial mask.

    The count of residential pixels is round(bf * npix); positions are
    random, and the t2 set extends (or shrinks within) the t1 set so
    unchanged pixels keep their class. Industrial pixels are fixed and
    never converted.
    """
    n1 = int(round(bf1 * npix))
    n2 = int(round(bf2 * npix))
    ni = min(int(round(ind * npix)), npix - max(n1, n2))
    order = rng.permutation(npix)
    mi = np.zeros(npix, dtype=bool)
    mi[order[npix - ni:]] = True
    perm = order[:npix - ni]
    m1 = np.zeros(npix, dtype=bool)
    m1[perm[:n1]] = True
    m2 = np.zeros(npix, dtype=bool)
    if n2 >= n1:
        m2[perm[:n2]] = True
    else:
        keep = perm[:n1][rng.permutation(n1)[:n2]]
        m2[keep] = True
    if ind == 0.0:
        return m1, m2
    return m1, m2, mi


def render_city(config: SynthConfig, layout: CityLayout) -> Dataset:
    rows, cols = layout.unit_map.shape
    size = config.patch_size
    npix = size * size
    render_rng = np.random.default_rng([config.seed, 7])
    built = np.asarray(config.built_signature, dtype=np.float64)[:, None]
    industrial = np.asarray(config.industrial_signature, dtype=np.float64)[:, None]
    veg = {
        "t1": (np.asarray(config.vegetation_signature) + np.asarray(config.t1_vegetation_shift))[:, None],
        "t2": np.asarray(config.vegetation_signature, dtype=np.float64)[:, None],
    }
    offset = np.asarray(config.t1_offset, dtype=np.float64)[:, None]
    haze = np.asarray(config.haze_profile, dtype=np.float64)[:, None]
    haze_rng = np.random.default_rng([config.seed, 11])
    kappa = config.pop_density_scale

    patches: dict[tuple[str, str], RasterPatch] = {}
    oracle: dict[str, OraclePatch] = {}
    for r in range(rows):
        for c in range(cols):
            pid = patch_id_for(r, c, cols)
            bf1, bf2 = float(layout.built_t1[r, c]), float(layout.built_t2[r, c])
            ind = float(layout.industrial[r, c])
            m1, m2, *rest = _built_masks(bf1, bf2, npix, render_rng, ind)
            masks = {"t1": m1, "t2": m2}
            for epoch in ("t1", "t2"):
                m = masks[epoch]
                img = np.where(m[None, :], built, veg[epoch])
                if rest:
                    img = np.where(rest[0][None, :], industrial, img)
                if epoch == "t1":
                    img = img + offset
                sigma = config.haze_sigma[0 if epoch == "t1" else 1]
                if sigma > 0:
                    img = img + abs(haze_rng.normal(0.0, sigma)) * haze
                if config.texture_sigma > 0:
                    img = img + render_rng.normal(0.0, config.texture_sigma, img.shape)
                img = np.clip(img, 0.0, 1.0).reshape(N_BANDS, size, size).astype(np.float32)
                patches[(pid, epoch)] = RasterPatch(pid, r, c, epoch, img)
            res = float(layout.pop_residual[r, c])
            oracle[pid] = OraclePatch(
                built_fraction_t1=bf1,
                built_fraction_t2=bf2,
                pop_t1=float(patch_population(bf1, res, kappa)),
                pop_t2=float(patch_population(bf2, res, kappa)),
            )

    members: dict[int, list[str]] = {}
    for r in range(rows):
        for c in range(cols):
            members.setdefault(int(layout.unit_map[r, c]), []).append(patch_id_for(r, c, cols))
    units = {}
    for k in sorted(members):
        pids = sorted(members[k])
        pop_t1 = 0.0
        pop_t2 = 0.0
        for pid in pids:
            pop_t1 += oracle[pid].pop_t1
            pop_t2 += oracle[pid].pop_t2
        uid = unit_id_for(k)
        units[uid] = CensusUnit(uid, tuple(pids), pop_t1, pop_t2)
    return Dataset(patch_size=size, grid_shape=(rows, cols), patches=patches, units=units, oracle=oracle)


def generate_city(config: SynthConfig | None = None) -> Dataset:
    config = config or SynthConfig()
    config.validate()
    return render_city(config, sample_layout(config))


def oracle_growth(dataset: Dataset, unit_id: str) -> float:
    """Sum of oracle patch growth over a unit, in sorted patch order."""
    oracle = dataset.require_oracle()
    unit = dataset.unit(unit_id)
    t1 = 0.0
    t2 = 0.0
    for pid in sorted(unit.patch_ids):
        t1 += oracle[pid].pop_t1
        t2 += oracle[pid].pop_t2
    return t2 - t1
