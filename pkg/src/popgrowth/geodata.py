"""Patches, census units, splits and the on-disk tile format.

A dataset directory holds one raw tile per (patch, epoch) plus a JSON
manifest::

    root/
      manifest.json
      tiles/p_0000_t1.raw   # little-endian float32, band-major [4][H][W]
      tiles/p_0000_t2.raw
      ...

Band order is B2, B3, B4, B8 and reflectance is stored already scaled to
[0, 1].
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

EPOCHS = ("t1", "t2")
N_BANDS = 4
BAND_NAMES = ("B2", "B3", "B4", "B8")
DEFAULT_PATCH_SIZE = 10
MANIFEST_NAME = "manifest.json"
TILE_DIR = "tiles"
FORMAT_VERSION = 1

_TILE_DTYPE = np.dtype("<f4")


class DatasetError(ValueError):
    """Raised when a dataset violates the tile format or a data-model invariant."""


def _check_epoch(epoch: str) -> str:
    if epoch not in EPOCHS:
        raise DatasetError(f"epoch must be one of {EPOCHS}, got {epoch!r}")
    return epoch


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RasterPatch:
    """One grid cell of 4-band reflectance at one epoch."""

    patch_id: str
    grid_row: int
    grid_col: int
    epoch: str
    bands: np.ndarray
    nodata_mask: np.ndarray | None = None

    def __post_init__(self):
        _check_epoch(self.epoch)
        if self.grid_row < 0 or self.grid_col < 0:
            raise DatasetError(f"{self.patch_id}: grid_row/grid_col must be non-negative")
        bands = np.asarray(self.bands, dtype=np.float32)
        if bands.ndim != 3 or bands.shape[0] != N_BANDS or bands.shape[1] != bands.shape[2]:
            raise DatasetError(
                f"{self.patch_id}: bands must have shape (4, H, H), got {bands.shape}"
            )
        if not np.all(np.isfinite(bands)):
            raise DatasetError(f"{self.patch_id}: bands contain non-finite values")
        if bands.min() < 0.0 or bands.max() > 1.0:
            raise DatasetError(
                f"{self.patch_id}_{self.epoch}: reflectance outside [0,1] "
                f"(min={float(bands.min())}, max={float(bands.max())})"
            )
        mask = self.nodata_mask
        if mask is None:
            mask = np.zeros(bands.shape[1:], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != bands.shape[1:]:
            raise DatasetError(f"{self.patch_id}: nodata_mask shape {mask.shape} != {bands.shape[1:]}")
        object.__setattr__(self, "bands", _frozen(bands))
        object.__setattr__(self, "nodata_mask", _frozen(mask))

    @property
    def size(self) -> int:
        return self.bands.shape[1]


@dataclass(frozen=True)
class CensusUnit:
    unit_id: str
    patch_ids: tuple[str, ...]
    pop_t1: float
    pop_t2: float

    def __post_init__(self):
        object.__setattr__(self, "patch_ids", tuple(self.patch_ids))
        if not self.patch_ids:
            raise DatasetError(f"unit {self.unit_id}: patch_ids must be non-empty")
        if len(set(self.patch_ids)) != len(self.patch_ids):
            raise DatasetError(f"unit {self.unit_id}: duplicate patch_ids")
        for name in ("pop_t1", "pop_t2"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise DatasetError(f"unit {self.unit_id}: {name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)

    @property
    def growth(self) -> float:
        return self.pop_t2 - self.pop_t1

    def population(self, epoch: str) -> float:
        return self.pop_t1 if _check_epoch(epoch) == "t1" else self.pop_t2


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(sorted(getattr(self, name))))
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DatasetError("split subsets overlap")

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSplit":
        return cls(train=tuple(d["train"]), val=tuple(d["val"]), test=tuple(d["test"]))


@dataclass(frozen=True)
class BitemporalSample:
    patch_id: str
    x_t1: RasterPatch
    x_t2: RasterPatch

    def __post_init__(self):
        if self.x_t1.epoch != "t1" or self.x_t2.epoch != "t2":
            raise DatasetError(f"{self.patch_id}: sample epochs must be (t1, t2)")
        if (self.x_t1.grid_row, self.x_t1.grid_col) != (self.x_t2.grid_row, self.x_t2.grid_col):
            raise DatasetError(f"{self.patch_id}: t1/t2 patches are not co-located")


@dataclass(frozen=True)
class OraclePatch:
    """Generator-known truth for one grid cell. Verification only."""

    built_fraction_t1: float
    built_fraction_t2: float
    pop_t1: float
    pop_t2: float

    @property
    def growth(self) -> float:
        return self.pop_t2 - self.pop_t1

    def population(self, epoch: str) -> float:
        return self.pop_t1 if _check_epoch(epoch) == "t1" else self.pop_t2


@dataclass
class Dataset:
    patch_size: int
    grid_shape: tuple[int, int]
    patches: dict[tuple[str, str], RasterPatch]
    units: dict[str, CensusUnit]
    oracle: dict[str, OraclePatch] | None = None
    _unit_of: dict[str, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        self.units = {uid: self.units[uid] for uid in sorted(self.units)}
        self._unit_of = {}
        for unit in self.units.values():
            for pid in unit.patch_ids:
                if pid in self._unit_of:
                    raise DatasetError(
                        f"patch_ids: {pid} belongs to both {self._unit_of[pid]} and {unit.unit_id}"
                    )
                self._unit_of[pid] = unit.unit_id
        self.validate()

    def validate(self) -> None:
        cells: dict[tuple[int, int, str], str] = {}
        rows, cols = self.grid_shape
        for (pid, epoch), patch in self.patches.items():
            if patch.patch_id != pid or patch.epoch != epoch:
                raise DatasetError(f"patch key ({pid}, {epoch}) does not match its contents")
            if patch.size != self.patch_size:
                raise DatasetError(f"{pid}_{epoch}: patch_size {patch.size} != {self.patch_size}")
            if patch.grid_row >= rows or patch.grid_col >= cols:
                raise DatasetError(f"{pid}: grid position outside grid_shape {self.grid_shape}")
            key = (patch.grid_row, patch.grid_col, epoch)
            if key in cells:
                raise DatasetError(f"grid_row/grid_col: {pid} and {cells[key]} share cell {key}")
            cells[key] = pid
        for unit in self.units.values():
            for pid in unit.patch_ids:
                for epoch in EPOCHS:
                    if (pid, epoch) not in self.patches:
                        raise DatasetError(f"unit {unit.unit_id}: missing patch {pid}_{epoch}")
                a, b = self.patches[(pid, "t1")], self.patches[(pid, "t2")]
                if (a.grid_row, a.grid_col) != (b.grid_row, b.grid_col):
                    raise DatasetError(f"{pid}: t1/t2 tiles are not co-located")
        if self.oracle is not None:
            for unit in self.units.values():
                missing = [pid for pid in unit.patch_ids if pid not in self.oracle]
                if missing:
                    raise DatasetError(f"oracle: no entry for patch {missing[0]}")

    @property
    def unit_ids(self) -> list[str]:
        return list(self.units)

    @property
    def patch_ids(self) -> list[str]:
        return sorted({pid for pid, _ in self.patches})

    def unit(self, unit_id: str) -> CensusUnit:
        try:
            return self.units[unit_id]
        except KeyError:
            raise KeyError(f"unknown unit_id {unit_id!r}") from None

    def unit_of(self, patch_id: str) -> str:
        return self._unit_of[patch_id]

    def patch(self, patch_id: str, epoch: str) -> RasterPatch:
        try:
            return self.patches[(patch_id, _check_epoch(epoch))]
        except KeyError:
            raise KeyError(f"unknown patch {patch_id}_{epoch}") from None

    def sample(self, patch_id: str) -> BitemporalSample:
        return BitemporalSample(patch_id, self.patch(patch_id, "t1"), self.patch(patch_id, "t2"))

    def require_oracle(self) -> dict[str, OraclePatch]:
        if self.oracle is None:
            raise DatasetError("dataset has no oracle block")
        return self.oracle


def unit_patches(dataset: Dataset, unit_id: str, epoch: str) -> list[RasterPatch]:
    """Patches of a unit at one epoch, sorted by patch_id.

    Every aggregation in the package iterates in this order so that float
    sums are reproducible.
    """
    unit = dataset.unit(unit_id)
    return [dataset.patch(pid, epoch) for pid in sorted(unit.patch_ids)]


def unit_samples(dataset: Dataset, unit_id: str) -> list[BitemporalSample]:
    unit = dataset.unit(unit_id)
    return [dataset.sample(pid) for pid in sorted(unit.patch_ids)]


def split_units(units: Iterable[CensusUnit | str], seed: int) -> DatasetSplit:
    """Random 60/20/20 split by unit count; rounding remainder goes to train."""
    ids = sorted(u.unit_id if isinstance(u, CensusUnit) else str(u) for u in units)
    n = len(ids)
    if n < 5:
        raise DatasetError(f"split_units needs at least 5 units, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = n_test = int(n * 0.2)
    shuffled = [ids[i] for i in order]
    val = shuffled[:n_val]
    test = shuffled[n_val:n_val + n_test]
    train = shuffled[n_val + n_test:]
    return DatasetSplit(train=tuple(train), val=tuple(val), test=tuple(test))


# --------------------------------------------------------------------------
# Tile I/O
# --------------------------------------------------------------------------

def tile_filename(patch_id: str, epoch: str) -> str:
    return f"{patch_id}_{epoch}.raw"


def encode_tile(bands: np.ndarray) -> bytes:
    return np.ascontiguousarray(bands, dtype=_TILE_DTYPE).tobytes()


def decode_tile(payload: bytes, patch_size: int) -> np.ndarray:
    expected = N_BANDS * patch_size * patch_size * _TILE_DTYPE.itemsize
    if len(payload) != expected:
        raise DatasetError(f"tile has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=_TILE_DTYPE).reshape(N_BANDS, patch_size, patch_size)


def _sha256(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def write_dataset(dataset: Dataset, root: str | Path, checksums: bool = True) -> Path:
    """Write tiles and manifest. Output bytes depend only on the dataset."""
    root = Path(root)
    tile_dir = root / TILE_DIR
    tile_dir.mkdir(parents=True, exist_ok=True)

    sums: dict[str, str] = {}
    nodata: dict[str, list[int]] = {}
    for (pid, epoch) in sorted(dataset.patches):
        patch = dataset.patches[(pid, epoch)]
        name = tile_filename(pid, epoch)
        payload = encode_tile(patch.bands)
        (tile_dir / name).write_bytes(payload)
        if checksums:
            sums[name] = _sha256(payload)
        if patch.nodata_mask.any():
            nodata[name] = np.flatnonzero(patch.nodata_mask).tolist()

    positions = {}
    for (pid, _), patch in dataset.patches.items():
        positions[pid] = (patch.grid_row, patch.grid_col)
    manifest = {
        "format_version": FORMAT_VERSION,
        "patch_size": dataset.patch_size,
        "grid_shape": list(dataset.grid_shape),
        "bands": list(BAND_NAMES),
        "patches": [
            {"id": pid, "row": positions[pid][0], "col": positions[pid][1]}
            for pid in sorted(positions)
        ],
        "units": [
            {"unit_id": u.unit_id, "patch_ids": list(u.patch_ids), "pop_t1": u.pop_t1, "pop_t2": u.pop_t2}
            for u in dataset.units.values()
        ],
    }
    if nodata:
        manifest["nodata"] = nodata
    if dataset.oracle is not None:
        manifest["oracle"] = {
            pid: {
                "built_fraction_t1": o.built_fraction_t1,
                "built_fraction_t2": o.built_fraction_t2,
                "pop_t1": o.pop_t1,
                "pop_t2": o.pop_t2,
            }
            for pid, o in sorted(dataset.oracle.items())
        }
    if checksums:
        manifest["checksums"] = sums
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1) + "\n")
    return root


def read_manifest(root: str | Path, manifest: str | Path | None = None) -> dict:
    root = Path(root)
    path = Path(manifest) if manifest is not None else root / MANIFEST_NAME
    if not path.is_absolute() and not path.exists():
        path = root / path
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {path} is not valid JSON: {exc}") from None


def load_dataset(root: str | Path, manifest: str | Path | None = None) -> Dataset:
    """Load and fully validate a dataset directory.

    Raises DatasetError naming the offending patch or field on any violation.
    """
    root = Path(root)
    meta = read_manifest(root, manifest)
    try:
        patch_size = int(meta["patch_size"])
        grid_shape = tuple(meta["grid_shape"])
        patch_entries = meta["patches"]
        unit_entries = meta["units"]
    except KeyError as exc:
        raise DatasetError(f"manifest missing field {exc.args[0]!r}") from None

    sums = meta.get("checksums") or {}
    nodata = meta.get("nodata") or {}
    tile_dir = root / TILE_DIR
    patches: dict[tuple[str, str], RasterPatch] = {}
    for entry in patch_entries:
        pid = entry["id"]
        for epoch in EPOCHS:
            name = tile_filename(pid, epoch)
            path = tile_dir / name
            try:
                payload = path.read_bytes()
            except FileNotFoundError:
                raise DatasetError(f"missing tile for patch {pid}_{epoch} ({path})") from None
            if name in sums and _sha256(payload) != sums[name]:
                raise DatasetError(f"checksum mismatch for tile {pid}_{epoch}")
            mask = None
            if name in nodata:
                mask = np.zeros(patch_size * patch_size, dtype=bool)
                mask[np.asarray(nodata[name], dtype=int)] = True
                mask = mask.reshape(patch_size, patch_size)
            try:
                bands = decode_tile(payload, patch_size)
            except DatasetError as exc:
                raise DatasetError(f"{pid}_{epoch}: {exc}") from None
            patches[(pid, epoch)] = RasterPatch(
                patch_id=pid,
                grid_row=int(entry["row"]),
                grid_col=int(entry["col"]),
                epoch=epoch,
                bands=bands,
                nodata_mask=mask,
            )

    units = {}
    for entry in unit_entries:
        unit = CensusUnit(
            unit_id=entry["unit_id"],
            patch_ids=tuple(entry["patch_ids"]),
            pop_t1=entry["pop_t1"],
            pop_t2=entry["pop_t2"],
        )
        if unit.unit_id in units:
            raise DatasetError(f"unit_id: duplicate {unit.unit_id}")
        units[unit.unit_id] = unit

    oracle = None
    if meta.get("oracle") is not None:
        oracle = {pid: OraclePatch(**vals) for pid, vals in meta["oracle"].items()}
    return Dataset(patch_size=patch_size, grid_shape=grid_shape, patches=patches, units=units, oracle=oracle)
