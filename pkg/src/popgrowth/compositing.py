"""Cloud masking and per-pixel median compositing of scene stacks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geodata import N_BANDS, _check_epoch


class CompositingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SceneStack:
    """Co-registered scenes for one epoch.

    bands: (n_scenes, 4, H, W) reflectance; cloud_prob: (n_scenes, H, W).
    valid: optional (n_scenes, H, W) booleans, set by mask_clouds.
    """

    bands: np.ndarray
    cloud_prob: np.ndarray
    epoch: str = "t1"
    valid: np.ndarray | None = None

    def __post_init__(self):
        _check_epoch(self.epoch)
        bands = np.asarray(self.bands, dtype=np.float32)
        prob = np.asarray(self.cloud_prob, dtype=np.float64)
        if bands.ndim != 4 or bands.shape[1] != N_BANDS:
            raise CompositingError(f"bands must have shape (n, 4, H, W), got {bands.shape}")
        if bands.shape[0] < 1:
            raise CompositingError("scene stack needs at least one scene")
        if prob.shape != (bands.shape[0],) + bands.shape[2:]:
            raise CompositingError(
                f"cloud_prob shape {prob.shape} does not match bands {bands.shape}"
            )
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "cloud_prob", prob)
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != prob.shape:
                raise CompositingError(f"valid mask shape {valid.shape} != {prob.shape}")
            object.__setattr__(self, "valid", valid)

    @classmethod
    def from_scenes(cls, scenes, epoch: str = "t1") -> "SceneStack":
        """Build from a list of (bands 4xHxW, cloud_prob HxW) pairs."""
        scenes = list(scenes)
        if not scenes:
            raise CompositingError("scene stack needs at least one scene")
        shapes = {np.shape(b) for b, _ in scenes}
        if len(shapes) != 1:
            raise CompositingError(f"scenes differ in shape: {sorted(shapes)}")
        return cls(
            bands=np.stack([b for b, _ in scenes]),
            cloud_prob=np.stack([p for _, p in scenes]),
            epoch=epoch,
        )

    @property
    def n_scenes(self) -> int:
        return self.bands.shape[0]


def mask_clouds(stack: SceneStack, threshold: float = 0.5) -> SceneStack:
    """Mark pixels invalid where cloud probability is strictly above threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise CompositingError(f"threshold must be in [0, 1], got {threshold}")
    valid = stack.cloud_prob <= threshold
    if stack.valid is not None:
        valid &= stack.valid
    return SceneStack(stack.bands, stack.cloud_prob, stack.epoch, valid)


def median_composite(stack: SceneStack) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel, per-band median over valid scenes.

    Even counts average the two central values; pixels with no valid
    observation get 0 and are flagged in the returned nodata mask.
    """
    valid = stack.valid
    if valid is None:
        valid = np.ones(stack.cloud_prob.shape, dtype=bool)
    data = stack.bands.astype(np.float64)
    # invalid observations sort to the end
    data = np.where(valid[:, None], data, np.inf)
    data.sort(axis=0)
    count = valid.sum(axis=0)  # (H, W)
    nodata = count == 0

    lo_idx = np.maximum((count - 1) // 2, 0)
    hi_idx = np.maximum(count // 2, 0)
    lo = np.take_along_axis(data, np.broadcast_to(lo_idx, data.shape[1:])[None], axis=0)[0]
    hi = np.take_along_axis(data, np.broadcast_to(hi_idx, data.shape[1:])[None], axis=0)[0]
    with np.errstate(invalid="ignore"):
        composite = np.where(lo_idx == hi_idx, lo, (lo + hi) / 2.0)
    composite = np.where(nodata[None], 0.0, composite)
    return composite.astype(np.float32), nodata


def composite_stack(stack: SceneStack, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    return median_composite(mask_clouds(stack, threshold))


# --------------------------------------------------------------------------
# Scene-stack directories (input of the `composite` CLI subcommand)
# --------------------------------------------------------------------------
#
#   stacks/index.json   {"patch_size": 10, "patches": [{"id", "row", "col"}, ...]}
#   stacks/<patch_id>_<epoch>.npz   arrays "bands" (n,4,H,W), "cloud_prob" (n,H,W)

def read_scene_stack(path: str | Path, epoch: str) -> SceneStack:
    with np.load(path) as npz:
        return SceneStack(bands=npz["bands"], cloud_prob=npz["cloud_prob"], epoch=epoch)


def write_scene_stack(stack: SceneStack, path: str | Path) -> None:
    np.savez(path, bands=stack.bands, cloud_prob=stack.cloud_prob)


def composite_directory(src: str | Path, dst: str | Path, threshold: float = 0.5) -> list[str]:
    """Composite every stack listed in src/index.json into geodata tiles under dst.

    Returns the written tile names. A manifest is written with the patch list
    and an empty unit list; census units are attached separately.
    """
    from .geodata import MANIFEST_NAME, TILE_DIR, encode_tile, tile_filename

    src, dst = Path(src), Path(dst)
    index = json.loads((src / "index.json").read_text())
    (dst / TILE_DIR).mkdir(parents=True, exist_ok=True)
    written, nodata_entries = [], {}
    for entry in index["patches"]:
        for epoch in ("t1", "t2"):
            path = src / f"{entry['id']}_{epoch}.npz"
            if not path.exists():
                continue
            composite, nodata = composite_stack(read_scene_stack(path, epoch), threshold)
            name = tile_filename(entry["id"], epoch)
            (dst / TILE_DIR / name).write_bytes(encode_tile(composite))
            if nodata.any():
                nodata_entries[name] = np.flatnonzero(nodata).tolist()
            written.append(name)
    manifest = {
        "format_version": 1,
        "patch_size": int(index["patch_size"]),
        "grid_shape": index.get("grid_shape", [
            max(e["row"] for e in index["patches"]) + 1,
            max(e["col"] for e in index["patches"]) + 1,
        ]),
        "patches": index["patches"],
        "units": [],
    }
    if nodata_entries:
        manifest["nodata"] = nodata_entries
    (dst / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1) + "\n")
    return written
