"""ResNet-18-style encoder and grid-level population regression.

The stem is a single 3x3, stride-1 convolution over the four 10 m bands with
no max-pool, so 10x10 patches keep their spatial extent into stage 1.
Stages 2-4 halve the resolution; global average pooling yields a feature
vector of 512 * width.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geodata import N_BANDS, BitemporalSample, Dataset, RasterPatch, unit_patches
from .training import (
    Checkpoint,
    RunResult,
    TrainConfig,
    TrainingError,
    fit,
    grid_search,
    run_seed,
    state_copy,
)

log = logging.getLogger(__name__)

STAGE_CHANNELS = (64, 128, 256, 512)
N_TRANSFORMS = 8


def scaled_channels(width: float) -> tuple[int, ...]:
    return tuple(max(1, int(round(c * width))) for c in STAGE_CHANNELS)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class Encoder(nn.Module):
    """f_en: (N, 4, H, W) reflectance -> (N, 512 * width) features."""

    def __init__(self, width: float = 1.0, in_channels: int = N_BANDS):
        super().__init__()
        if width <= 0:
            raise ValueError(f"width must be positive, got {width}")
        self.width = float(width)
        self.in_channels = in_channels
        c = scaled_channels(width)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c[0], 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(c[0]),
            nn.ReLU(inplace=True),
        )
        self.layer1 = nn.Sequential(BasicBlock(c[0], c[0]), BasicBlock(c[0], c[0]))
        self.layer2 = nn.Sequential(BasicBlock(c[0], c[1], 2), BasicBlock(c[1], c[1]))
        self.layer3 = nn.Sequential(BasicBlock(c[1], c[2], 2), BasicBlock(c[2], c[2]))
        self.layer4 = nn.Sequential(BasicBlock(c[2], c[3], 2), BasicBlock(c[3], c[3]))
        self.out_features = c[3]

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class PopulationModel(nn.Module):
    """Encoder plus fully connected head with a rectified output (p >= 0)."""

    def __init__(self, width: float = 1.0):
        super().__init__()
        self.encoder = Encoder(width)
        self.head = nn.Linear(self.encoder.out_features, 1)

    def forward(self, x):
        return F.relu(self.head(self.encoder(x))).squeeze(-1)


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """Seeded fan-in scaled initialisation; leaves global RNG state alone."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.copy_((torch.rand(m.weight.shape, generator=gen) * 2 - 1) * bound)
                if m.bias is not None:
                    m.bias.copy_((torch.rand(m.bias.shape, generator=gen) * 2 - 1) * bound)
    return module


def build_population_model(width: float = 1.0, seed: int = 0) -> PopulationModel:
    return init_weights(PopulationModel(width), seed)


# --------------------------------------------------------------------------
# Tensor helpers
# --------------------------------------------------------------------------

def patch_tensor(patches: Sequence[RasterPatch] | RasterPatch) -> torch.Tensor:
    if isinstance(patches, RasterPatch):
        patches = [patches]
    return torch.from_numpy(np.stack([p.bands for p in patches]).astype(np.float32))


def _check_channels(arr) -> None:
    if arr.shape[-3] != N_BANDS:
        raise ValueError(f"expected {N_BANDS} channels, got {arr.shape[-3]}")


@torch.no_grad()
def encode(model: nn.Module, patch: RasterPatch | np.ndarray) -> np.ndarray:
    """Feature vector of one patch in evaluation mode."""
    encoder = model.encoder if isinstance(model, PopulationModel) else model
    bands = patch.bands if isinstance(patch, RasterPatch) else np.asarray(patch, dtype=np.float32)
    _check_channels(bands)
    was_training = encoder.training
    encoder.eval()
    try:
        out = encoder(torch.tensor(np.asarray(bands, dtype=np.float32))[None])
    finally:
        encoder.train(was_training)
    return out[0].numpy()


@torch.no_grad()
def predict_batch(model: PopulationModel, x: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    try:
        return torch.cat([model(x[i:i + chunk]) for i in range(0, len(x), chunk)])
    finally:
        model.train(was_training)


def predict_population(model: PopulationModel, patch: RasterPatch | np.ndarray) -> float:
    bands = patch.bands if isinstance(patch, RasterPatch) else np.asarray(patch, dtype=np.float32)
    _check_channels(bands)
    x = torch.tensor(np.asarray(bands, dtype=np.float32))[None]
    return float(predict_batch(model, x)[0])


# --------------------------------------------------------------------------
# Dihedral augmentation
# --------------------------------------------------------------------------

def _transform_array(a, index: int):
    if not 0 <= index < N_TRANSFORMS:
        raise ValueError(f"transform_index must be in 0..7, got {index}")
    k, flip = index % 4, index >= 4
    if isinstance(a, torch.Tensor):
        out = torch.rot90(a, k, dims=(-2, -1))
        return torch.flip(out, dims=(-1,)) if flip else out
    out = np.rot90(a, k, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def inverse_transform(index: int) -> int:
    if not 0 <= index < N_TRANSFORMS:
        raise ValueError(f"transform_index must be in 0..7, got {index}")
    # reflections are involutions
    return (4 - index) % 4 if index < 4 else index


def augment(sample, transform_index: int):
    """Apply one of the 8 square symmetries.

    Index k in 0..3 rotates by k * 90 degrees; 4..7 rotate and then flip
    horizontally. Accepts arrays/tensors (..., H, W), RasterPatch or
    BitemporalSample (same transform at both epochs).
    """
    if isinstance(sample, BitemporalSample):
        return BitemporalSample(
            sample.patch_id,
            augment(sample.x_t1, transform_index),
            augment(sample.x_t2, transform_index),
        )
    if isinstance(sample, RasterPatch):
        return RasterPatch(
            sample.patch_id,
            sample.grid_row,
            sample.grid_col,
            sample.epoch,
            _transform_array(sample.bands, transform_index),
            _transform_array(sample.nodata_mask, transform_index),
        )
    return _transform_array(sample, transform_index)


def augment_batch(x: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    """Per-sample transform of a (N, C, H, W) batch."""
    out = x.clone()
    for t in range(1, N_TRANSFORMS):
        sel = (indices == t).nonzero(as_tuple=True)[0]
        if len(sel):
            out[sel] = _transform_array(x[sel], t)
    return out


# --------------------------------------------------------------------------
# Grid-level pretraining
# --------------------------------------------------------------------------

@dataclass
class GridData:
    """Training patches with grid labels plus validation units."""

    x_train: torch.Tensor
    y_train: torch.Tensor
    x_val: torch.Tensor
    val_index: torch.Tensor  # unit index of each validation patch
    y_val_units: torch.Tensor  # census count per validation unit

    @classmethod
    def from_dataset(cls, dataset: Dataset, train_units, val_units, epoch: str = "t2") -> "GridData":
        oracle = dataset.require_oracle()
        train = [p for uid in sorted(train_units) for p in unit_patches(dataset, uid, epoch)]
        if not train:
            raise TrainingError("empty training set")
        val, index, targets = [], [], []
        for k, uid in enumerate(sorted(val_units)):
            ps = unit_patches(dataset, uid, epoch)
            val.extend(ps)
            index.extend([k] * len(ps))
            targets.append(dataset.unit(uid).population(epoch))
        return cls(
            x_train=patch_tensor(train),
            y_train=torch.tensor([oracle[p.patch_id].population(epoch) for p in train], dtype=torch.float32),
            x_val=patch_tensor(val) if val else torch.zeros(0, N_BANDS, dataset.patch_size, dataset.patch_size),
            val_index=torch.tensor(index, dtype=torch.long),
            y_val_units=torch.tensor(targets, dtype=torch.float64),
        )


def unit_sums(values: torch.Tensor, index: torch.Tensor, n_units: int) -> torch.Tensor:
    """Per-unit sums, accumulated sequentially in float64 in patch order."""
    out = torch.zeros(n_units, dtype=torch.float64)
    return out.index_add_(0, index, values.to(torch.float64))


def census_rmse(model: PopulationModel, data: GridData) -> float:
    if len(data.y_val_units) == 0:
        raise TrainingError("validation set is empty")
    pred = predict_batch(model, data.x_val)
    sums = unit_sums(pred, data.val_index, len(data.y_val_units))
    return float(torch.sqrt(torch.mean((sums - data.y_val_units) ** 2)))


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.mean((target - pred) ** 2)


def train_population_run(
    data: GridData, lr: float, batch_size: int, config: TrainConfig, width: float
) -> RunResult:
    seed = run_seed(config.seed, lr, batch_size)
    model = build_population_model(width, seed)
    with torch.no_grad():
        # start the rectified output in its active region
        model.head.bias.fill_(float(data.y_train.mean()))
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=config.betas, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    n = len(data.x_train)

    def train_epoch(epoch: int) -> float:
        model.train()
        order = torch.randperm(n, generator=gen)
        tidx = torch.randint(0, N_TRANSFORMS, (n,), generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = data.x_train[idx]
            if config.augment:
                x = augment_batch(x, tidx[idx])
            loss = mse_loss(model(x), data.y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        return total / n

    result = RunResult(lr=lr, batch_size=batch_size)
    return fit(
        train_epoch,
        lambda: census_rmse(model, data),
        lambda: state_copy(model),
        result,
        config.max_epochs,
        config.patience,
    )


def pretrain_grid(
    dataset: Dataset,
    train_units,
    val_units,
    config: TrainConfig,
    width: float = 1.0,
    epoch: str = "t2",
) -> tuple[Checkpoint, list[dict]]:
    """Grid search over (lr, batch) with MSE on grid labels.

    Model selection and early stopping use validation census-level RMSE of
    summed patch predictions.
    """
    data = GridData.from_dataset(dataset, train_units, val_units, epoch)
    best, search_log = grid_search(
        lambda lr, bs: train_population_run(data, lr, bs, config, width), config
    )
    ckpt = Checkpoint(
        kind="population",
        state=best.state,
        config={"train": config.to_dict(), "width": width, "epoch": epoch},
        history=best.history,
        selected={"lr": best.lr, "batch": best.batch_size, "best_epoch": best.best_epoch,
                  "best_val_metric": best.best_metric},
        seed=config.seed,
        search_log=search_log,
    )
    return ckpt, search_log


def load_population_model(ckpt: Checkpoint) -> PopulationModel:
    if ckpt.kind != "population":
        raise TrainingError(f"expected a population checkpoint, got {ckpt.kind!r}")
    model = PopulationModel(ckpt.config["width"])
    model.load_state_dict(ckpt.state)
    model.eval()
    return model
