"""Siamese growth model, census-level weakly supervised training, and PCC.

The growth model runs one shared, frozen encoder on both epochs and maps the
feature difference f(x_t2) - f(x_t1) to a patch growth value with a
bias-free linear head. Supervision only exists per census unit: the loss is
applied to the sum of the patch predictions of each unit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoder import (
    N_TRANSFORMS,
    Encoder,
    PopulationModel,
    augment_batch,
    init_weights,
    patch_tensor,
    predict_population,
)
from .geodata import BitemporalSample, Dataset, DatasetSplit, unit_patches
from .training import (
    Checkpoint,
    RunResult,
    TrainConfig,
    TrainingError,
    fit,
    grid_search,
    run_seed,
    state_copy,
    state_hash,
)

log = logging.getLogger(__name__)

COMBINE_MODES = ("difference", "concat")
# relative ridge of the head's input whitening
WHITEN_RIDGE = 1e-3


class GrowthHead(nn.Module):
    """f_fc: bias-free linear map with fixed (non-trainable) input and output scaling.

    output_scale puts census growth targets at order one so that the head can
    reach them within the learning-rate grid. input_map is a symmetric
    whitening matrix for the combined features; frozen-encoder features are
    badly conditioned and plain first-order training of the head stalls
    along their small directions. Both are buffers, so the head is still a
    single linear map with in_features trainable weights.
    """

    def __init__(self, in_features: int, output_scale: float = 1.0, input_map: torch.Tensor | None = None):
        super().__init__()
        self.linear = nn.Linear(in_features, 1, bias=False)
        self.register_buffer("output_scale", torch.tensor(float(output_scale)))
        if input_map is None:
            input_map = torch.eye(in_features)
        if tuple(input_map.shape) != (in_features, in_features):
            raise ValueError(f"input_map must be {in_features}x{in_features}, got {tuple(input_map.shape)}")
        self.register_buffer("input_map", input_map.detach().to(torch.float32).clone())

    @property
    def weight(self) -> torch.Tensor:
        return self.linear.weight

    def effective_weight(self) -> torch.Tensor:
        """The single linear functional the head applies to its input."""
        return (self.linear.weight @ self.input_map) * self.output_scale

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z @ self.input_map.T) * self.output_scale


class GrowthModel(nn.Module):
    """Shared frozen encoder plus a bias-free linear growth head."""

    def __init__(self, encoder: Encoder, combine: str = "difference", output_scale: float = 1.0,
                 input_map: torch.Tensor | None = None):
        super().__init__()
        if combine not in COMBINE_MODES:
            raise ValueError(f"combine must be one of {COMBINE_MODES}, got {combine!r}")
        self.encoder = encoder
        self.combine = combine
        n_in = encoder.out_features * (1 if combine == "difference" else 2)
        self.head = GrowthHead(n_in, output_scale, input_map)
        self.freeze_encoder()

    def freeze_encoder(self) -> None:
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.encoder.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        # batch-norm statistics of the frozen encoder must not move either
        self.encoder.eval()
        return self

    def combine_features(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        if self.combine == "difference":
            return f2 - f1
        return torch.cat([f1, f2], dim=-1)

    def head_output(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        return self.head(self.combine_features(f1, f2)).squeeze(-1)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        return self.head_output(self.encoder(x1), self.encoder(x2))


HEAD_INITS = ("population", "random")


def build_growth_model(
    encoder: Encoder,
    seed: int = 0,
    combine: str = "difference",
    population_head: torch.Tensor | None = None,
    output_scale: float = 1.0,
    input_map: torch.Tensor | None = None,
) -> GrowthModel:
    """Growth model with a seeded random head, or one copied from a population head.

    With the difference combination, a head copied from the population model
    reproduces the linearised post-classification estimate; training then
    moves away from it.
    """
    model = GrowthModel(encoder, combine, output_scale, input_map)
    if population_head is None:
        init_weights(model.head, seed)
        return model
    w = population_head.detach().reshape(1, -1).to(torch.float64)
    if combine != "difference":
        w = torch.cat([-w, w], dim=1)
    # undo the fixed scalings so the effective weight equals the population head
    m = model.head.input_map.to(torch.float64)
    w = torch.linalg.solve(m.T, w.T).T / output_scale
    with torch.no_grad():
        model.head.weight.copy_(w.to(model.head.weight.dtype))
    return model


def target_scale(targets: torch.Tensor) -> float:
    """Root mean square of the training growth targets (1.0 if all zero)."""
    rms = float(torch.sqrt(torch.mean(targets.double() ** 2))) if len(targets) else 0.0
    return rms if rms > 0 else 1.0


def whitening_map(z: torch.Tensor, ridge: float) -> torch.Tensor:
    """(C + eps I)^(-1/2) for the uncentred second moment C of the rows of z.

    eps = ridge * trace(C) / dim. No centring: the head has no bias, and
    centring would not commute with the feature difference anyway.
    """
    z = z.to(torch.float64)
    c = z.T @ z / max(len(z), 1)
    eps = ridge * float(torch.trace(c)) / c.shape[0]
    if eps <= 0:
        return torch.eye(c.shape[0])
    evals, evecs = torch.linalg.eigh(c)
    inv_sqrt = 1.0 / torch.sqrt(evals.clamp(min=0.0) + eps)
    return ((evecs * inv_sqrt) @ evecs.T).to(torch.float32)


def trainable_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------

@torch.no_grad()
def _encode_one(encoder: Encoder, bands: np.ndarray) -> torch.Tensor:
    if bands.shape[-3] != encoder.in_channels:
        raise ValueError(f"expected {encoder.in_channels} channels, got {bands.shape[-3]}")
    return encoder(torch.tensor(np.asarray(bands, dtype=np.float32))[None])


@torch.no_grad()
def predict_patch_growth(model: GrowthModel, sample: BitemporalSample) -> float:
    """Growth of one patch. Each epoch is encoded on its own so G(x, x) == 0 exactly."""
    if sample.x_t1.bands.shape != sample.x_t2.bands.shape:
        raise ValueError(f"{sample.patch_id}: t1/t2 shapes differ")
    model.eval()
    f1 = _encode_one(model.encoder, sample.x_t1.bands)
    f2 = _encode_one(model.encoder, sample.x_t2.bands)
    return float(model.head_output(f1, f2)[0])


def predict_unit_growth(model: GrowthModel, dataset: Dataset, unit_id: str) -> float:
    """D: sum of patch growth predictions in patch_id order."""
    unit = dataset.unit(unit_id)
    total = 0.0
    for pid in sorted(unit.patch_ids):
        total += predict_patch_growth(model, dataset.sample(pid))
    return total


def unit_population(model: PopulationModel, dataset: Dataset, unit_id: str, epoch: str) -> float:
    total = 0.0
    for patch in unit_patches(dataset, unit_id, epoch):
        total += predict_population(model, patch)
    return total


def pcc_unit_growth(model: PopulationModel, dataset: Dataset, unit_id: str) -> float:
    """Post-classification comparison: difference of two summed population maps."""
    return unit_population(model, dataset, unit_id, "t2") - unit_population(model, dataset, unit_id, "t1")


# --------------------------------------------------------------------------
# Census-level training
# --------------------------------------------------------------------------

@dataclass
class UnitBatchData:
    """Bi-temporal patch stacks of a set of units, flattened in unit/patch order."""

    x_t1: torch.Tensor  # (P, 4, H, W)
    x_t2: torch.Tensor
    unit_index: torch.Tensor  # (P,) unit position of each patch
    targets: torch.Tensor  # (U,) census growth, float64
    unit_ids: list[str]
    patch_slices: list[tuple[int, int]]

    @classmethod
    def from_dataset(cls, dataset: Dataset, unit_ids) -> "UnitBatchData":
        unit_ids = sorted(unit_ids)
        x1, x2, index, targets, slices = [], [], [], [], []
        for k, uid in enumerate(unit_ids):
            p1 = unit_patches(dataset, uid, "t1")
            p2 = unit_patches(dataset, uid, "t2")
            if not p1:
                raise TrainingError(f"unit {uid} has zero patches")
            slices.append((len(x1), len(x1) + len(p1)))
            x1.extend(p1)
            x2.extend(p2)
            index.extend([k] * len(p1))
            targets.append(dataset.unit(uid).growth)
        size = dataset.patch_size
        empty = torch.zeros(0, 4, size, size)
        return cls(
            x_t1=patch_tensor(x1) if x1 else empty,
            x_t2=patch_tensor(x2) if x2 else empty,
            unit_index=torch.tensor(index, dtype=torch.long),
            targets=torch.tensor(targets, dtype=torch.float64),
            unit_ids=unit_ids,
            patch_slices=slices,
        )

    def __len__(self) -> int:
        return len(self.unit_ids)

    def patch_rows(self, units: torch.Tensor) -> torch.Tensor:
        return torch.cat([torch.arange(*self.patch_slices[int(u)]) for u in units])


@torch.no_grad()
def encode_all(encoder: Encoder, x: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    encoder.eval()
    if len(x) == 0:
        return torch.zeros(0, encoder.out_features)
    return torch.cat([encoder(x[i:i + chunk]) for i in range(0, len(x), chunk)])


class FeatureCache:
    """Frozen-encoder features per (patch, epoch, transform): (P, 2, 8, F)."""

    def __init__(self, encoder: Encoder, data: UnitBatchData, transforms: int = N_TRANSFORMS):
        feats = []
        for x in (data.x_t1, data.x_t2):
            per_t = []
            for t in range(transforms):
                xt = augment_batch(x, torch.full((len(x),), t, dtype=torch.long))
                per_t.append(encode_all(encoder, xt))
            feats.append(torch.stack(per_t, dim=1))
        self.features = torch.stack(feats, dim=1)

    def lookup(self, rows: torch.Tensor, transforms: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.features[rows, :, transforms]
        return f[:, 0], f[:, 1]


def batch_unit_growth(
    model: GrowthModel,
    data: UnitBatchData,
    units: torch.Tensor,
    transforms: torch.Tensor | None = None,
    cache: FeatureCache | None = None,
) -> torch.Tensor:
    """Aggregated growth D for the given unit positions (differentiable w.r.t. the head).

    transforms gives one dihedral index per patch row of the selected units;
    the same index is applied at both epochs of a patch.
    """
    rows = data.patch_rows(units)
    if transforms is None:
        transforms = torch.zeros(len(rows), dtype=torch.long)
    if cache is not None:
        f1, f2 = cache.lookup(rows, transforms)
    else:
        with torch.no_grad():
            f1 = model.encoder(augment_batch(data.x_t1[rows], transforms))
            f2 = model.encoder(augment_batch(data.x_t2[rows], transforms))
    per_patch = model.head_output(f1, f2)
    local = torch.repeat_interleave(
        torch.arange(len(units)),
        torch.tensor([data.patch_slices[int(u)][1] - data.patch_slices[int(u)][0] for u in units]),
    )
    out = torch.zeros(len(units), dtype=per_patch.dtype)
    return out.index_add(0, local, per_patch)


def growth_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over units of (dY - D)^2."""
    return torch.mean((target.to(pred.dtype) - pred) ** 2)


def growth_rmse(model: GrowthModel, data: UnitBatchData, cache: FeatureCache | None = None) -> float:
    if len(data) == 0:
        raise TrainingError("validation set is empty")
    with torch.no_grad():
        pred = batch_unit_growth(model, data, torch.arange(len(data)), cache=cache)
    return float(torch.sqrt(torch.mean((pred.double() - data.targets) ** 2)))


def train_growth_run(
    encoder: Encoder,
    train: UnitBatchData,
    val: UnitBatchData,
    lr: float,
    batch_size: int,
    config: TrainConfig,
    caches: tuple[FeatureCache, FeatureCache] | None = None,
    combine: str = "difference",
    population_head: torch.Tensor | None = None,
    input_map: torch.Tensor | None = None,
) -> RunResult:
    seed = run_seed(config.seed, lr, batch_size)
    model = build_growth_model(encoder, seed, combine, population_head, target_scale(train.targets), input_map)
    opt = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=lr, betas=config.betas, weight_decay=config.weight_decay,
    )
    gen = torch.Generator().manual_seed(seed)
    train_cache, val_cache = caches if caches is not None else (None, None)
    n = len(train)
    n_rows = len(train.unit_index)

    def train_epoch(epoch: int) -> float:
        model.train()
        order = torch.randperm(n, generator=gen)
        # one draw per patch row, shared by both epochs of the patch
        row_t = torch.randint(0, N_TRANSFORMS, (n_rows,), generator=gen)
        total = 0.0
        for start in range(0, n, batch_size):
            units = order[start:start + batch_size]
            rows = train.patch_rows(units)
            t = row_t[rows] if config.augment else torch.zeros(len(rows), dtype=torch.long)
            pred = batch_unit_growth(model, train, units, t, train_cache)
            loss = growth_loss(pred, train.targets[units])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(units)
        return total / n

    result = RunResult(lr=lr, batch_size=batch_size)
    return fit(
        train_epoch,
        lambda: growth_rmse(model, val, val_cache),
        lambda: state_copy(model.head),
        result,
        config.max_epochs,
        config.patience,
    )


def unit_feature_sums(encoder: Encoder, data: UnitBatchData, combine: str = "difference",
                      cache: FeatureCache | None = None) -> torch.Tensor:
    """Per-unit sums of the combined (untransformed) patch features, (U, F')."""
    if cache is not None:
        f1, f2 = cache.features[:, 0, 0], cache.features[:, 1, 0]
    else:
        f1, f2 = encode_all(encoder, data.x_t1), encode_all(encoder, data.x_t2)
    z = (f2 - f1) if combine == "difference" else torch.cat([f1, f2], dim=-1)
    out = torch.zeros(len(data), z.shape[1], dtype=torch.float64)
    return out.index_add(0, data.unit_index, z.to(torch.float64))


def train_census_level(
    encoder_ckpt: Checkpoint | None,
    dataset: Dataset,
    split: DatasetSplit,
    config: TrainConfig,
    hparams: tuple[float, int] | None = None,
    use_cache: bool = True,
    combine: str = "difference",
    head_init: str = "population",
    whiten: float | None = WHITEN_RIDGE,
) -> tuple[Checkpoint, list[dict]]:
    """Grid-searched census-level training of the growth head.

    hparams pins a single (lr, batch) pair instead of searching the grid,
    e.g. to reuse the pretraining winner. whiten is the relative ridge of the
    fixed input whitening (None: identity input map).
    """
    from .encoder import load_population_model

    if encoder_ckpt is None:
        raise TrainingError("growth training needs a pretrained encoder checkpoint")
    if head_init not in HEAD_INITS:
        raise ValueError(f"head_init must be one of {HEAD_INITS}, got {head_init!r}")
    pop_model = load_population_model(encoder_ckpt)
    encoder = pop_model.encoder
    for p in encoder.parameters():
        p.requires_grad_(False)
    population_head = pop_model.head.weight.detach().clone() if head_init == "population" else None
    frozen_hash = encoder_state_hash(encoder)
    train = UnitBatchData.from_dataset(dataset, split.train)
    val = UnitBatchData.from_dataset(dataset, split.val)
    if len(train) == 0:
        raise TrainingError("empty training set")
    caches = None
    if use_cache:
        caches = (FeatureCache(encoder, train), FeatureCache(encoder, val, transforms=1))

    input_map = None
    if whiten is not None:
        input_map = whitening_map(unit_feature_sums(encoder, train, combine, caches[0] if caches else None), whiten)

    if hparams is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "learning_rates": [hparams[0]], "batch_sizes": [hparams[1]]})
    best, search_log = grid_search(
        lambda lr, bs: train_growth_run(encoder, train, val, lr, bs, config, caches, combine, population_head,
                                        input_map),
        config,
    )
    after_hash = encoder_state_hash(encoder)
    if after_hash != frozen_hash:
        raise TrainingError("encoder weights changed during growth training")
    ckpt = Checkpoint(
        kind="growth",
        state=best.state,
        config={"train": config.to_dict(), "combine": combine, "width": encoder.width, "head_init": head_init,
                "whiten": whiten},
        history=best.history,
        selected={"lr": best.lr, "batch": best.batch_size, "best_epoch": best.best_epoch,
                  "best_val_metric": best.best_metric},
        seed=config.seed,
        search_log=search_log,
        meta={"encoder_hash": encoder_ckpt.content_hash(), "encoder_state_after": after_hash},
    )
    return ckpt, search_log


def load_growth_model(growth_ckpt: Checkpoint, encoder_ckpt: Checkpoint) -> GrowthModel:
    from .encoder import load_population_model

    if growth_ckpt.kind != "growth":
        raise TrainingError(f"expected a growth checkpoint, got {growth_ckpt.kind!r}")
    expected = growth_ckpt.meta.get("encoder_hash")
    if expected is not None and expected != encoder_ckpt.content_hash():
        raise TrainingError("encoder checkpoint does not match the one the growth head was trained on")
    encoder = load_population_model(encoder_ckpt).encoder
    model = GrowthModel(encoder, growth_ckpt.config.get("combine", "difference"))
    model.head.load_state_dict(growth_ckpt.state)
    model.eval()
    return model


def encoder_state_hash(model: nn.Module) -> str:
    encoder = model.encoder if hasattr(model, "encoder") else model
    return state_hash(encoder.state_dict())
