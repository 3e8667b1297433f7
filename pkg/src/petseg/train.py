"""Adam + cosine annealing training loop with best-epoch selection.

The network is a stand-in: a per-voxel affine map from the (PET, CT) channels
to two logits. It shares the loss, optimizer, schedule and selection logic a
real segmentation network would use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .loss import LossBatch, LossConfig, gdfl, gdfl_gradient
from .metrics import dice

BATCH_SIZE = 4


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-3
    total_epochs: int = 300

    def __post_init__(self):
        if not self.lr_max > 0:
            raise ContractError("lr_max must be positive")
        if self.total_epochs < 1:
            raise ContractError("total_epochs must be at least 1")


def cosine_lr(epoch: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """Half-cosine decay from ``lr_max`` at epoch 0 to 0 at ``total_epochs``."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    return cfg.lr_max * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs)) / 2.0


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=step)


class VoxelAffineModel:
    """``logit_l = w_l0 * pet' + w_l1 * ct' + b_l`` at every voxel; params shape ``(2, 3)``.

    ``pet'`` and ``ct'`` are the channels standardized with fixed statistics
    taken from the training set, so the model stays affine in the raw inputs.
    Without this, all-positive SUV/CT inputs give every weight gradient the same
    sign and Adam raises both class logits in lockstep.
    """

    n_params = (2, 3)

    def __init__(self, mean=(0.0, 0.0), std=(1.0, 1.0)):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != (2,) or self.std.shape != (2,) or not (self.std > 0).all():
            raise ContractError("normalization needs two means and two positive standard deviations")

    @classmethod
    def fit(cls, dataset: "PatchDataset") -> "VoxelAffineModel":
        axes = (0, *range(2, dataset.inputs.ndim))
        std = dataset.inputs.std(axis=axes)
        return cls(dataset.inputs.mean(axis=axes), np.where(std > 0, std, 1.0))

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, 0.01, size=self.n_params)

    def _standardize(self, inputs: np.ndarray) -> np.ndarray:
        shape = (1, 2) + (1,) * (inputs.ndim - 2)
        return (inputs - self.mean.reshape(shape)) / self.std.reshape(shape)

    def forward(self, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """``inputs`` is ``(n, 2, *spatial)``; returns logits of the same shape."""
        x = self._standardize(inputs)
        n = x.shape[0]
        flat = x.reshape(n, 2, -1)
        logits = np.einsum("lc,ncj->nlj", params[:, :2], flat) + params[None, :, 2, None]
        return logits.reshape(inputs.shape)

    def backward(self, grad_logits: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        n = inputs.shape[0]
        g = grad_logits.reshape(n, 2, -1)
        x = self._standardize(inputs).reshape(n, 2, -1)
        g_w = np.einsum("nlj,ncj->lc", g, x)
        g_b = g.sum(axis=(0, 2))
        return np.concatenate([g_w, g_b[:, None]], axis=1)

    def predictor(self, params: np.ndarray):
        """Patch predictor ``(2, *spatial) -> (2, *spatial)`` logits for sliding-window inference."""
        params = np.array(params, dtype=np.float64)

        def predict(patch: np.ndarray) -> np.ndarray:
            return self.forward(params, patch[None])[0]

        return predict


def foreground_probability(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Probability that class 1 beats class 0: ``sigmoid(z1 - z0)``.

    Thresholding at 0.5 is the same as taking the argmax over the two channels.
    """
    z0 = np.take(logits, 0, axis=axis)
    z1 = np.take(logits, 1, axis=axis)
    return 1.0 / (1.0 + np.exp(-np.clip(z1 - z0, -500, 500)))


@dataclass(frozen=True)
class PatchDataset:
    inputs: np.ndarray  # (n, 2, *spatial): PET, CT
    masks: np.ndarray  # (n, *spatial), binary

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ContractError("dataset is empty")
        if self.inputs.shape[0] != self.masks.shape[0] or self.inputs.shape[2:] != self.masks.shape[1:]:
            raise ContractError(f"inputs {self.inputs.shape} and masks {self.masks.shape} do not match")

    def __len__(self):
        return len(self.inputs)


@dataclass(frozen=True)
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = BATCH_SIZE
    threshold: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_dsc: float


@dataclass
class TrainResult:
    records: list
    best_epoch: int
    best_params: np.ndarray
    final_params: np.ndarray
    model: VoxelAffineModel


def select_best(records) -> int:
    """Index of the record with the highest validation DSC (earliest on ties)."""
    if not records:
        raise ContractError("no epoch records to select from")
    return int(np.argmax([r.val_dsc for r in records]))


def validation_dsc(params: np.ndarray, data: PatchDataset, model: VoxelAffineModel, threshold: float = 0.5) -> float:
    prob = foreground_probability(model.forward(params, data.inputs), axis=1)
    pred = prob >= threshold
    return float(np.mean([dice(g.astype(bool), p) for g, p in zip(data.masks, pred)]))


def train(
    train_set: PatchDataset,
    val_set: PatchDataset,
    cfg: TrainConfig = TrainConfig(),
    model: VoxelAffineModel | None = None,
) -> TrainResult:
    """Run ``cfg.schedule.total_epochs`` epochs and keep the best-validation parameters.

    Epoch loss is the mean of the per-batch GDFL values. Everything is driven by
    ``cfg.seed``, so a run is bit-reproducible.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("training and validation sets must be non-empty")
    if model is None:
        model = VoxelAffineModel.fit(train_set)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    params = model.init(rng)
    state = AdamState.zeros_like(params)
    records = []
    best_params, best_dsc = params.copy(), -1.0
    n = len(train_set)
    for epoch in range(cfg.schedule.total_epochs):
        lr = cosine_lr(epoch, cfg.schedule)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            inputs = train_set.inputs[idx]
            batch = LossBatch.from_mask(model.forward(params, inputs), train_set.masks[idx])
            losses.append(gdfl(batch, cfg.loss))
            grads = model.backward(gdfl_gradient(batch, cfg.loss), inputs)
            params, state = adam_step(params, grads, state, lr)
        val = validation_dsc(params, val_set, model, cfg.threshold)
        records.append(EpochRecord(epoch, float(np.mean(losses)), val))
        if val > best_dsc:
            best_dsc, best_params = val, params.copy()
    return TrainResult(records, select_best(records), best_params, params, model)


def make_separable_dataset(
    n_cases: int,
    patch: int = 8,
    seed: int = 0,
    threshold: float = 2.5,
    ct_slope: float = 1.0,
    margin: float = 0.5,
    lesion_fraction: float = 0.3,
    empty: bool = False,
) -> PatchDataset:
    """Synthetic patches whose lesion voxels lie above a plane in (SUV, CT) space.

    A voxel is lesion iff ``suv > threshold + ct_slope * (ct - 0.5)``; every voxel
    sits at least ``margin`` SUV away from the plane. Lesions are random
    axis-aligned blocks. ``empty=True`` gives all-background patches.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    shape = (n_cases, patch, patch, patch)
    masks = np.zeros(shape, dtype=np.uint8)
    if not empty:
        for i in range(n_cases):
            side = max(1, round(patch * lesion_fraction ** (1 / 3)))
            lo = rng.integers(0, patch - side + 1, size=3)
            masks[i, lo[0] : lo[0] + side, lo[1] : lo[1] + side, lo[2] : lo[2] + side] = 1
    ct = rng.uniform(0.0, 1.0, size=shape)
    plane = threshold + ct_slope * (ct - 0.5)
    above = plane + margin + rng.uniform(0.0, 3.0, size=shape)
    below = np.maximum(plane - margin - rng.uniform(0.0, 2.0, size=shape), 0.0)
    suv = np.where(masks == 1, above, below)
    inputs = np.stack([suv, ct], axis=1)
    return PatchDataset(inputs, masks)
