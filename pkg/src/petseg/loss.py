"""Binary Generalized Dice + Focal loss on two-channel logits, with analytic gradients.

Inputs are logits of shape ``(n_b, 2, *spatial)``; both terms apply a per-channel
sigmoid internally. Targets are one-hot over the class axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractError

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-5
    eta: float = 1e-5
    focal_gamma: float = 2.0
    focal_weights: tuple = (1.0, 100.0)
    numerator_factor: float = 1.0
    # "zero": absent classes get weight 0; "max": they get the largest finite weight of the sample
    absent_class_weight: str = "zero"

    def __post_init__(self):
        if not (self.epsilon > 0 and self.eta > 0):
            raise ContractError("epsilon and eta must be positive")
        if self.focal_gamma < 0:
            raise ContractError("focal_gamma must be non-negative")
        if len(self.focal_weights) != 2:
            raise ContractError("focal_weights needs one weight per class")
        if self.numerator_factor not in (1, 2):
            raise ContractError("numerator_factor must be 1 or 2")
        if self.absent_class_weight not in ("zero", "max"):
            raise ContractError("absent_class_weight must be 'zero' or 'max'")


@dataclass(frozen=True)
class LossBatch:
    logits: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        # float64 at least; longdouble input is kept for finite-difference checks
        dtype = np.result_type(np.asarray(self.logits).dtype, np.float64)
        logits = np.asarray(self.logits, dtype=dtype)
        targets = np.asarray(self.targets, dtype=dtype)
        if logits.shape != targets.shape:
            raise ContractError(f"logits {logits.shape} and targets {targets.shape} differ in shape")
        if logits.ndim < 3 or logits.shape[1] != 2 or logits.shape[0] < 1:
            raise ContractError(f"expected shape (n_b, 2, *spatial), got {logits.shape}")
        if not np.isin(targets, (0.0, 1.0)).all() or not (targets.sum(axis=1) == 1).all():
            raise ContractError("targets must be one-hot over the class axis")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "targets", targets)

    @classmethod
    def from_mask(cls, logits, mask) -> "LossBatch":
        """Build one-hot targets from a foreground mask of shape ``(n_b, *spatial)``."""
        fg = np.asarray(mask, dtype=np.float64)
        return cls(logits, np.stack([1.0 - fg, fg], axis=1))

    @property
    def n_b(self) -> int:
        return self.logits.shape[0]

    @property
    def spatial_axes(self) -> tuple:
        return tuple(range(2, self.logits.ndim))


@dataclass(frozen=True)
class LossReport:
    gdl: float
    fl: float
    gdfl: float
    gradient: np.ndarray


def class_weights(batch: LossBatch, cfg: LossConfig) -> np.ndarray:
    """Per-sample, per-class weights ``1 / (sum_j g)^2``, shape ``(n_b, 2)``."""
    counts = batch.targets.sum(axis=batch.spatial_axes)
    present = counts > 0
    weights = np.where(present, 1.0 / np.where(present, counts, 1.0) ** 2, 0.0)
    if cfg.absent_class_weight == "max":
        fill = weights.max(axis=1, keepdims=True)
        weights = np.where(present, weights, fill)
    return weights


def _dice_terms(batch: LossBatch, cfg: LossConfig):
    p = expit(batch.logits)
    g = batch.targets
    w = class_weights(batch, cfg)
    axes = batch.spatial_axes
    num = cfg.numerator_factor * (w * (p * g).sum(axis=axes)).sum(axis=1) + cfg.epsilon
    den = (w * (p + g).sum(axis=axes)).sum(axis=1) + cfg.eta
    return p, g, w, num, den


def _gdl_value(batch, cfg):
    _, _, _, num, den = _dice_terms(batch, cfg)
    return 1.0 - np.mean(num / den)


def generalized_dice_loss(batch: LossBatch, cfg: LossConfig = LossConfig()) -> float:
    return float(_gdl_value(batch, cfg))


def generalized_dice_gradient(batch: LossBatch, cfg: LossConfig = LossConfig()) -> np.ndarray:
    p, g, w, num, den = _dice_terms(batch, cfg)
    expand = (slice(None), None) + (None,) * len(batch.spatial_axes)
    wl = w[(slice(None), slice(None)) + (None,) * len(batch.spatial_axes)]
    num, den = num[expand], den[expand]
    d_ratio_dp = wl * (cfg.numerator_factor * g * den - num) / den**2
    return -d_ratio_dp * p * (1.0 - p) / batch.n_b


def _focal_terms(batch: LossBatch, cfg: LossConfig):
    s = expit(batch.logits)
    clamped = np.clip(s, LOG_CLAMP, 1.0 - LOG_CLAMP)
    v = np.asarray(cfg.focal_weights, dtype=s.dtype).reshape((1, 2) + (1,) * len(batch.spatial_axes))
    return s, clamped, v


def _fl_value(batch, cfg):
    s, clamped, v = _focal_terms(batch, cfg)
    terms = v * (1.0 - s) ** cfg.focal_gamma * batch.targets * np.log(clamped)
    return -terms.sum() / batch.n_b


def focal_loss(batch: LossBatch, cfg: LossConfig = LossConfig()) -> float:
    return float(_fl_value(batch, cfg))


def focal_gradient(batch: LossBatch, cfg: LossConfig = LossConfig()) -> np.ndarray:
    s, clamped, v = _focal_terms(batch, cfg)
    gamma = cfg.focal_gamma
    # d log(clamp(s)) / dx is zero where the clamp is active
    active = (s == clamped).astype(s.dtype)
    inner = gamma * s * np.log(clamped) - (1.0 - s) * active
    return v * batch.targets * (1.0 - s) ** gamma * inner / batch.n_b


def gdfl(batch: LossBatch, cfg: LossConfig = LossConfig()) -> float:
    return generalized_dice_loss(batch, cfg) + focal_loss(batch, cfg)


def gdfl_gradient(batch: LossBatch, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Gradient of :func:`gdfl` with respect to the logits."""
    return generalized_dice_gradient(batch, cfg) + focal_gradient(batch, cfg)


def loss_report(batch: LossBatch, cfg: LossConfig = LossConfig()) -> LossReport:
    gdl = generalized_dice_loss(batch, cfg)
    fl = focal_loss(batch, cfg)
    return LossReport(gdl, fl, gdl + fl, gdfl_gradient(batch, cfg))


def central_difference(fn, logits: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn(logits)``, one element at a time."""
    x = np.array(logits, dtype=np.result_type(np.asarray(logits).dtype, np.float64))
    grad = np.empty_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = fn(x)
        flat[k] = orig - h
        down = fn(x)
        flat[k] = orig
        out[k] = (up - down) / (2 * h)
    return grad


def gradient_check(batch: LossBatch, cfg: LossConfig = LossConfig(), h: float = 1e-3) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    The differences are taken in extended precision; in float64 the round-off of
    a loss near 30 swamps gradient entries below ~1e-6.
    """
    analytic = gdfl_gradient(batch, cfg)
    targets = batch.targets.astype(np.longdouble)
    numeric = central_difference(
        lambda x: _gdl_value(LossBatch(x, targets), cfg) + _fl_value(LossBatch(x, targets), cfg),
        batch.logits.astype(np.longdouble),
        h,
    )
    return relative_error(analytic, numeric.astype(np.float64))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
