"""Class-balanced focal loss over the three state tokens.

Positions whose target is a state token are weighted by a per-batch
frequency factor ``alpha_k`` and a focal factor ``(1 - p)^gamma``; every other
supervised position keeps plain cross-entropy. ``alpha`` and the counts it is
built from are statistics of the batch and receive no gradient; the focal
factor is differentiated through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import AllZeroCounts, ConfigError, LossDomainError, ShapeMismatch

__all__ = [
    "LOSS_MODES",
    "PAPER_FIXED_WEIGHTS",
    "LossConfig",
    "LossBatch",
    "LossOutput",
    "focal_weight",
    "alpha_weights",
    "batch_loss",
    "batch_loss_grad",
    "batch_loss_and_grad",
    "finite_difference_grad",
]

LOSS_MODES = ("plain_ce", "fixed_scale", "focal")
# silence / standby / response weights of the fixed loss-scale baseline
PAPER_FIXED_WEIGHTS = (0.3, 1.3, 2.0)
NUM_STATES = 3


@dataclass(frozen=True)
class LossConfig:
    special_token_ids: tuple[int, int, int]
    gamma: float = 2.0
    mode: str = "focal"
    fixed_weights: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.special_token_ids)
        object.__setattr__(self, "special_token_ids", ids)
        if len(ids) != NUM_STATES or len(set(ids)) != NUM_STATES or min(ids) < 0:
            raise ConfigError(f"need three distinct non-negative state ids, got {ids}")
        if not (isinstance(self.gamma, (int, float)) and math.isfinite(self.gamma) and self.gamma >= 0):
            raise ConfigError(f"gamma must be a finite value >= 0, got {self.gamma}")
        object.__setattr__(self, "gamma", float(self.gamma))
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; expected one of {LOSS_MODES}")
        if (self.fixed_weights is not None) != (self.mode == "fixed_scale"):
            raise ConfigError("fixed_weights is required for, and only for, mode 'fixed_scale'")
        if self.fixed_weights is not None:
            weights = tuple(float(w) for w in self.fixed_weights)
            if len(weights) != NUM_STATES or any(not math.isfinite(w) or w < 0 for w in weights):
                raise ConfigError(f"fixed_weights must be three finite values >= 0, got {weights}")
            object.__setattr__(self, "fixed_weights", weights)

    @classmethod
    def for_mode(cls, mode: str, special_token_ids: Sequence[int], gamma: float = 2.0) -> "LossConfig":
        """Config for one of the three ablation arms with its default weights."""
        weights = PAPER_FIXED_WEIGHTS if mode == "fixed_scale" else None
        return cls(tuple(special_token_ids), gamma=gamma, mode=mode, fixed_weights=weights)

    def check_vocab(self, vocab_size: int) -> None:
        if max(self.special_token_ids) >= vocab_size:
            raise ConfigError(
                f"state ids {self.special_token_ids} do not fit a vocabulary of {vocab_size}"
            )


@dataclass(frozen=True)
class LossBatch:
    logits: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    vocab_size: int | None = None

    def __post_init__(self) -> None:
        logits = np.asarray(self.logits, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=bool)
        if logits.ndim != 2:
            raise ShapeMismatch(f"logits must be 2-D, got shape {logits.shape}")
        vocab = logits.shape[1] if self.vocab_size is None else int(self.vocab_size)
        if logits.shape[1] != vocab:
            raise ShapeMismatch(f"logits have {logits.shape[1]} columns, vocab_size is {vocab}")
        if targets.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
            raise ShapeMismatch(
                f"targets {targets.shape} / mask {mask.shape} do not match {logits.shape[0]} positions"
            )
        if targets.size and (targets.min() < 0 or targets.max() >= vocab):
            raise ShapeMismatch("target ids must lie in [0, vocab_size)")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "vocab_size", vocab)


@dataclass(frozen=True)
class LossOutput:
    total: float
    per_position: np.ndarray
    alpha: tuple[float, float, float]
    counts: tuple[int, int, int]
    # per-position weight applied to CE (alpha * focal, fixed weight, or 1)
    weights: np.ndarray = field(repr=False, default=None)


def focal_weight(p: float, gamma: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise LossDomainError(f"probability must lie in [0, 1], got {p}")
    if gamma < 0:
        raise LossDomainError(f"gamma must be >= 0, got {gamma}")
    return (1.0 - p) ** gamma


def alpha_weights(counts: Sequence[int]) -> tuple[float, float, float]:
    """Frequency weights ``total / (|S| * n_k)``; absent classes get 0."""
    counts = [int(n) for n in counts]
    if len(counts) != NUM_STATES or any(n < 0 for n in counts):
        raise LossDomainError(f"need three non-negative counts, got {counts}")
    total = sum(counts)
    if total == 0:
        raise AllZeroCounts("no state tokens in batch")
    # int / int is correctly rounded, so (12, 3, 2) yields the nearest doubles to 17/36, 17/9, 17/6
    return tuple(total / (NUM_STATES * n) if n else 0.0 for n in counts)  # type: ignore[return-value]


def _state_index(targets: np.ndarray, special: tuple[int, int, int]) -> np.ndarray:
    idx = np.full(targets.shape, -1, dtype=np.int64)
    for k, token in enumerate(special):
        idx[targets == token] = k
    return idx


def _forward(batch: LossBatch, config: LossConfig, need_grad: bool):
    config.check_vocab(batch.vocab_size)
    rows = np.flatnonzero(batch.mask)
    if rows.size == 0:
        raise LossDomainError("no supervised positions in batch")
    z = np.ascontiguousarray(batch.logits[rows])
    t = np.ascontiguousarray(batch.targets[rows])
    lse, logp = _kernels.row_log_softmax_stats(z, t)
    ce = -logp
    state = _state_index(t, config.special_token_ids)
    is_state = state >= 0
    counts = tuple(int(np.count_nonzero(state == k)) for k in range(NUM_STATES))

    weight = np.ones_like(ce)
    coef = np.ones_like(ce) if need_grad else None
    alpha: tuple[float, float, float] = (1.0, 1.0, 1.0)
    if config.mode == "fixed_scale":
        w = np.asarray(config.fixed_weights)
        weight[is_state] = w[state[is_state]]
        if need_grad:
            coef[:] = weight
    elif config.mode == "focal" and is_state.any():
        alpha = alpha_weights(counts)
        a = np.asarray(alpha)[state[is_state]]
        lp = logp[is_state]
        q = -np.expm1(lp)  # 1 - p, accurate near p = 1
        g = config.gamma
        focal = q**g
        weight[is_state] = a * focal
        if need_grad:
            p = np.exp(lp)
            with np.errstate(divide="ignore", invalid="ignore"):
                slope = np.where(q > 0, g * p * q ** (g - 1.0) * lp, 0.0)
            coef[is_state] = a * (focal - slope)

    per_row = weight * ce
    n = rows.size
    total = float(per_row.sum() / n)
    per_position = np.zeros(batch.logits.shape[0])
    per_position[rows] = per_row
    weights = np.zeros(batch.logits.shape[0])
    weights[rows] = weight
    out = LossOutput(total=total, per_position=per_position, alpha=alpha, counts=counts, weights=weights)
    if not need_grad:
        return out, None
    grad = np.zeros_like(batch.logits)
    grad[rows] = _kernels.softmax_xent_grad(z, lse, t, coef / n)
    return out, grad


def batch_loss(batch: LossBatch, config: LossConfig) -> LossOutput:
    return _forward(batch, config, need_grad=False)[0]


def batch_loss_grad(batch: LossBatch, config: LossConfig) -> np.ndarray:
    """Analytic gradient of the total loss with respect to the logits."""
    return _forward(batch, config, need_grad=True)[1]


def batch_loss_and_grad(batch: LossBatch, config: LossConfig) -> tuple[LossOutput, np.ndarray]:
    return _forward(batch, config, need_grad=True)


def finite_difference_grad(batch: LossBatch, config: LossConfig, eps: float = 1e-4) -> np.ndarray:
    """Central differences of the total loss over every logit (slow; for checks).

    ``alpha`` is recomputed from the batch at each probe, which matches the
    analytic gradient because perturbing logits never changes the counts.
    """
    z = batch.logits.copy()
    grad = np.zeros_like(z)
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            orig = z[i, j]
            z[i, j] = orig + eps
            up = batch_loss(LossBatch(z, batch.targets, batch.mask, batch.vocab_size), config).total
            z[i, j] = orig - eps
            down = batch_loss(LossBatch(z, batch.targets, batch.mask, batch.vocab_size), config).total
            z[i, j] = orig
            grad[i, j] = (up - down) / (2 * eps)
    return grad
