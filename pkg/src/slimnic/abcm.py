"""Adaptive binary channel masking.

Each mask slot owns a learnable importance vector. In deterministic mode
the forward value is the hard step ``alpha >= 0`` in both training and
evaluation, and the backward pass uses the derivative of
``sigmoid(epsilon * alpha)`` (straight-through). The stochastic variant
learns a 2 x C logit table and draws a relaxed Bernoulli sample while
training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .rng import RngState
from .tensor import Tensor

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"
MODES = (DETERMINISTIC, STOCHASTIC)

TRAIN = "train"
EVAL = "eval"

ALPHA_INIT = 0.5


@dataclass(frozen=True)
class GateConfig:
    mode: str = DETERMINISTIC
    epsilon: float = 4.0
    tau: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"gate mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epsilon", "tau"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and positive, got {value}")


@dataclass
class ImportanceVector:
    """Learnable gate parameters for one mask slot.

    Deterministic mode stores ``alpha`` with shape (C,). Stochastic mode
    stores logits with shape (2, C): row 0 is the "on" class, row 1 "off".
    """

    channels: int
    mode: str = DETERMINISTIC
    param: Tensor = field(default=None)

    def __post_init__(self):
        if self.param is None:
            if self.mode == DETERMINISTIC:
                data = np.full(self.channels, ALPHA_INIT, dtype=np.float32)
            else:
                data = np.stack([np.full(self.channels, ALPHA_INIT, dtype=np.float32),
                                 np.zeros(self.channels, dtype=np.float32)])
            self.param = Tensor(data, requires_grad=True)
        expected = (self.channels,) if self.mode == DETERMINISTIC else (2, self.channels)
        if self.param.shape != expected:
            raise ValueError(f"{self.mode} importance vector needs shape {expected}, "
                             f"got {self.param.shape}")

    def mask(self, cfg: GateConfig, phase: str = EVAL, rng: Optional[RngState] = None) -> Tensor:
        if self.mode == DETERMINISTIC:
            return gate(self.param, cfg, phase, rng)
        return gate_stochastic(self.param, cfg, phase, rng)

    def hard_mask(self) -> np.ndarray:
        """The eval-phase binary mask as a plain array."""
        p = self.param.data
        if self.mode == DETERMINISTIC:
            return (p >= 0).astype(np.float32)
        return (p[0] >= p[1]).astype(np.float32)

    def keep_indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.hard_mask())]


def gate(alpha: Tensor, cfg: GateConfig, phase: str = EVAL, rng: Optional[RngState] = None) -> Tensor:
    """Binary mask ``alpha >= 0`` with a sigmoid straight-through gradient.

    ``phase`` and ``rng`` are accepted for a uniform signature; the
    deterministic gate ignores both.
    """
    return T.step_gate(alpha, cfg.epsilon)


def gate_stochastic(logits: Tensor, cfg: GateConfig, phase: str = EVAL,
                    rng: Optional[RngState] = None) -> Tensor:
    """Relaxed two-class sample of the "on" class (train) or hard argmax (eval).

    Ties in eval go to "on".
    """
    if phase == EVAL:
        return Tensor((logits.data[0] >= logits.data[1]).astype(np.float32))
    if rng is None:
        raise ValueError("stochastic gate needs an RngState in the train phase")
    c = logits.shape[1]
    # the difference of two Gumbel draws is standard logistic
    noise = rng.logistic((c,))
    diff = logits[0] - logits[1]
    return T.sigmoid((diff + noise) * (1.0 / cfg.tau))


def apply_mask(x: Tensor, mask: Tensor) -> Tensor:
    """Channel-wise product of a [B, C, H, W] feature map with a length-C mask."""
    return T.channel_mask(x, mask)


def sparsity_term(mask: Tensor) -> Tensor:
    """L1 norm of the mask divided by its channel count."""
    if mask.data.ndim != 1:
        raise ValueError(f"mask must be one-dimensional, got shape {mask.shape}")
    return T.div(T.tsum(mask), float(mask.shape[0]))


@dataclass
class EffectiveChannels:
    rows: list[tuple[str, int, int]]
    mean_ratio: float

    @property
    def keep_counts(self) -> dict[str, int]:
        return {name: keep for name, keep, _ in self.rows}


def effective_channels(model) -> EffectiveChannels:
    """Per-slot (id, kept, total) from the current hard gates and the mean kept ratio."""
    rows = []
    for slot_id, vec in model.mask_slots():
        rows.append((slot_id, int(vec.hard_mask().sum()), vec.channels))
    if not rows:
        return EffectiveChannels([], 1.0)
    ratio = sum(k / c for _, k, c in rows) / len(rows)
    return EffectiveChannels(rows, ratio)
