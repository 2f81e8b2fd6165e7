"""Per-target adaptive sample memory.

Each tracked object keeps a small bank of (features, target) training
pairs for its appearance model.  Sample weights follow a geometric
recency rule: every new sample is worth 1/(1-gamma) of its predecessor,
doubled when the frame passed verification, and the whole weight vector
is renormalised to unit sum after every push.  The very first sample --
the pseudo ground truth from the discovery frame -- is pinned and can
never be evicted, so the model always remembers what the target looked
like when it first appeared.

Model refits are gated separately by :func:`should_update`: verified
frames refresh the model immediately, unverified ones every eighth
frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .appearance import TrainSample
from .errors import ContractError
from .tensor import Tensor3

#: Unverified frames tolerated between forced model refits.
UPDATE_PERIOD = 8


@dataclass
class MemoryBank:
    """Weighted training set for one target's appearance model.

    ``samples[0]`` is the discovery-frame anchor.  Weights are kept
    normalised (unit sum) from the first push onward; the freshly
    created bank carries the raw recurrence seed ``gamma`` instead,
    which the first push folds into the normalisation.
    """

    samples: list[TrainSample] = field(default_factory=list)
    gamma: float = 0.1
    capacity: int = 32
    frames_since_update: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.capacity < 2:
            raise ContractError(
                f"capacity must hold the anchor plus at least one fresh sample, got {self.capacity}")
        if not self.samples:
            raise ContractError("a memory bank starts from its initial sample")
        if len(self.samples) > self.capacity:
            raise ContractError(
                f"{len(self.samples)} samples exceed capacity {self.capacity}")

    def weights(self) -> np.ndarray:
        """Current per-sample weights, in storage order."""
        return np.array([s.alpha for s in self.samples], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.samples)


def create_bank(x0: Tensor3, y0, gamma: float = 0.1, capacity: int = 32) -> MemoryBank:
    """Start a bank from the discovery-frame pair at seed weight ``gamma``."""
    return MemoryBank(samples=[TrainSample(x=x0, y=y0, alpha=gamma)],
                      gamma=gamma, capacity=capacity)


def push(bank: MemoryBank, x: Tensor3, y, reliable: bool) -> MemoryBank:
    """Append a training pair and rebalance the weight vector.

    The new sample's raw weight is the previous sample's weight divided
    by ``1 - gamma``, doubled when ``reliable``.  If the bank overflows,
    the lowest-weight sample other than the anchor is dropped (ties go
    to the oldest).  Weights are then renormalised to sum to one.

    Returns the same bank object for call chaining.
    """
    raw = bank.samples[-1].alpha / (1.0 - bank.gamma)
    if reliable:
        raw *= 2.0
    bank.samples.append(TrainSample(x=x, y=y, alpha=raw))
    if len(bank.samples) > bank.capacity:
        evictable = bank.samples[1:]
        drop = min(range(len(evictable)), key=lambda i: evictable[i].alpha)
        del bank.samples[1 + drop]
    total = math.fsum(s.alpha for s in bank.samples)
    for s in bank.samples:
        s.alpha /= total
    return bank


def should_update(bank: MemoryBank, reliable: bool) -> bool:
    """Decide whether to refit the appearance model this frame.

    True on every verified frame and on the eighth consecutive
    unverified one; the frame counter restarts whenever this fires.
    """
    bank.frames_since_update += 1
    if reliable or bank.frames_since_update >= UPDATE_PERIOD:
        bank.frames_since_update = 0
        return True
    return False
