"""Guided feature fusion via squeeze-and-excitation channel attention.

Current-frame task features are blended per channel with previous-frame
guidance features. A squeeze (global average pool) of both tensors feeds a
two-layer fully connected excitation whose paired softmax yields convex
weights (alpha, beta) per channel, alpha + beta = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor3, global_avg_pool, softmax_pairwise


@dataclass
class SgmParams:
    """Excitation weights: 2C -> hidden -> 2C with a ReLU between."""

    w1: np.ndarray  # (hidden, 2C)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (2C, hidden)
    b2: np.ndarray  # (2C,)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        hidden, twoc = self.w1.shape
        if twoc % 2 != 0:
            raise ContractError(f"excitation input must have even length, got {twoc}")
        if self.b1.shape != (hidden,) or self.w2.shape != (twoc, hidden) or self.b2.shape != (twoc,):
            raise ContractError(
                f"inconsistent excitation shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )
        if not all(np.isfinite(a).all() for a in (self.w1, self.b1, self.w2, self.b2)):
            raise ContractError("excitation parameters must be finite")

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def channels(self) -> int:
        return self.w1.shape[1] // 2

    @classmethod
    def zeros(cls, channels: int, hidden: int | None = None) -> "SgmParams":
        hidden = default_hidden(channels) if hidden is None else hidden
        return cls(
            np.zeros((hidden, 2 * channels)), np.zeros(hidden),
            np.zeros((2 * channels, hidden)), np.zeros(2 * channels),
        )

    @classmethod
    def seeded(cls, channels: int, seed: int, hidden: int | None = None) -> "SgmParams":
        """Random init at scale 1/sqrt(fan-in), zero biases."""
        hidden = default_hidden(channels) if hidden is None else hidden
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x56_4D)))
        return cls(
            rng.normal(scale=1.0 / np.sqrt(2 * channels), size=(hidden, 2 * channels)),
            np.zeros(hidden),
            rng.normal(scale=1.0 / np.sqrt(hidden), size=(2 * channels, hidden)),
            np.zeros(2 * channels),
        )


def default_hidden(channels: int) -> int:
    return max(channels // 2, 8)


@dataclass
class FusionWeights:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 1:
            raise ContractError(
                f"fusion weights must be matching vectors, got {self.alpha.shape} / {self.beta.shape}"
            )
        if np.any(self.alpha < 0.0) or np.any(self.beta < 0.0):
            raise ContractError("fusion weights must be nonnegative")
        if np.max(np.abs(self.alpha + self.beta - 1.0), initial=0.0) > 1e-9:
            raise ContractError("fusion weights must sum to 1 per channel")


def squeeze(x: Tensor3) -> np.ndarray:
    """Global spatial information per channel."""
    return global_avg_pool(x)


def excite(c_task: np.ndarray, c_guid: np.ndarray, params: SgmParams) -> FusionWeights:
    """Turn the two channel descriptors into per-channel convex weights."""
    c_task = np.asarray(c_task, dtype=np.float64)
    c_guid = np.asarray(c_guid, dtype=np.float64)
    if c_task.shape != c_guid.shape or c_task.ndim != 1:
        raise ContractError(f"descriptor shapes differ: {c_task.shape} vs {c_guid.shape}")
    if c_task.size != params.channels:
        raise ContractError(
            f"descriptors have {c_task.size} channels, parameters expect {params.channels}"
        )
    c = np.concatenate([c_task, c_guid])
    h = np.maximum(params.w1 @ c + params.b1, 0.0)
    logits = params.w2 @ h + params.b2
    z = softmax_pairwise(logits)
    return FusionWeights(alpha=z[0], beta=z[1])


def fuse(x_task: Tensor3, x_guid: Tensor3, w: FusionWeights) -> Tensor3:
    """Per-channel convex combination alpha*task + beta*guid.

    Evaluated as task + beta*(guid - task): identical inputs pass through
    bit-exactly and every output stays inside the elementwise interval
    spanned by the two inputs, even in floating point.
    """
    if x_task.shape != x_guid.shape:
        raise ContractError(f"shape mismatch {x_task.shape} vs {x_guid.shape}")
    if w.alpha.size != x_task.channels:
        raise ContractError(
            f"fusion weights cover {w.alpha.size} channels, tensors have {x_task.channels}"
        )
    beta = w.beta[:, None, None]
    return Tensor3(x_task.data + beta * (x_guid.data - x_task.data))


def guide(x_task: Tensor3, x_guid: Tensor3, params: SgmParams) -> Tensor3:
    """squeeze -> excite -> fuse, the full guidance step for one head."""
    w = excite(squeeze(x_task), squeeze(x_guid), params)
    return fuse(x_task, x_guid, w)
