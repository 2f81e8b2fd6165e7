"""Handcrafted feature front-end.

Stands in for a learned backbone: per-cell color statistics, gradient
orientation histograms, multi-scale box-filtered intensity, and positional
encodings on a stride-16 grid, with the same recipe at strides 8 and 4 for
the decoder skip connections. Deterministic by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import PipelineConfig
from .errors import ContractError
from .mask import InstanceMask
from .tensor import Tensor3

#: Names of the base per-cell channels, in layout order. The last two slots
#: hold (x, y) position for task features and (foreground fraction,
#: instance count) for guidance features.
BASE_CHANNEL_NAMES = (
    "mean_r", "mean_g", "mean_b",
    "std_r", "std_g", "std_b",
    "grad_h", "grad_v",
    "orient_0", "orient_1", "orient_2", "orient_3",
    "orient_4", "orient_5", "orient_6", "orient_7",
    "box_6", "box_12", "box_18",
    "pos_x", "pos_y",
)

N_BASE = len(BASE_CHANNEL_NAMES)

BOX_RADII = (6, 12, 18)
N_ORIENT_BINS = 8

_PERM_ENTROPY = 0x5EED_FEA7
_BRANCH_TAGS = {"sal": 1, "ins": 2, "guide": 3}


class Frame:
    """One RGB video frame with values in [0,1], stored (height, width, 3)."""

    __slots__ = ("rgb",)

    def __init__(self, rgb):
        arr = np.ascontiguousarray(rgb, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ContractError(f"frame must be (h, w, 3), got shape {arr.shape}")
        if arr.size == 0:
            raise ContractError("frame must be nonempty")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError("frame values must lie in [0,1]")
        self.rgb = arr

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    def intensity(self) -> np.ndarray:
        return self.rgb.mean(axis=2)


@dataclass
class FeatureBundle:
    """The two task-feature views plus grid bookkeeping."""

    sal: Tensor3
    ins: Tensor3
    stride: int
    channels: int

    def __post_init__(self):
        if self.sal.shape != self.ins.shape:
            raise ContractError(f"branch shapes differ: {self.sal.shape} vs {self.ins.shape}")
        if self.sal.channels != self.channels:
            raise ContractError(
                f"bundle declares {self.channels} channels but tensors have {self.sal.channels}"
            )


def _grid_shape(h: int, w: int, stride: int) -> tuple[int, int]:
    return -(-h // stride), -(-w // stride)


def _block_reduce(img: np.ndarray, stride: int) -> np.ndarray:
    """Mean over stride×stride cells; edge cells may be partial."""
    h, w = img.shape
    ri = np.arange(0, h, stride)
    ci = np.arange(0, w, stride)
    sums = np.add.reduceat(np.add.reduceat(img, ri, axis=0), ci, axis=1)
    rows = np.diff(np.append(ri, h))
    cols = np.diff(np.append(ci, w))
    return sums / np.outer(rows, cols)


def _box_filter(img: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)² window, window clipped at the borders.

    Separable per-window sums (not a running-sum scheme) so a pixel only
    ever influences outputs within its own window — locality holds exactly.
    """
    h, w = img.shape
    k = 2 * radius + 1
    rows = np.pad(img, ((radius, radius), (0, 0)))
    col_sums = sliding_window_view(rows, k, axis=0).sum(axis=-1)
    cols = np.pad(col_sums, ((0, 0), (radius, radius)))
    sums = sliding_window_view(cols, k, axis=1).sum(axis=-1)
    ny = np.clip(np.arange(h) + radius + 1, 0, h) - np.clip(np.arange(h) - radius, 0, h)
    nx = np.clip(np.arange(w) + radius + 1, 0, w) - np.clip(np.arange(w) - radius, 0, w)
    return sums / np.outer(ny, nx)


def _cell_centers(n: int, stride: int, limit: int) -> np.ndarray:
    starts = np.arange(0, limit, stride)
    ends = np.minimum(starts + stride, limit)
    return (starts + ends - 1) / 2.0


def _base_cells(frame: Frame, stride: int) -> np.ndarray:
    """The 21 base channels on the stride grid, layout per BASE_CHANNEL_NAMES."""
    h, w = frame.height, frame.width
    gh, gw = _grid_shape(h, w, stride)
    out = np.empty((N_BASE, gh, gw))

    rgb = frame.rgb
    for c in range(3):
        mean_c = _block_reduce(rgb[:, :, c], stride)
        mean_sq = _block_reduce(rgb[:, :, c] ** 2, stride)
        out[c] = mean_c
        out[3 + c] = np.sqrt(np.maximum(mean_sq - mean_c**2, 0.0))

    inten = frame.intensity()
    gv, gh_ = np.gradient(inten) if min(h, w) > 1 else (np.zeros_like(inten),) * 2
    out[6] = _block_reduce(gh_, stride)
    out[7] = _block_reduce(gv, stride)

    mag = np.hypot(gh_, gv)
    ang = np.arctan2(gv, gh_)  # [-pi, pi]
    bins = np.minimum((ang + np.pi) / (2 * np.pi / N_ORIENT_BINS), N_ORIENT_BINS - 1).astype(int)
    for b in range(N_ORIENT_BINS):
        out[8 + b] = _block_reduce(mag * (bins == b), stride)

    for i, radius in enumerate(BOX_RADII):
        out[16 + i] = _block_reduce(_box_filter(inten, radius), stride)

    cy = _cell_centers(gh, stride, h)
    cx = _cell_centers(gw, stride, w)
    pos_x = 2.0 * cx / max(w - 1, 1) - 1.0
    pos_y = 2.0 * cy / max(h - 1, 1) - 1.0
    out[19] = np.broadcast_to(pos_x, (gh, gw))
    out[20] = np.broadcast_to(pos_y[:, None], (gh, gw))
    return out


def _tile_to_channels(base: np.ndarray, channels: int) -> np.ndarray:
    return base[np.arange(channels) % base.shape[0]]


@lru_cache(maxsize=32)
def branch_permutation(channels: int, branch: str) -> np.ndarray:
    """Fixed channel shuffle giving each branch a distinct view of the recipe."""
    if branch not in _BRANCH_TAGS:
        raise ContractError(f"unknown branch {branch!r}")
    rng = np.random.default_rng(np.random.SeedSequence((_PERM_ENTROPY, _BRANCH_TAGS[branch])))
    perm = rng.permutation(channels)
    perm.setflags(write=False)
    return perm


def _check_frame_size(frame: Frame, stride: int):
    if frame.height < stride or frame.width < stride:
        raise ContractError(
            f"frame {frame.height}x{frame.width} is smaller than the stride {stride}"
        )


def extract_task_features(frame: Frame, config: PipelineConfig) -> FeatureBundle:
    """Per-frame features for the two prediction heads.

    Both branches share the base recipe tiled to `config.channels`; they
    differ by a fixed per-branch channel permutation so each head sees a
    distinct view.
    """
    _check_frame_size(frame, config.stride)
    tiled = _tile_to_channels(_base_cells(frame, config.stride), config.channels)
    sal = Tensor3(tiled[branch_permutation(config.channels, "sal")])
    ins = Tensor3(tiled[branch_permutation(config.channels, "ins")])
    return FeatureBundle(sal=sal, ins=ins, stride=config.stride, channels=config.channels)


def extract_low_level(frame: Frame, config: PipelineConfig) -> dict[int, Tensor3]:
    """The same recipe at strides 8 and 4, for the decoder skip connections."""
    _check_frame_size(frame, config.stride)
    return {
        s: Tensor3(_tile_to_channels(_base_cells(frame, s), config.channels))
        for s in (8, 4)
    }


def extract_guidance_features(
    prev_frame: Frame, prev_mask: InstanceMask, config: PipelineConfig
) -> Tensor3:
    """Features of the previous frame joined with its instance labeling.

    Identical recipe to the task features except the two position channels
    are replaced by a per-cell foreground fraction and a per-cell count of
    distinct instances.
    """
    _check_frame_size(prev_frame, config.stride)
    if prev_mask.shape != (prev_frame.height, prev_frame.width):
        raise ContractError(
            f"mask {prev_mask.shape} does not match frame "
            f"({prev_frame.height}, {prev_frame.width})"
        )
    stride = config.stride
    base = _base_cells(prev_frame, stride)
    base[19] = _block_reduce(prev_mask.foreground().astype(np.float64), stride)

    gh, gw = _grid_shape(prev_frame.height, prev_frame.width, stride)
    counts = np.zeros((gh, gw))
    labels = prev_mask.labels
    for i in range(gh):
        for j in range(gw):
            cell = labels[i * stride:(i + 1) * stride, j * stride:(j + 1) * stride]
            present = np.unique(cell)
            counts[i, j] = present.size - (1 if present[0] == 0 else 0)
    base[20] = counts

    tiled = _tile_to_channels(base, config.channels)
    return Tensor3(tiled[branch_permutation(config.channels, "guide")])
