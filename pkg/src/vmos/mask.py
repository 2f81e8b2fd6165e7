"""Per-pixel instance labeling shared across the pipeline."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class InstanceMask:
    """A per-pixel instance-ID raster.

    Label 0 is background; label k>0 marks instance k. Labels partition the
    frame by construction: one label per pixel, so instances never overlap.
    """

    __slots__ = ("labels",)

    def __init__(self, labels):
        arr = np.ascontiguousarray(labels)
        if arr.ndim != 2:
            raise ContractError(f"instance labels must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int32)
        if arr.size and arr.min() < 0:
            raise ContractError("instance labels must be nonnegative")
        self.labels = arr.astype(np.int32, copy=False)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self):
        return self.labels.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "InstanceMask":
        return cls(np.zeros((height, width), dtype=np.int32))

    def ids(self) -> list[int]:
        """Sorted instance ids present (background excluded)."""
        present = np.unique(self.labels)
        return [int(v) for v in present if v != 0]

    def binary(self, instance_id: int) -> np.ndarray:
        return self.labels == instance_id

    def foreground(self) -> np.ndarray:
        return self.labels > 0

    def copy(self) -> "InstanceMask":
        return InstanceMask(self.labels.copy())

    def __eq__(self, other) -> bool:
        return isinstance(other, InstanceMask) and np.array_equal(self.labels, other.labels)

    def __repr__(self) -> str:
        return f"InstanceMask({self.height}x{self.width}, ids={self.ids()})"
