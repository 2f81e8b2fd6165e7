"""Tracklet lifecycle: verification, swapping, discovery, and overlap resolution.

A tracklet couples one target's identity with its per-frame tracking
results, its online appearance model, and its sample memory.  Each frame
the tracker proposes a mask for every live tracklet; instance proposals
from the detection heads are then scored against each tracklet with a
gated cosine rule and may replace the tracker's own result.  Proposals
that match nothing and overlap nothing start new tracklets, and the
per-target masks are finally flattened into one non-overlapping
labeling.

The re-identification embedding here is a deterministic stand-in for a
pretrained network: masked feature pooling concatenated with mask shape
statistics, L2-normalised.  It keeps the cosine-comparison contract
(identical segments score 1, empty segments score 0) so the matching
logic is exercised honestly, but its similarities are not learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .appearance import AppearanceModel, downsample_mask, init_model
from .config import PipelineConfig
from .errors import ContractError
from .mask import InstanceMask
from .memory import MemoryBank, create_bank
from .tensor import Tensor3, bilinear_upsample

#: Consecutive empty-result frames after which a tracklet is retired.
RETIRE_AFTER = 20


class ReidEmbedding:
    """A unit-norm appearance descriptor (or the zero vector for emptiness)."""

    __slots__ = ("v",)

    def __init__(self, values):
        v = np.ascontiguousarray(values, dtype=np.float64)
        if v.ndim != 1:
            raise ContractError(f"embedding must be a flat vector, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ContractError("embedding values must be finite")
        norm = float(np.linalg.norm(v))
        if norm > 0.0:
            v = v / norm
        self.v = v

    @property
    def is_zero(self) -> bool:
        return not self.v.any()

    def __eq__(self, other) -> bool:
        return isinstance(other, ReidEmbedding) and np.array_equal(self.v, other.v)


def cosine(a: ReidEmbedding, b: ReidEmbedding) -> float:
    """Cosine similarity; zero embeddings score 0 against everything."""
    if a.is_zero or b.is_zero:
        return 0.0
    if np.array_equal(a.v, b.v):
        return 1.0
    return float(min(1.0, max(-1.0, a.v @ b.v)))


def embed(mask, feats: Tensor3) -> ReidEmbedding:
    """Describe a segment by pooled features plus shape statistics.

    `mask` is a (soft or binary) coverage raster on the feature grid --
    a frame-resolution mask is downsampled by the caller first.  The
    descriptor is the coverage-weighted mean of each feature channel
    followed by area fraction, centroid, and second central moments in
    grid-fraction units, all L2-normalised.  Empty coverage gives the
    zero vector.
    """
    w = np.ascontiguousarray(mask, dtype=np.float64)
    if w.shape != (feats.height, feats.width):
        raise ContractError(
            f"mask grid {w.shape} does not match feature grid {(feats.height, feats.width)}")
    if w.min() < 0.0:
        raise ContractError("coverage weights must be nonnegative")
    total = w.sum()
    if total == 0.0:
        return ReidEmbedding(np.zeros(feats.channels + 6))
    gh, gw = w.shape
    pooled = (feats.data * w).sum(axis=(1, 2)) / total
    yy = np.arange(gh, dtype=np.float64)[:, None] / gh
    xx = np.arange(gw, dtype=np.float64)[None, :] / gw
    cy = float((w * yy).sum() / total)
    cx = float((w * xx).sum() / total)
    shape_stats = [
        total / (gh * gw),
        cy,
        cx,
        float((w * (yy - cy) ** 2).sum() / total),
        float((w * (xx - cx) ** 2).sum() / total),
        float((w * (yy - cy) * (xx - cx)).sum() / total),
    ]
    return ReidEmbedding(np.concatenate([pooled, shape_stats]))


@dataclass
class Segment:
    """One frame's tracking result: a binary mask and its embedding."""

    mask: np.ndarray
    embedding: ReidEmbedding

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ContractError(f"segment mask must be 2-D, got shape {self.mask.shape}")

    @property
    def empty(self) -> bool:
        return not self.mask.any()


def make_segment(mask, feats: Tensor3, stride: int) -> Segment:
    """Embed a frame-resolution mask against stride-grid features."""
    m = np.ascontiguousarray(mask, dtype=bool)
    return Segment(mask=m, embedding=embed(downsample_mask(m, stride), feats))


@dataclass
class Tracklet:
    """One target: identity, anchor segment, latest segment, model, memory."""

    id: int
    y0: Segment
    latest: Segment
    model: AppearanceModel
    bank: MemoryBank
    frames_lost: int = 0
    retired: bool = False

    def __post_init__(self):
        if self.id < 1:
            raise ContractError(f"tracklet ids start at 1, got {self.id}")
        if self.y0.empty:
            raise ContractError("the anchor segment must be nonempty")

    def note_result(self, segment: Segment, retire_after: int = RETIRE_AFTER) -> None:
        """Record this frame's final segment and advance the lost counter."""
        self.latest = segment
        if segment.empty:
            self.frames_lost += 1
            if self.frames_lost >= retire_after:
                self.retired = True
        else:
            self.frames_lost = 0


@dataclass
class MatchDecision:
    """Outcome of verifying one tracklet against the frame's proposals."""

    tracklet_id: int
    proposal_index: int | None
    score: float

    def __post_init__(self):
        if self.score < 0.0:
            raise ContractError(f"match scores are nonnegative, got {self.score}")

    @property
    def reliable(self) -> bool:
        return self.proposal_index is not None


def iou(a, b) -> float:
    """Intersection over union of two binary masks; empty/empty gives 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def upsample_score(score: Tensor3, frame_shape, stride: int) -> np.ndarray:
    """Lift a grid-resolution score map to frame resolution (bilinear + crop)."""
    if score.channels != 1:
        raise ContractError(f"score map must have one channel, got {score.channels}")
    h, w = frame_shape
    up = bilinear_upsample(score, stride).data[0]
    if up.shape[0] < h or up.shape[1] < w:
        raise ContractError(
            f"grid {score.shape} at stride {stride} cannot cover frame {frame_shape}")
    return up[:h, :w]


def score_to_mask(score, frame_shape, stride: int, threshold: float = 0.5) -> np.ndarray:
    """Threshold an appearance score into this frame's tracking mask.

    Accepts either the raw single-channel grid map (upsampled here) or an
    already-upsampled 2-D array at frame resolution.  Pixels strictly
    above `threshold` are kept and reduced to the largest 4-connected
    component; the result may be empty, which marks the target lost.
    """
    if isinstance(score, Tensor3):
        up = upsample_score(score, frame_shape, stride)
    else:
        up = np.ascontiguousarray(score, dtype=np.float64)
        if up.shape != tuple(frame_shape):
            raise ContractError(
                f"frame-resolution score shape {up.shape} != frame {tuple(frame_shape)}")
    binary = up > threshold
    if not binary.any():
        return binary
    labels, count = ndimage.label(binary)
    if count == 1:
        return binary
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def match_score(proposal: Segment, trk: Tracklet, iou_gate: float = 0.5) -> float:
    """Gated cosine affinity between a proposal and a tracklet.

    The sum of the proposal's cosine similarity to the tracklet's latest
    segment and to its first (anchor) segment, admitted only when the
    proposal overlaps the latest mask by more than `iou_gate`; negative
    sums clamp to zero.
    """
    if iou(proposal.mask, trk.latest.mask) <= iou_gate:
        return 0.0
    s = cosine(proposal.embedding, trk.latest.embedding) \
        + cosine(proposal.embedding, trk.y0.embedding)
    return max(0.0, s)


def verify_and_swap(trk: Tracklet, proposals, th_reid: float = 0.6,
                    iou_gate: float = 0.5) -> MatchDecision:
    """Re-score proposals against a tracklet and adopt the best one if convincing.

    The highest-scoring proposal (ties to the lower index) replaces the
    tracklet's latest segment when its score strictly exceeds `th_reid`;
    the decision then counts as reliable.  Otherwise the tracklet keeps
    its own result.
    """
    if not proposals:
        return MatchDecision(trk.id, None, 0.0)
    scores = [match_score(p, trk, iou_gate) for p in proposals]
    best = max(range(len(scores)), key=scores.__getitem__)
    if scores[best] > th_reid:
        trk.latest = proposals[best]
        return MatchDecision(trk.id, best, scores[best])
    return MatchDecision(trk.id, None, scores[best])


def discover_new_targets(proposals, tracklets, current_masks, feats: Tensor3,
                         config: PipelineConfig, start_id: int):
    """Spawn tracklets for proposals that match nothing and overlap nothing.

    A proposal qualifies only if its match score is exactly zero against
    every given tracklet and its IoU with every current-frame tracking
    mask stays below `config.new_target_iou`.  Each new tracklet gets a
    freshly fitted appearance model (the proposal serving as pseudo
    ground truth) and a memory bank seeded with that sample.
    """
    born = []
    next_id = start_id
    for p in proposals:
        if any(match_score(p, trk, config.iou_gate) != 0.0 for trk in tracklets):
            continue
        if any(iou(p.mask, m) >= config.new_target_iou for m in current_masks):
            continue
        model, _ = init_model(p.mask, feats, config, seed=config.seed + next_id)
        bank = create_bank(feats, downsample_mask(p.mask, config.stride),
                           gamma=config.gamma, capacity=config.capacity)
        born.append(Tracklet(id=next_id, y0=p, latest=p, model=model, bank=bank))
        next_id += 1
    return born


def resolve_overlaps(masks: dict, scores: dict) -> InstanceMask:
    """Flatten per-target masks into one labeling; scores arbitrate conflicts.

    Every pixel goes to the claiming target whose frame-resolution
    appearance score is highest there, ties to the older (smaller) id,
    so the output is always a partition.
    """
    if set(masks) != set(scores):
        raise ContractError("masks and scores must cover the same tracklet ids")
    if any(tid < 1 for tid in masks):
        raise ContractError("tracklet ids start at 1")
    ids = sorted(masks)
    if not ids:
        raise ContractError("resolve_overlaps needs at least one target")
    shape = masks[ids[0]].shape
    labels = np.zeros(shape, dtype=np.int32)
    best = np.full(shape, -np.inf)
    for tid in ids:
        m = np.asarray(masks[tid], dtype=bool)
        s = np.asarray(scores[tid], dtype=np.float64)
        if m.shape != shape or s.shape != shape:
            raise ContractError("all masks and scores must share the frame shape")
        win = m & ((labels == 0) | (s > best))
        labels[win] = tid
        best[win] = s[win]
    return InstanceMask(labels)
