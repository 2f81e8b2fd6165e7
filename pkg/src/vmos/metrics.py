"""Segmentation and tracking quality measures.

Region similarity J is plain mask IoU (with the both-empty frame counting
as a perfect 1, so absent objects do not penalise agreement).  Boundary
accuracy F compares 4-connected mask contours under a pixel tolerance
proportional to the image diagonal.  Track-level scores are averaged per
matched (prediction, ground-truth) pair after an optimal one-to-one
assignment, and a category-agnostic average precision over masks covers
the detection view of the same outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import ContractError
from .mask import InstanceMask

#: Fraction of the image diagonal used as the default boundary tolerance.
BOUNDARY_TOLERANCE_FRACTION = 0.008

#: Mask-AP matching thresholds: 0.50, 0.55, ..., 0.95.
AP_THRESHOLDS = tuple(0.5 + 0.05 * k for k in range(10))

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _as_mask_pair(pred, gt):
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ContractError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def region_similarity(pred, gt) -> float:
    """Mask IoU; two empty masks agree perfectly and score 1."""
    p, g = _as_mask_pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def contour(mask) -> np.ndarray:
    """Pixels of the mask with a 4-neighbour outside it (image edge counts)."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.zeros_like(m)
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return m & ~interior


def default_tolerance(shape) -> int:
    h, w = shape
    return int(round(BOUNDARY_TOLERANCE_FRACTION * math.hypot(h, w)))


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return yy * yy + xx * xx <= radius * radius


def boundary_accuracy(pred, gt, tolerance: int | None = None) -> float:
    """F-measure between mask contours under a Euclidean pixel tolerance.

    Precision is the fraction of predicted contour pixels within
    `tolerance` of the ground-truth contour (computed by dilating the
    latter with an exact disk); recall is symmetric.  Two empty contours
    score 1, exactly one empty scores 0.
    """
    p, g = _as_mask_pair(pred, gt)
    if tolerance is None:
        tolerance = default_tolerance(p.shape)
    if tolerance < 0:
        raise ContractError(f"tolerance must be nonnegative, got {tolerance}")
    pb, gb = contour(p), contour(g)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    if tolerance > 0:
        disk = _disk(int(tolerance))
        g_reach = ndimage.binary_dilation(gb, structure=disk)
        p_reach = ndimage.binary_dilation(pb, structure=disk)
    else:
        g_reach, p_reach = gb, pb
    precision = float((pb & g_reach).sum() / pb.sum())
    recall = float((gb & p_reach).sum() / gb.sum())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def aggregate(values) -> tuple[float, float, float]:
    """Per-track roll-up of a per-frame score sequence: (mean, recall, decay).

    Recall counts frames strictly above 0.5.  Decay is the mean of the
    first quarter of frames minus the mean of the last quarter (quarter
    length N//4, at least one frame), so positive decay means quality
    degraded over time.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractError("aggregate needs a nonempty 1-D score sequence")
    q = max(1, v.size // 4)
    return float(v.mean()), float((v > 0.5).mean()), float(v[:q].mean() - v[-q:].mean())


class TrackSet:
    """A per-frame sequence of instance labelings with stable track ids."""

    __slots__ = ("masks",)

    def __init__(self, masks):
        masks = list(masks)
        for m in masks:
            if not isinstance(m, InstanceMask):
                raise ContractError("TrackSet frames must be InstanceMask objects")
        shapes = {m.shape for m in masks}
        if len(shapes) > 1:
            raise ContractError(f"all frames must share one shape, got {shapes}")
        self.masks = masks

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def shape(self):
        return self.masks[0].shape if self.masks else None

    def track_ids(self) -> list[int]:
        ids = set()
        for m in self.masks:
            ids.update(m.ids())
        return sorted(ids)

    def track_masks(self, track_id: int) -> list[np.ndarray]:
        return [m.binary(track_id) for m in self.masks]


def _pair_sequences(pred_masks, gt_masks, tolerance):
    j = [region_similarity(p, g) for p, g in zip(pred_masks, gt_masks)]
    f = [boundary_accuracy(p, g, tolerance) for p, g in zip(pred_masks, gt_masks)]
    return np.asarray(j), np.asarray(f)


def optimal_assignment(matrix) -> list[tuple[int, int]]:
    """Injective row-to-column pairing maximising the summed score."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"score matrix must be 2-D, got shape {m.shape}")
    if m.size == 0:
        return []
    rows, cols = linear_sum_assignment(m, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def assign_tracks(pred: TrackSet, gt: TrackSet, tolerance: int | None = None):
    """Optimal injective mapping of predicted tracks onto ground-truth tracks.

    The pairing maximises the summed per-track mean of (J+F)/2; extra
    predicted tracks map to None (a void track worth 0).  Returns the
    mapping and the score matrix indexed by (pred position, gt position).
    """
    if len(pred) != len(gt):
        raise ContractError(f"frame counts differ: {len(pred)} vs {len(gt)}")
    pred_ids, gt_ids = pred.track_ids(), gt.track_ids()
    matrix = np.zeros((len(pred_ids), len(gt_ids)))
    for i, pid in enumerate(pred_ids):
        pm = pred.track_masks(pid)
        for k, gid in enumerate(gt_ids):
            j, f = _pair_sequences(pm, gt.track_masks(gid), tolerance)
            matrix[i, k] = float((j + f).mean() / 2.0)
    mapping = {pid: None for pid in pred_ids}
    for r, c in optimal_assignment(matrix):
        mapping[pred_ids[r]] = gt_ids[c]
    return mapping, matrix


@dataclass
class TrackScores:
    """Aggregated J and F statistics for one ground-truth track."""

    j_mean: float
    j_recall: float
    j_decay: float
    f_mean: float
    f_recall: float
    f_decay: float

    def to_dict(self) -> dict:
        return {
            "J-Mean": self.j_mean, "J-Recall": self.j_recall, "J-Decay": self.j_decay,
            "F-Mean": self.f_mean, "F-Recall": self.f_recall, "F-Decay": self.f_decay,
        }


@dataclass
class MetricReport:
    """Headline quality numbers for one predicted-vs-ground-truth video."""

    per_track: dict = field(default_factory=dict)
    j_mean: float = 0.0
    j_recall: float = 0.0
    j_decay: float = 0.0
    f_mean: float = 0.0
    f_recall: float = 0.0
    f_decay: float = 0.0
    jf_mean: float = 0.0
    ap: float = 0.0
    ap50: float = 0.0
    ap75: float = 0.0

    def __post_init__(self):
        for name in ("j_mean", "j_recall", "f_mean", "f_recall", "jf_mean",
                     "ap", "ap50", "ap75"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0,1], got {v}")
        for name in ("j_decay", "f_decay"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [-1,1], got {v}")

    def to_dict(self) -> dict:
        return {
            "J&F-Mean": self.jf_mean,
            "J-Mean": self.j_mean, "J-Recall": self.j_recall, "J-Decay": self.j_decay,
            "F-Mean": self.f_mean, "F-Recall": self.f_recall, "F-Decay": self.f_decay,
            "AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
            "per_track": {str(tid): s.to_dict() for tid, s in self.per_track.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(pred: TrackSet, gt: TrackSet, tolerance: int | None = None) -> MetricReport:
    """Score a predicted TrackSet against ground truth.

    Ground-truth tracks are the unit of accounting: each one pairs with
    at most one predicted track (optimal assignment on mean (J+F)/2) and
    unmatched ground-truth tracks are scored against an empty prediction.
    Global numbers average the per-track aggregates; AP treats every
    per-frame instance as a unit-score detection.
    """
    if len(pred) != len(gt):
        raise ContractError(f"frame counts differ: {len(pred)} vs {len(gt)}")
    gt_ids = gt.track_ids()
    mapping, _ = assign_tracks(pred, gt, tolerance)
    by_gt = {g: p for p, g in mapping.items() if g is not None}

    shape = gt.shape or (pred.shape or (1, 1))
    empty_track = [np.zeros(shape, dtype=bool) for _ in range(len(gt))]

    per_track = {}
    for gid in gt_ids:
        pm = pred.track_masks(by_gt[gid]) if gid in by_gt else empty_track
        j, f = _pair_sequences(pm, gt.track_masks(gid), tolerance)
        per_track[gid] = TrackScores(*aggregate(j), *aggregate(f))

    if per_track:
        scores = list(per_track.values())
        j_mean = float(np.mean([s.j_mean for s in scores]))
        f_mean = float(np.mean([s.f_mean for s in scores]))
        stats = dict(
            j_mean=j_mean,
            j_recall=float(np.mean([s.j_recall for s in scores])),
            j_decay=float(np.mean([s.j_decay for s in scores])),
            f_mean=f_mean,
            f_recall=float(np.mean([s.f_recall for s in scores])),
            f_decay=float(np.mean([s.f_decay for s in scores])),
            jf_mean=(j_mean + f_mean) / 2.0,
        )
    else:
        perfect = 1.0 if all(not m.foreground().any() for m in pred.masks) else 0.0
        stats = dict(j_mean=perfect, j_recall=perfect, j_decay=0.0,
                     f_mean=perfect, f_recall=perfect, f_decay=0.0, jf_mean=perfect)

    pred_frames = [[(m.binary(i), 1.0) for i in m.ids()] for m in pred.masks]
    gt_frames = [[m.binary(i) for i in m.ids()] for m in gt.masks]
    ap, ap50, ap75 = mask_ap(pred_frames, gt_frames)
    return MetricReport(per_track=per_track, ap=ap, ap50=ap50, ap75=ap75, **stats)


def _average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered true-positive flags."""
    if n_gt == 0:
        return 1.0 if tp_flags.size == 0 else 0.0
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    precision = tp / (tp + fp)
    recall = tp / n_gt
    # Precision envelope: best precision achievable at or beyond each rank.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    # First rank reaching each recall level; unreachable levels score 0.
    idx = np.searchsorted(recall, grid, side="left")
    valid = idx < len(recall)
    interp = np.zeros_like(grid)
    interp[valid] = envelope[idx[valid]]
    return float(interp.mean())


def mask_ap(pred_frames, gt_frames) -> tuple[float, float, float]:
    """Category-agnostic mask AP over a video: (AP over 0.50:0.95, AP50, AP75).

    `pred_frames` holds per-frame lists of (mask, score) proposals and
    `gt_frames` per-frame lists of ground-truth masks.  Detections are
    ranked by score across the whole video (ties keep submission order)
    and matched greedily within their frame to the free ground-truth
    instance of highest IoU, counting as true positives at IoU >= the
    threshold.
    """
    if len(pred_frames) != len(gt_frames):
        raise ContractError(f"frame counts differ: {len(pred_frames)} vs {len(gt_frames)}")
    detections = []  # (frame index, submission order, score, mask)
    for fi, props in enumerate(pred_frames):
        for order, (mask, score) in enumerate(props):
            detections.append((fi, order, float(score), np.asarray(mask, dtype=bool)))
    detections.sort(key=lambda d: (-d[2], d[0], d[1]))
    n_gt = sum(len(g) for g in gt_frames)

    ap_by_threshold = {}
    for thr in AP_THRESHOLDS:
        taken = [np.zeros(len(g), dtype=bool) for g in gt_frames]
        flags = np.zeros(len(detections), dtype=bool)
        for di, (fi, _, _, mask) in enumerate(detections):
            gts = gt_frames[fi]
            best, best_iou = -1, 0.0
            for gi, g in enumerate(gts):
                if taken[fi][gi]:
                    continue
                union = np.logical_or(mask, g).sum()
                ov = float(np.logical_and(mask, g).sum() / union) if union else 0.0
                if ov > best_iou:
                    best, best_iou = gi, ov
            if best >= 0 and best_iou >= thr:
                taken[fi][best] = True
                flags[di] = True
        ap_by_threshold[thr] = _average_precision(flags, n_gt)

    ap = float(np.mean(list(ap_by_threshold.values())))
    return ap, ap_by_threshold[0.5], ap_by_threshold[0.5 + 0.05 * 5]
