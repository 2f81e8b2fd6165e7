"""End-to-end frame loop: propose instances, track them, emit one labeling per frame.

Frames are processed strictly in order.  Each step runs the detection
branch (optionally fused with guidance from the previous frame's output),
lets every live tracklet predict and re-verify itself against the fresh
proposals, spawns tracklets for unclaimed proposals, refreshes the memory
banks, optionally refits appearance models, and finally flattens all
per-target masks into a single instance labeling.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .appearance import downsample_mask, gauss_newton_fit, predict
from .association import (
    Segment,
    Tracklet,
    discover_new_targets,
    make_segment,
    resolve_overlaps,
    score_to_mask,
    upsample_score,
    verify_and_swap,
)
from .config import PipelineConfig
from .errors import ContractError, DataError, NumericalError
from .features import (
    Frame,
    extract_guidance_features,
    extract_low_level,
    extract_task_features,
)
from .heads import (
    HeadParams,
    HeadSample,
    detect_centers,
    group_instances,
    instance_forward,
    salient_forward,
)
from .mask import InstanceMask
from .memory import push, should_update
from .metrics import TrackSet
from .sgm import SgmParams, guide

_SGM_SEED_TAG = 0x5D_F0  # mixed into the run seed for the per-branch fusion weights


def thread_count(n_items: int) -> int:
    """Resolve VMOS_THREADS against the work at hand (0 or unset = one per cpu)."""
    raw = os.environ.get("VMOS_THREADS", "0").strip() or "0"
    try:
        requested = int(raw)
    except ValueError as exc:
        raise DataError(f"VMOS_THREADS must be an integer, got {raw!r}") from exc
    if requested < 0:
        raise DataError(f"VMOS_THREADS must be >= 0, got {requested}")
    if requested == 0:
        requested = os.cpu_count() or 1
    return max(1, min(requested, n_items))


def _map_tracklets(fn, items: list):
    """Order-preserving map, fanned out over threads when it pays off."""
    workers = thread_count(len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def default_sgm(config: PipelineConfig) -> dict[str, SgmParams]:
    """Per-branch channel-attention weights, derived from the run seed."""
    seeds = np.random.SeedSequence((config.seed, _SGM_SEED_TAG)).generate_state(2)
    return {
        "sal": SgmParams.seeded(config.channels, int(seeds[0])),
        "ins": SgmParams.seeded(config.channels, int(seeds[1])),
    }


@dataclass
class FrameTiming:
    """Wall-clock accounting for one frame, split by stage."""

    frame: int
    proposal_ms: float
    tracking_ms: float
    start: float
    end: float

    def to_dict(self) -> dict:
        return {
            "frame": self.frame,
            "proposal_ms": self.proposal_ms,
            "tracking_ms": self.tracking_ms,
            "start": self.start,
            "end": self.end,
        }


@dataclass
class RunRecord:
    """What happened during a run: per-frame timings plus an event log."""

    timings: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def log(self, frame: int, event: str, **details) -> None:
        self.events.append({"frame": frame, "event": event, **details})

    def mean_ms(self) -> dict:
        """Average per-frame cost of each stage, in milliseconds."""
        if not self.timings:
            return {"proposal": 0.0, "tracking": 0.0, "total": 0.0}
        prop = float(np.mean([t.proposal_ms for t in self.timings]))
        track = float(np.mean([t.tracking_ms for t in self.timings]))
        return {"proposal": prop, "tracking": track, "total": prop + track}

    def to_dict(self) -> dict:
        return {
            "frames": [t.to_dict() for t in self.timings],
            "events": self.events,
            "mean_ms": self.mean_ms(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class PipelineResult:
    """Output labelings plus the run record and the surviving tracklets."""

    masks: TrackSet
    record: RunRecord
    tracklets: list


def _propose(frame: Frame, prev_frame, prev_mask, params: HeadParams,
             sgm: dict, config: PipelineConfig):
    """Detection branch for one frame.

    Returns the proposal segments and the instance-branch features the
    tracking side should work with.  Tracking features stay unfused:
    guidance is conditioned on the previous output, so mixing it in would
    make embeddings of the same object drift from frame to frame.
    """
    bundle = extract_task_features(frame, config)
    low = extract_low_level(frame, config)
    feat_sal, feat_ins = bundle.sal, bundle.ins
    if prev_frame is not None:
        x_guid = extract_guidance_features(prev_frame, prev_mask, config)
        feat_sal = guide(bundle.sal, x_guid, sgm["sal"])
        feat_ins = guide(bundle.ins, x_guid, sgm["ins"])
    shape = (frame.height, frame.width)
    fg = salient_forward(feat_sal, low[8], low[4], params, shape)
    heatmap, offsets = instance_forward(feat_ins, low[8], low[4], params, shape)
    centers = detect_centers(heatmap, config.nms_window,
                             config.heatmap_threshold, config.top_k)
    _, proposals = group_instances(fg.data[0] > config.foreground_threshold,
                                   offsets, centers)
    segments = [make_segment(p.mask, bundle.ins, config.stride) for p in proposals]
    return segments, bundle.ins


def _predict_one(trk: Tracklet, feats, shape, config: PipelineConfig):
    """One tracklet's appearance pass: frame-resolution scores and mask."""
    up = upsample_score(predict(trk.model, feats), shape, config.stride)
    mask = score_to_mask(up, shape, config.stride, config.score_threshold)
    return up, mask


def _refresh_one(trk: Tracklet, reliable: bool, feats, config: PipelineConfig) -> bool:
    """Push this frame into the tracklet's memory; refit when it is due."""
    target = downsample_mask(trk.latest.mask, config.stride)
    push(trk.bank, feats, target, reliable=reliable)
    if not should_update(trk.bank, reliable):
        return False
    gauss_newton_fit(trk.model, trk.bank.samples, config.gn_iters_update,
                     config.gn_iters_cg, damping=config.damping)
    return True


def _track(t: int, segments: list, feats, shape, tracklets: list,
           config: PipelineConfig, record: RunRecord, next_id: int):
    """Tracking stage for one frame; mutates `tracklets`, returns the labeling."""
    active = [trk for trk in tracklets if not trk.retired]

    preds = _map_tracklets(lambda trk: _predict_one(trk, feats, shape, config), active)
    upscores = {}
    for trk, (up, mask) in zip(active, preds):
        upscores[trk.id] = up
        trk.latest = make_segment(mask, feats, config.stride)

    decisions = [verify_and_swap(trk, segments, config.th_reid, config.iou_gate)
                 for trk in active]
    for trk, dec in zip(active, decisions):
        if dec.reliable:
            record.log(t, "swap", tracklet=trk.id, proposal=dec.proposal_index,
                       score=round(dec.score, 6))

    current = [trk.latest.mask for trk in active]
    born = discover_new_targets(segments, active, current, feats, config, next_id)
    spawned = []
    for trk in born:
        idx = next(i for i, seg in enumerate(segments) if seg is trk.y0)
        spawned.append(idx)
        record.log(t, "spawn", tracklet=trk.id, proposal=idx)
    next_id += len(born)

    refitted = _map_tracklets(
        lambda pair: _refresh_one(pair[0], pair[1].reliable, feats, config),
        list(zip(active, decisions)))
    for trk, did in zip(active, refitted):
        if did:
            record.log(t, "refit", tracklet=trk.id)

    for trk in active:
        was_retired = trk.retired
        lost_now = trk.latest.empty
        trk.note_result(trk.latest, config.retire_after)
        if lost_now:
            record.log(t, "lost", tracklet=trk.id, frames_lost=trk.frames_lost)
        if trk.retired and not was_retired:
            record.log(t, "retire", tracklet=trk.id)

    attached = sorted(dec.proposal_index for dec in decisions if dec.reliable)
    taken = set(attached) | set(spawned)
    record.log(t, "proposals", total=len(segments), attached=attached,
               spawned=spawned,
               discarded=[i for i in range(len(segments)) if i not in taken])

    tracklets.extend(born)
    for trk in born:
        up, _ = _predict_one(trk, feats, shape, config)
        upscores[trk.id] = up

    live = [trk for trk in active if not trk.retired and not trk.latest.empty]
    live += born
    if not live:
        return InstanceMask(np.zeros(shape, dtype=np.int32)), next_id
    final = resolve_overlaps({trk.id: trk.latest.mask for trk in live},
                             {trk.id: upscores[trk.id] for trk in live})
    return final, next_id


def run_pipeline(frames: Sequence[Frame], params: HeadParams,
                 config: PipelineConfig, sgm: dict | None = None) -> PipelineResult:
    """Segment and track every object through `frames`, strictly in order.

    Numerical or data failures inside a single frame are logged and that
    frame is emitted as all-background; the run continues.
    """
    if sgm is None:
        sgm = default_sgm(config)
    shapes = {(f.height, f.width) for f in frames}
    if len(shapes) > 1:
        raise DataError(f"all frames must share one shape, got {sorted(shapes)}")
    thread_count(0)  # surface a malformed VMOS_THREADS before any work
    record = RunRecord()
    tracklets: list[Tracklet] = []
    out: list[InstanceMask] = []
    next_id = 1
    prev_frame = None
    prev_mask = None
    for t, frame in enumerate(frames):
        shape = (frame.height, frame.width)
        t0 = time.perf_counter()
        t1 = None
        try:
            segments, feats = _propose(frame, prev_frame, prev_mask,
                                       params, sgm, config)
            t1 = time.perf_counter()
            final, next_id = _track(t, segments, feats, shape, tracklets,
                                    config, record, next_id)
        except (ContractError, DataError, NumericalError) as exc:
            if t1 is None:
                t1 = time.perf_counter()
            record.log(t, "error", kind=type(exc).__name__, detail=str(exc))
            final = InstanceMask(np.zeros(shape, dtype=np.int32))
        t2 = time.perf_counter()
        record.timings.append(FrameTiming(
            frame=t, proposal_ms=(t1 - t0) * 1e3, tracking_ms=(t2 - t1) * 1e3,
            start=t0, end=t2))
        out.append(final)
        prev_frame, prev_mask = frame, final
    return PipelineResult(masks=TrackSet(out), record=record, tracklets=tracklets)


def build_training_samples(frames: Sequence[Frame], gt_masks: Sequence[InstanceMask],
                           config: PipelineConfig,
                           sgm: dict | None = None) -> list[HeadSample]:
    """Teacher-forced training set for the decoders.

    Guidance for frame t comes from frame t-1 and its ground-truth
    labeling, matching how inference feeds back its own output.
    """
    if len(frames) != len(gt_masks):
        raise ContractError(
            f"{len(frames)} frames but {len(gt_masks)} ground-truth masks")
    if sgm is None:
        sgm = default_sgm(config)
    samples = []
    prev = None
    for frame, gt in zip(frames, gt_masks):
        if gt.shape != (frame.height, frame.width):
            raise ContractError(
                f"mask {gt.shape} does not match frame ({frame.height}, {frame.width})")
        bundle = extract_task_features(frame, config)
        low = extract_low_level(frame, config)
        feat_sal, feat_ins = bundle.sal, bundle.ins
        if prev is not None:
            x_guid = extract_guidance_features(prev[0], prev[1], config)
            feat_sal = guide(bundle.sal, x_guid, sgm["sal"])
            feat_ins = guide(bundle.ins, x_guid, sgm["ins"])
        samples.append(HeadSample(sal_feat=feat_sal, ins_feat=feat_ins,
                                  low8=low[8], low4=low[4], gt=gt))
        prev = (frame, gt)
    return samples
