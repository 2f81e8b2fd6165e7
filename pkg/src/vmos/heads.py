"""Bottom-up instance discovery heads.

Two small convolutional decoders sit on the guided stride-16 features: one
estimates salient foreground, the other an object-center heatmap plus a
per-pixel offset field pointing at instance centers. Grouping thresholded
foreground pixels to their nearest (offset-corrected) center yields
non-overlapping instance proposals.

Both decoders share one structure: upsample x2, concat stride-8 skip
features, 5x5 conv, upsample x2, concat stride-4 skip features, two more
5x5 convs, a 1x1 projection, and a final x4 upsample back to frame
resolution. Training is full-batch gradient descent with momentum on the
sum of the three losses; the backward pass is hand-written against the
kernel ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .config import PipelineConfig
from .errors import ContractError, NumericalError
from .mask import InstanceMask
from .tensor import (
    ConvKernel,
    Tensor3,
    bilinear_upsample,
    bilinear_upsample_backward,
    concat_channels,
    conv2d,
    conv2d_backward,
    max_pool2d,
    relu,
    relu_backward,
)

# type aliases kept for readability of signatures
CenterHeatmap = Tensor3
OffsetField = Tensor3

FINAL_UPSAMPLE = 4  # decoder emits at stride 4; offsets are scaled by this


@dataclass
class Proposal:
    """One discovered instance: mask at frame resolution, its seed center, score."""

    mask: np.ndarray
    center: tuple[float, float]
    score: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ContractError("proposal mask must be nonempty")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class HeadParams:
    """Decoder kernels for the salient head (1 output) and instance head (3)."""

    sal: tuple
    ins: tuple

    def __post_init__(self):
        if len(self.sal) != 4 or len(self.ins) != 4:
            raise ContractError("each decoder needs exactly 4 kernels")

    @classmethod
    def seeded(cls, config: PipelineConfig, seed: int | None = None) -> "HeadParams":
        """Random init, scale 1/sqrt(fan-in), zero biases."""
        rng = np.random.default_rng(np.random.SeedSequence(
            (config.seed if seed is None else seed, 0xD0_0D)
        ))
        c, d = config.channels, config.decoder_channels

        def kern(out_c, in_c, k):
            w = rng.normal(scale=1.0 / np.sqrt(in_c * k * k), size=(out_c, in_c, k, k))
            return ConvKernel(w, np.zeros(out_c))

        def decoder(out_c):
            return (kern(d, 2 * c, 5), kern(d, d + c, 5), kern(d, d, 5), kern(out_c, d, 1))

        return cls(sal=decoder(1), ins=decoder(3))

    def copy(self) -> "HeadParams":
        return HeadParams(
            sal=tuple(k.copy() for k in self.sal),
            ins=tuple(k.copy() for k in self.ins),
        )


def _cropped(t: Tensor3, h: int, w: int) -> Tensor3:
    if t.height == h and t.width == w:
        return t
    return Tensor3(t.data[:, :h, :w])


def _pad_to(g: Tensor3, h: int, w: int) -> Tensor3:
    if g.height == h and g.width == w:
        return g
    out = np.zeros((g.channels, h, w))
    out[:, :g.height, :g.width] = g.data
    return Tensor3(out)


def _decode_forward(feat: Tensor3, low8: Tensor3, low4: Tensor3, kernels,
                    frame_shape: tuple[int, int]):
    """Run the decoder stack; returns (raw logits at frame resolution, cache)."""
    h, w = frame_shape
    k1, k2, k3, k4 = kernels
    u1 = _cropped(bilinear_upsample(feat, 2), low8.height, low8.width)
    c1 = concat_channels(u1, low8)
    a1 = conv2d(c1, k1)
    r1 = relu(a1)
    u2 = _cropped(bilinear_upsample(r1, 2), low4.height, low4.width)
    c2 = concat_channels(u2, low4)
    a2 = conv2d(c2, k2)
    r2 = relu(a2)
    a3 = conv2d(r2, k3)
    r3 = relu(a3)
    a4 = conv2d(r3, k4)
    logits = _cropped(bilinear_upsample(a4, FINAL_UPSAMPLE), h, w)
    cache = {"c1": c1, "a1": a1, "r1": r1, "c2": c2, "a2": a2, "r2": r2,
             "a3": a3, "r3": r3, "a4": a4}
    return logits, cache


def _decode_backward(grad_logits: Tensor3, kernels, cache) -> list[ConvKernel]:
    """Kernel gradients of a scalar objective, given its gradient at the logits."""
    k1, k2, k3, k4 = kernels
    a4, r3, a3, r2, a2, c2 = (cache[k] for k in ("a4", "r3", "a3", "r2", "a2", "c2"))
    r1, a1, c1 = cache["r1"], cache["a1"], cache["c1"]

    g = _pad_to(grad_logits, a4.height * FINAL_UPSAMPLE, a4.width * FINAL_UPSAMPLE)
    g = bilinear_upsample_backward(g, a4.height, a4.width, FINAL_UPSAMPLE)
    g, gk4 = conv2d_backward(r3, k4, g)
    g = relu_backward(a3, g)
    g, gk3 = conv2d_backward(r2, k3, g)
    g = relu_backward(a2, g)
    g, gk2 = conv2d_backward(c2, k2, g)
    d = r1.channels
    g = Tensor3(g.data[:d])  # the low-level branch holds no parameters
    g = _pad_to(g, r1.height * 2, r1.width * 2)
    g = bilinear_upsample_backward(g, r1.height, r1.width, 2)
    g = relu_backward(a1, g)
    _, gk1 = conv2d_backward(c1, k1, g)
    return [gk1, gk2, gk3, gk4]


def salient_forward(feat: Tensor3, low8: Tensor3, low4: Tensor3, params: HeadParams,
                    frame_shape: tuple[int, int]) -> Tensor3:
    """Foreground probability map at frame resolution."""
    logits, _ = _decode_forward(feat, low8, low4, params.sal, frame_shape)
    return Tensor3(expit(logits.data))


def instance_forward(feat: Tensor3, low8: Tensor3, low4: Tensor3, params: HeadParams,
                     frame_shape: tuple[int, int]) -> tuple[CenterHeatmap, OffsetField]:
    """Center heatmap (logistic) and raw offset field, both at frame resolution.

    Offsets are predicted on the stride-4 grid, so their values are scaled
    by the final upsample factor to express frame-resolution pixels.
    """
    logits, _ = _decode_forward(feat, low8, low4, params.ins, frame_shape)
    heatmap = Tensor3(expit(logits.data[:1]))
    offsets = Tensor3(logits.data[1:3] * FINAL_UPSAMPLE)
    return heatmap, offsets


def encode_center_targets(gt: InstanceMask, sigma: float = 10.0) -> CenterHeatmap:
    """Gaussian bumps of scale sigma at instance centroids, max-composed."""
    h, w = gt.shape
    target = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for k in gt.ids():
        ys, xs = np.nonzero(gt.binary(k))
        cy, cx = ys.mean(), xs.mean()
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        np.maximum(target, np.exp(-d2 / (2.0 * sigma * sigma)), out=target)
    return Tensor3(target[None])


def encode_offset_targets(gt: InstanceMask) -> tuple[OffsetField, np.ndarray]:
    """Per-pixel (dy, dx) to the owning instance centroid, plus validity mask."""
    h, w = gt.shape
    target = np.zeros((2, h, w))
    valid = np.zeros((h, w), dtype=bool)
    for k in gt.ids():
        m = gt.binary(k)
        ys, xs = np.nonzero(m)
        target[0][m] = ys.mean() - ys
        target[1][m] = xs.mean() - xs
        valid |= m
    return Tensor3(target), valid


def _check_prob_map(pred: Tensor3):
    if pred.data.min() < 0.0 or pred.data.max() > 1.0:
        raise ContractError("probability map values must lie in [0,1]")


def loss_salient(pred: Tensor3, gt_foreground: np.ndarray) -> float:
    """Mean binary cross-entropy between a probability map and a binary target."""
    _check_prob_map(pred)
    y = np.asarray(gt_foreground, dtype=np.float64)
    if y.shape != (pred.height, pred.width):
        raise ContractError(f"target shape {y.shape} does not match map {pred.shape}")
    p = np.clip(pred.data[0], 1e-7, 1.0 - 1e-7)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss_center(pred: CenterHeatmap, target: CenterHeatmap) -> float:
    """Mean squared error over the heatmap."""
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    return float(np.mean(diff * diff))


def loss_offset(pred: OffsetField, target: OffsetField, valid: np.ndarray) -> float:
    """Mean absolute offset error over valid (foreground) pixels; 0 if none."""
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        return 0.0
    diff = np.abs(pred.data - target.data)[:, valid]
    return float(diff.sum() / (2 * n_valid))


def detect_centers(heatmap: CenterHeatmap, nms_window: int = 7, threshold: float = 0.1,
                   top_k: int = 50) -> list[tuple[int, int, float]]:
    """Local maxima of the heatmap as (y, x, score), best first.

    A pixel is a center iff it equals the maximum over its window, with
    value ties inside the window broken toward the lexicographically
    smallest coordinate, and its score exceeds the threshold.
    """
    hm = heatmap.data[0]
    if hm.min() < 0.0 or hm.max() > 1.0:
        raise ContractError("heatmap values must lie in [0,1]")
    window_max = max_pool2d(heatmap, nms_window).data[0]
    candidates = np.argwhere((hm >= window_max) & (hm > threshold))
    r = (nms_window - 1) // 2
    h, w = hm.shape
    peaks = []
    for y, x in candidates:
        win = hm[max(y - r, 0):y + r + 1, max(x - r, 0):x + r + 1]
        ties = np.argwhere(win == hm[y, x])
        ties[:, 0] += max(y - r, 0)
        ties[:, 1] += max(x - r, 0)
        first = min(map(tuple, ties))
        if first == (y, x):
            peaks.append((int(y), int(x), float(hm[y, x])))
    peaks.sort(key=lambda p: (-p[2], p[0], p[1]))
    return peaks[:top_k]


def group_instances(foreground: np.ndarray, offsets: OffsetField,
                    centers: list[tuple[int, int, float]]) -> tuple[InstanceMask, list[Proposal]]:
    """Assign each foreground pixel to its nearest offset-corrected center.

    Pixel p goes to argmin_k ||(p + offset(p)) - c_k||; ties take the
    smallest center index. With no centers all foreground is dropped.
    """
    fg = np.asarray(foreground, dtype=bool)
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if not centers or not fg.any():
        return InstanceMask(labels), []
    ys, xs = np.nonzero(fg)
    sy = ys + offsets.data[0, ys, xs]
    sx = xs + offsets.data[1, ys, xs]
    cy = np.array([c[0] for c in centers], dtype=np.float64)
    cx = np.array([c[1] for c in centers], dtype=np.float64)
    d2 = (sy[:, None] - cy) ** 2 + (sx[:, None] - cx) ** 2
    assign = np.argmin(d2, axis=1)  # first minimum, i.e. smallest center index
    labels[ys, xs] = assign + 1
    proposals = []
    for k, (y, x, score) in enumerate(centers):
        m = labels == k + 1
        if m.any():
            proposals.append(Proposal(mask=m, center=(float(y), float(x)), score=score))
    return InstanceMask(labels), proposals


# ---------------------------------------------------------------------------
# training


@dataclass
class HeadSample:
    """One training example: guided features, skip features, and labels."""

    sal_feat: Tensor3
    ins_feat: Tensor3
    low8: Tensor3
    low4: Tensor3
    gt: InstanceMask


def _sample_losses_and_grads(sample: HeadSample, params: HeadParams, targets):
    """Per-head losses of one sample plus kernel gradients for both decoders.

    Returns (salient loss, instance loss, salient grads, instance grads);
    the instance loss is the center MSE plus the offset L1.
    """
    fg, center_t, offset_t, valid = targets
    h, w = sample.gt.shape
    n = h * w

    sal_logits, sal_cache = _decode_forward(
        sample.sal_feat, sample.low8, sample.low4, params.sal, (h, w))
    p_sal = expit(sal_logits.data)
    l_sal = loss_salient(Tensor3(p_sal), fg)
    g_sal = Tensor3((p_sal - fg[None]) / n)

    ins_logits, ins_cache = _decode_forward(
        sample.ins_feat, sample.low8, sample.low4, params.ins, (h, w))
    p_heat = expit(ins_logits.data[:1])
    pred_off = ins_logits.data[1:3] * FINAL_UPSAMPLE
    l_center = loss_center(Tensor3(p_heat), center_t)
    l_offset = loss_offset(Tensor3(pred_off), offset_t, valid)

    g_ins = np.zeros_like(ins_logits.data)
    g_ins[0] = 2.0 * (p_heat[0] - center_t.data[0]) * p_heat[0] * (1.0 - p_heat[0]) / n
    n_valid = int(np.count_nonzero(valid))
    if n_valid:
        sign = np.sign(pred_off - offset_t.data) * valid
        g_ins[1:3] = sign * FINAL_UPSAMPLE / (2 * n_valid)

    sal_grads = _decode_backward(g_sal, params.sal, sal_cache)
    ins_grads = _decode_backward(Tensor3(g_ins), params.ins, ins_cache)
    return l_sal, l_center + l_offset, sal_grads, ins_grads


def _sal_loss(sample: HeadSample, params: HeadParams, targets) -> float:
    fg = targets[0]
    h, w = sample.gt.shape
    logits, _ = _decode_forward(
        sample.sal_feat, sample.low8, sample.low4, params.sal, (h, w))
    return loss_salient(Tensor3(expit(logits.data)), fg)


def _ins_loss(sample: HeadSample, params: HeadParams, targets) -> float:
    _, center_t, offset_t, valid = targets
    h, w = sample.gt.shape
    logits, _ = _decode_forward(
        sample.ins_feat, sample.low8, sample.low4, params.ins, (h, w))
    l_center = loss_center(Tensor3(expit(logits.data[:1])), center_t)
    l_offset = loss_offset(
        Tensor3(logits.data[1:3] * FINAL_UPSAMPLE), offset_t, valid)
    return l_center + l_offset


def _sample_loss(sample: HeadSample, params: HeadParams, targets) -> float:
    """Forward-only total loss of one sample."""
    return _sal_loss(sample, params, targets) + _ins_loss(sample, params, targets)


_POLY_DECAY_POWER = 0.9  # learning rate follows lr0 * (1 - t/T)^0.9
_MAX_BACKTRACKS = 16
_SMOOTH_WINDOW = 5


class _HeadState:
    """Optimizer state for one decoder.

    The two heads share no parameters, so the total loss separates and each
    decoder gets its own velocity, loss history and line search. Kernel
    arrays are only ever rebound (never written in place), so snapshots can
    hold plain references.
    """

    __slots__ = ("kernels", "loss", "velocity", "current", "history",
                 "best", "best_params", "moving")

    def __init__(self, kernels, loss):
        self.kernels = kernels
        self.loss = loss
        self.velocity = [(np.zeros_like(k.weights), np.zeros_like(k.bias))
                         for k in kernels]
        self.current = loss()
        self.history: list[float] = []
        self.best = self.current
        self.best_params = [(k.weights, k.bias) for k in kernels]
        self.moving = False

    def snapshot(self):
        return [(k.weights, k.bias) for k in self.kernels]

    def restore(self, saved):
        for k, (w, b) in zip(self.kernels, saved):
            k.weights, k.bias = w, b

    def displace(self, deltas, scale=1.0):
        saved = self.snapshot()
        for k, (dw, db) in zip(self.kernels, deltas):
            k.weights = k.weights + scale * dw
            k.bias = k.bias + scale * db
        return saved

    def record(self):
        self.history.append(self.current)
        if self.current < self.best:
            self.best = self.current
            self.best_params = self.snapshot()

    def bound(self) -> float:
        # Largest acceptable loss for the upcoming step: the raw loss
        # _SMOOTH_WINDOW epochs back. Keeping every step at or below it
        # makes the window-5 moving average of the trace non-increasing.
        if len(self.history) < _SMOOTH_WINDOW:
            return math.inf
        return self.history[len(self.history) - _SMOOTH_WINDOW]

    def zero_velocity(self):
        self.velocity = [(np.zeros_like(vw), np.zeros_like(vb))
                         for vw, vb in self.velocity]
        self.moving = False


def _advance(state: _HeadState, grads, lr: float, momentum: float) -> None:
    """One optimizer step on one decoder.

    Tries the momentum update first and accepts it as long as the loss
    stays at or below the smoothing bound — the offset L1 term is
    non-smooth and momentum needs a few epochs of slack to carry through
    its kinks. Otherwise falls back to a backtracking plain-gradient step,
    and as a last resort reverts to the best parameters seen so far (which
    always satisfy the bound).
    """
    bound = state.bound()
    proposal = [(momentum * vw - lr * gw, momentum * vb - lr * gb)
                for (vw, vb), (gw, gb) in zip(state.velocity, grads)]
    saved = state.displace(proposal)
    candidate = state.loss()
    if candidate <= bound:
        state.velocity = proposal
        state.current = candidate
        state.moving = True
        return
    state.restore(saved)

    target = min(bound, state.current)
    s = lr
    for _ in range(_MAX_BACKTRACKS):
        state.displace(grads, scale=-s)
        candidate = state.loss()
        if candidate <= target:
            state.velocity = [(-s * gw, -s * gb) for gw, gb in grads]
            state.current = candidate
            state.moving = True
            return
        state.restore(saved)
        s *= 0.5

    if state.current <= bound:  # hold still; the trace may stay flat
        state.zero_velocity()
        return
    # Stranded above the bound after an accepted uphill wiggle: rewind.
    state.restore(state.best_params)
    state.current = state.best
    state.zero_velocity()


def train_heads(dataset: list[HeadSample], config: PipelineConfig,
                seed: int | None = None) -> tuple[HeadParams, list[float]]:
    """Fit both decoders by full-batch gradient descent with momentum 0.9.

    Each decoder is stepped separately (their parameters are disjoint and
    the loss separates, and the offset subgradients are orders of magnitude
    steeper than the salient BCE ones, so a shared line search starves the
    salient head). Gradients are taken at the momentum lookahead point and
    the learning rate follows a polynomial decay. Momentum steps may raise
    the loss for a few epochs but never above the level five epochs back,
    which keeps the smoothed trace non-increasing. Returns the fitted
    parameters and the per-epoch loss trace.
    """
    if not dataset:
        raise ContractError("training requires a nonempty dataset")
    params = HeadParams.seeded(config, seed)
    targets = [
        (s.gt.foreground().astype(np.float64),
         encode_center_targets(s.gt, config.sigma),
         *encode_offset_targets(s.gt))
        for s in dataset
    ]
    n = len(dataset)

    def sal_loss() -> float:
        return sum(_sal_loss(s, params, t) for s, t in zip(dataset, targets)) / n

    def ins_loss() -> float:
        return sum(_ins_loss(s, params, t) for s, t in zip(dataset, targets)) / n

    def mean_grads(which: int):
        acc = None
        for s, t in zip(dataset, targets):
            out = _sample_losses_and_grads(s, params, t)
            grads = out[2 + which]
            if acc is None:
                acc = [(g.weights / n, g.bias / n) for g in grads]
            else:
                acc = [(aw + g.weights / n, ab + g.bias / n)
                       for (aw, ab), g in zip(acc, grads)]
        return acc

    states = (
        _HeadState(list(params.sal), sal_loss),
        _HeadState(list(params.ins), ins_loss),
    )
    for step in range(config.train_steps):
        lr = config.learning_rate * (1.0 - step / config.train_steps) ** _POLY_DECAY_POWER
        for which, state in enumerate(states):
            if not np.isfinite(state.current):
                raise NumericalError(
                    f"training diverged at step {step}: loss={state.current}")
            state.record()
            if state.moving:
                saved = state.displace(
                    [(config.momentum * vw, config.momentum * vb)
                     for vw, vb in state.velocity])
                grads = mean_grads(which)
                state.restore(saved)
            else:
                grads = mean_grads(which)
            _advance(state, grads, lr, config.momentum)
    trace = [a + b for a, b in zip(states[0].history, states[1].history)]
    return params, trace
