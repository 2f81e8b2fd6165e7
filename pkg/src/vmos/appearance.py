"""Per-target appearance model, fit online by Gauss-Newton.

Each tracked object owns a tiny two-layer convolutional score predictor: a
1x1 conv squeezing the feature channels down to a 96-channel bottleneck,
followed by a single 3x3 conv producing a one-channel score map. There is
no activation between the layers by default, so the model is a factorized
bilinear form in its two weight tensors.

Fitting minimizes a weighted least-squares objective over the sample bank
plus squared-Frobenius penalties on both weight tensors. The solver
linearizes the residuals jointly in (W1, W2), solves the damped normal
equations by conjugate gradient, and applies the step with halving until
the objective does not increase, so the per-fit objective trace never
goes up.

The normal-equation matrix is never formed: the Jacobian and its
transpose act on vectors through batched matrix products and nine-shift
convolutions over the whole sample bank at once, which keeps an online
update (two outer iterations) well inside a desktop per-frame budget.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import PipelineConfig
from .errors import ContractError, NumericalError
from .tensor import ConvKernel, Tensor3, conv2d, relu

#: Every Gauss-Newton fit appends its objective trace here so a test run
#: can assert, globally, that no fit ever increased the objective.
fit_trace_log: list[tuple[float, ...]] = []

_INIT_TAG = 0xA9_0DE1


@dataclass
class AppearanceModel:
    """Factorized score predictor: 1x1 channel squeeze then 3x3 readout."""

    w1: ConvKernel
    w2: ConvKernel
    lambda1: float = 1e-2
    lambda2: float = 1e-2
    relu_between: bool = False

    def __post_init__(self):
        if self.w1.weights.shape[2:] != (1, 1):
            raise ContractError("w1 must be a 1x1 kernel")
        if self.w2.weights.shape[0] != 1 or self.w2.weights.shape[2:] != (3, 3):
            raise ContractError("w2 must be a single-output 3x3 kernel")
        if self.w1.weights.shape[0] != self.w2.weights.shape[1]:
            raise ContractError("w1 output channels must feed w2 input channels")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("regularization weights must be nonnegative")
        for arr in (self.w1.weights, self.w2.weights):
            if not np.all(np.isfinite(arr)):
                raise ContractError("model weights must be finite")

    @property
    def in_channels(self) -> int:
        return self.w1.weights.shape[1]


@dataclass
class TrainSample:
    """One bank entry: features, soft target map, and its sample weight."""

    x: Tensor3
    y: np.ndarray
    alpha: float

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.y.ndim != 2:
            raise ContractError("target map must be 2-D")
        if self.y.shape != (self.x.height, self.x.width):
            raise ContractError("target map must match the feature grid")
        if self.alpha < 0:
            raise ContractError("sample weight must be nonnegative")


def predict(model: AppearanceModel, x: Tensor3) -> Tensor3:
    """Score map S = W2 * (W1 * X); same spatial size, one channel."""
    if x.channels != model.in_channels:
        raise ContractError(
            f"expected {model.in_channels} feature channels, got {x.channels}")
    z = conv2d(x, model.w1)
    if model.relu_between:
        z = relu(z)
    return conv2d(z, model.w2)


def objective(model: AppearanceModel, bank: list[TrainSample]) -> float:
    """Weighted sum of squared residuals plus Frobenius penalties."""
    if not bank:
        raise ContractError("objective requires a nonempty bank")
    total = 0.0
    for sample in bank:
        s = predict(model, sample.x)
        total += sample.alpha * float(np.sum((s.data[0] - sample.y) ** 2))
    total += model.lambda1 * float(np.sum(model.w1.weights ** 2))
    total += model.lambda2 * float(np.sum(model.w2.weights ** 2))
    return total


# ---------------------------------------------------------------------------
# Gauss-Newton solver
#
# Without the optional inter-layer ReLU the predictor is bilinear, and the
# composed map S = W2 * (W1 * X) equals a single C-input 3x3 convolution
# with the rank-constrained kernel K = W1^T W2 (as (C,9) matrices). All
# heavy lifting then happens against one im2col of the bank, built once
# per fit: scores are Xcols @ vec(K), the Jacobian action is
# Xcols @ vec(A^T W2 + W1^T B), and its transpose needs only the (C,9)
# matrix G = Xcols^T p. With the ReLU enabled the factorization breaks and
# a windowed fallback path does the same algebra per hidden channel.


def _stack_bank(bank: list[TrainSample]):
    """Batch the bank into dense arrays (all maps share one grid shape)."""
    shape = (bank[0].x.channels, bank[0].x.height, bank[0].x.width)
    for sample in bank:
        if sample.x.shape != shape:
            raise ContractError("bank samples must share one feature shape")
    xmat = np.stack([s.x.data.reshape(shape[0], -1) for s in bank])
    y = np.stack([s.y.reshape(-1) for s in bank])
    sqrt_a = np.sqrt(np.array([s.alpha for s in bank]))
    return xmat, y, sqrt_a, shape[1:]


def _windows(maps: np.ndarray) -> np.ndarray:
    """A (..., h, w, 3, 3) sliding view of zero-padded maps (no copy)."""
    pad = [(0, 0)] * (maps.ndim - 2) + [(1, 1), (1, 1)]
    return np.lib.stride_tricks.sliding_window_view(
        np.pad(maps, pad), (3, 3), axis=(-2, -1))


def _im2col(xmat: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """im2col of the stacked bank: (N*h*w, C*9), columns indexed (c, k)."""
    n, c, _ = xmat.shape
    h, w = hw
    win = _windows(xmat.reshape(n, c, h, w))          # (N, C, h, w, 3, 3)
    cols = win.transpose(0, 2, 3, 1, 4, 5)            # (N, h, w, C, 3, 3)
    return np.ascontiguousarray(cols).reshape(n * h * w, c * 9)


class _BilinearEngine:
    """Score/Jacobian products for the activation-free factorized model."""

    def __init__(self, xmat, hw):
        self.xcols = _im2col(xmat, hw)
        self.n_samples = xmat.shape[0]

    def scores(self, w1m, w2m):
        k = w1m.T @ w2m
        return (self.xcols @ k.ravel()).reshape(self.n_samples, -1)

    def j_dot(self, w1m, w2m, a, b):
        k = w1m.T @ b
        if a is not None:
            k = k + a.T @ w2m
        return (self.xcols @ k.ravel()).reshape(self.n_samples, -1)

    def g_matrix(self, p):
        cin9 = self.xcols.shape[1]
        return (self.xcols.T @ p.ravel()).reshape(cin9 // 9, 9)

    @staticmethod
    def jt_from_g(w1m, w2m, g, freeze_w1):
        gb = w1m @ g
        if freeze_w1:
            return gb.reshape(-1)
        ga = w2m @ g.T
        return np.concatenate([ga.reshape(-1), gb.reshape(-1)])


class _ReluEngine:
    """Windowed fallback for the optional inter-layer ReLU.

    The hidden activation gates the W1 block of the Jacobian, so the
    composed-kernel shortcut does not apply; products are taken against
    sliding views of the hidden maps instead.
    """

    def __init__(self, xmat, hw):
        self.xmat = xmat
        self.hw = hw
        self.n_samples = xmat.shape[0]
        self.z = None
        self.mask = None
        self.zwin = None

    def _hidden(self, w1m):
        h, w = self.hw
        z = np.einsum("mc,Ncn->Nmn", w1m, self.xmat)
        return np.maximum(z, 0.0).reshape(self.n_samples, w1m.shape[0], h, w)

    def refresh(self, w1m):
        self.z = self._hidden(w1m)
        self.mask = self.z > 0.0
        self.zwin = _windows(self.z)                   # (N, m, h, w, 3, 3)

    def scores(self, w1m, w2m):
        zwin = _windows(self._hidden(w1m))
        s = np.einsum("muv,Nmhwuv->Nhw", w2m.reshape(-1, 3, 3), zwin)
        return s.reshape(self.n_samples, -1)

    def j_dot(self, w1m, w2m, a, b):
        out = np.einsum("muv,Nmhwuv->Nhw", b.reshape(-1, 3, 3), self.zwin)
        if a is not None:
            h, w = self.hw
            dz = np.einsum("mc,Ncn->Nmn", a, self.xmat)
            dz = (dz.reshape(self.z.shape) * self.mask)
            out = out + np.einsum(
                "muv,Nmhwuv->Nhw", w2m.reshape(-1, 3, 3), _windows(dz))
        return out.reshape(self.n_samples, -1)

    def jt_dot(self, w1m, w2m, p, freeze_w1):
        h, w = self.hw
        pw = p.reshape(self.n_samples, h, w)
        gb = np.einsum("Nhw,Nmhwuv->muv", pw, self.zwin).reshape(-1, 9)
        if freeze_w1:
            return gb.reshape(-1)
        pwin = _windows(pw)                            # (N, h, w, 3, 3)
        flip = w2m.reshape(-1, 3, 3)[:, ::-1, ::-1]
        q = np.einsum("muv,Nhwuv->Nmhw", flip, pwin) * self.mask
        ga = np.einsum("Nmn,Ncn->mc",
                       q.reshape(self.n_samples, q.shape[1], -1), self.xmat)
        return np.concatenate([ga.reshape(-1), gb.reshape(-1)])


def gauss_newton_fit(model: AppearanceModel, bank: list[TrainSample],
                     iters_outer: int, iters_cg: int, *,
                     damping: float = 1e-4,
                     freeze_w1: bool = False) -> tuple[AppearanceModel, list[float]]:
    """Fit the model to the bank; returns (fitted model, objective trace).

    Residuals are linearized jointly in both weight tensors; the damped
    normal equations are solved by conjugate gradient from a zero start,
    and each step is halved (up to eight times) until the objective does
    not increase. The trace therefore never increases. With ``freeze_w1``
    only W2 is optimized, which makes the problem an exact linear
    least-squares — used to validate the solver against the closed-form
    ridge solution.
    """
    if not bank:
        raise ContractError("fitting requires a nonempty bank")
    if iters_outer < 1:
        raise ContractError("iters_outer must be at least 1")
    xmat, y, sqrt_a, hw = _stack_bank(bank)
    mid = model.w1.weights.shape[0]
    cin = model.in_channels

    w1m = model.w1.weights.reshape(mid, cin).copy()
    w2m = model.w2.weights.reshape(mid, 9).copy()
    lam1, lam2 = model.lambda1, model.lambda2
    use_relu = model.relu_between
    engine = _ReluEngine(xmat, hw) if use_relu else _BilinearEngine(xmat, hw)

    n1 = 0 if freeze_w1 else mid * cin

    def split(delta):
        a = None if freeze_w1 else delta[:n1].reshape(mid, cin)
        b = delta[n1:].reshape(mid, 9)
        return a, b

    def full_objective(w1_try, w2_try):
        resid = sqrt_a[:, None] * (engine.scores(w1_try, w2_try) - y)
        return float(np.sum(resid ** 2)
                     + lam1 * np.sum(w1_try ** 2) + lam2 * np.sum(w2_try ** 2))

    current = full_objective(w1m, w2m)
    if not np.isfinite(current):
        raise NumericalError(f"appearance objective is not finite: {current}")
    trace = [current]

    for _ in range(iters_outer):
        if use_relu:
            engine.refresh(w1m)
        resid = sqrt_a[:, None] * (engine.scores(w1m, w2m) - y)

        if use_relu:
            def j_dot(delta):
                a, b = split(delta)
                return sqrt_a[:, None] * engine.j_dot(w1m, w2m, a, b)

            def jt_dot(p):
                return engine.jt_dot(w1m, w2m, sqrt_a[:, None] * p, freeze_w1)
        else:
            def j_dot(delta):
                a, b = split(delta)
                return sqrt_a[:, None] * engine.j_dot(w1m, w2m, a, b)

            def jt_dot(p):
                g = engine.g_matrix(sqrt_a[:, None] * p)
                return engine.jt_from_g(w1m, w2m, g, freeze_w1)

        def normal_dot(delta):
            out = jt_dot(j_dot(delta)) + damping * delta
            a, b = split(delta)
            if a is not None:
                out[:n1] += lam1 * a.reshape(-1)
            out[n1:] += lam2 * b.reshape(-1)
            return out

        rhs = -jt_dot(resid)
        if not freeze_w1:
            rhs[:n1] -= lam1 * w1m.reshape(-1)
        rhs[n1:] -= lam2 * w2m.reshape(-1)

        delta = _conjugate_gradient(normal_dot, rhs, iters_cg)

        da, db = split(delta)
        step = 1.0
        accepted = False
        for _ in range(9):  # full step plus up to eight halvings
            w1_try = w1m if da is None else w1m + step * da
            w2_try = w2m + step * db
            candidate = full_objective(w1_try, w2_try)
            if not np.isfinite(candidate):
                raise NumericalError(
                    f"appearance objective is not finite: {candidate}")
            if candidate <= current:
                w1m, w2m = w1_try, w2_try
                current = candidate
                accepted = True
                break
            step *= 0.5
        trace.append(current)
        if not accepted:
            break  # relinearizing at the same point would repeat the rejection

    fitted = AppearanceModel(
        w1=ConvKernel(w1m.reshape(mid, cin, 1, 1)),
        w2=ConvKernel(w2m.reshape(1, mid, 3, 3)),
        lambda1=lam1, lambda2=lam2, relu_between=use_relu)
    fit_trace_log.append(tuple(trace))
    return fitted, trace


def _conjugate_gradient(apply_a, b, iters: int) -> np.ndarray:
    """Standard CG on a positive-definite operator, zero initial guess."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    if rs == 0.0:
        return x
    for _ in range(iters):
        ap = apply_a(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            break
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_next = float(r @ r)
        if rs_next <= 1e-30:
            break
        p = r + (rs_next / rs) * p
        rs = rs_next
    return x


# ---------------------------------------------------------------------------
# per-target initialization


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Area-averaged soft target at the score-map grid (ceil division)."""
    from .features import _block_reduce  # shared block-mean helper

    return _block_reduce(np.ascontiguousarray(mask, dtype=np.float64), stride)


def init_model(pseudo_gt: np.ndarray, x0: Tensor3, config: PipelineConfig,
               seed: int | None = None) -> tuple[AppearanceModel, list[TrainSample]]:
    """Build and fit a fresh model from the first pseudo ground-truth mask.

    The proposal mask is area-averaged down to the score grid and becomes
    the first (and initially only) bank sample. Both weight tensors start
    from small seeded noise — a zero tensor would zero the other factor's
    Jacobian and stall the joint fit.
    """
    pseudo_gt = np.asarray(pseudo_gt, dtype=bool)
    if not pseudo_gt.any():
        raise ContractError("cannot initialize a model from an empty mask")
    target = downsample_mask(pseudo_gt, config.stride)
    if target.shape != (x0.height, x0.width):
        raise ContractError(
            f"mask grid {target.shape} does not match features "
            f"{(x0.height, x0.width)}")
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, _INIT_TAG)))
    mid = config.model_channels
    cin = x0.channels
    w1 = rng.normal(scale=1.0 / np.sqrt(cin), size=(mid, cin, 1, 1))
    w2 = rng.normal(scale=0.01, size=(1, mid, 3, 3))
    model = AppearanceModel(
        w1=ConvKernel(w1), w2=ConvKernel(w2),
        lambda1=config.lambda1, lambda2=config.lambda2,
        relu_between=config.relu_between)
    bank = [TrainSample(x=x0, y=target, alpha=1.0)]
    fitted, _ = gauss_newton_fit(
        model, bank, config.gn_iters_init, config.gn_iters_cg,
        damping=config.damping)
    return fitted, bank
