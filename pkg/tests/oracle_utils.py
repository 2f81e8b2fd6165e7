"""Shared oracles used by both module tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from vmos.appearance import (
    AppearanceModel,
    TrainSample,
    _windows,
    gauss_newton_fit,
)
from vmos.tensor import ConvKernel, Tensor3


def ridge_fit_error(seed: int, iters_outer: int = 10, iters_cg: int = 50):
    """Fit W2 with W1 frozen; compare to the closed-form ridge solution.

    Returns (relative error of the fitted W2, objective trace). The frozen
    problem is an exact linear least-squares, so the normal equations can
    be solved directly for the oracle.
    """
    rng = np.random.default_rng(seed)
    mid, cin, h, w, n_samples = 8, 4, 6, 6, 3
    lam2 = 1.0
    w1 = rng.normal(scale=0.5, size=(mid, cin, 1, 1))
    w2 = rng.normal(scale=0.1, size=(1, mid, 3, 3))
    model = AppearanceModel(ConvKernel(w1), ConvKernel(w2),
                            lambda1=0.5, lambda2=lam2)
    bank = [
        TrainSample(Tensor3(rng.normal(size=(cin, h, w))),
                    rng.random((h, w)), float(rng.random() + 0.5))
        for _ in range(n_samples)
    ]
    fitted, trace = gauss_newton_fit(
        model, bank, iters_outer, iters_cg, freeze_w1=True)

    rows, targets = [], []
    for sample in bank:
        z = np.einsum("mc,chw->mhw", w1.reshape(mid, cin), sample.x.data)
        zw = _windows(z).reshape(mid, h * w, 9)
        weight = np.sqrt(sample.alpha)
        rows.append(weight * zw.transpose(1, 0, 2).reshape(h * w, mid * 9))
        targets.append(weight * sample.y.reshape(-1))
    design = np.vstack(rows)
    target = np.concatenate(targets)
    w_star = np.linalg.solve(design.T @ design + lam2 * np.eye(mid * 9),
                             design.T @ target)
    got = fitted.w2.weights.reshape(-1)
    rel = float(np.linalg.norm(got - w_star) / np.linalg.norm(w_star))
    return rel, trace
