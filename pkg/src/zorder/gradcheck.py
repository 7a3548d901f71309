"""Finite-difference verification of the hand-written and autograd backward passes.

Central differences carry absolute noise around ``max(h^2 * f''', |f| * eps / h)``,
so a raw relative error is meaningless for gradient entries near zero. Errors
here are measured against ``max(|analytic|, |numeric|, floor)`` with a floor
proportional to the gradient's own scale; full-vector directional derivatives
(whose magnitude is the gradient norm) complement the per-coordinate checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from . import compositor as comp
from .alignment import MaskPredictor, alignment_loss, similarity_map
from .grid import TokenGrid, rasterize_box, tokens_in_box
from .layout import BoundingBox

__all__ = [
    "relative_errors",
    "numeric_gradient",
    "check_compositor_gradients",
    "check_alignment_gradients",
]

FD_STEP = 1e-5


def relative_errors(
    analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None
) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    Central differences at step 1e-5 carry absolute noise around 1e-9 in
    double precision, so entries far below the gradient's scale cannot be
    held to a relative tolerance; the floor (default 1e-3 of the scale)
    compares them against the scale instead.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if floor is None:
        floor = 1e-3 * max(1.0, float(np.max(np.abs(analytic), initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP
) -> np.ndarray:
    """Per-coordinate central differences of a scalar function."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return grad


def _random_compositor_case(rng: np.random.Generator):
    grid = TokenGrid(int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    n = int(rng.integers(1, 5))
    dim = int(rng.integers(1, 5))
    layers, densities = [], []
    occluders: dict[int, list[int]] = {}
    for i in range(n):
        x0 = float(rng.uniform(0.0, 0.6))
        y0 = float(rng.uniform(0.0, 0.6))
        box = BoundingBox(x0, y0, min(x0 + float(rng.uniform(0.2, 1.0)), 1.0), min(y0 + float(rng.uniform(0.2, 1.0)), 1.0))
        omega = tokens_in_box(box, grid)
        feats = np.zeros((grid.length, dim))
        feats[omega] = rng.normal(size=(omega.size, dim))
        layers.append(comp.InstanceFeatureLayer(i, feats, omega, rasterize_box(box, grid)))
        densities.append(rng.uniform(0.05, 2.0, size=dim))
        occluders[i] = [j for j in range(i) if rng.random() < 0.5]
    upstream = rng.normal(size=(grid.length, dim))
    return layers, densities, occluders, upstream


def check_compositor_gradients(
    seeds: Sequence[int], step: float = FD_STEP, coord_samples: int = 40
) -> float:
    """Max relative error of the analytic compositor gradients vs central
    finite differences over random scenes; float64 throughout."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        layers, densities, occluders, upstream = _random_compositor_case(rng)

        def loss(layer_feats: list[np.ndarray], dens: list[np.ndarray]) -> float:
            rebuilt = [
                comp.InstanceFeatureLayer(l.instance_id, f, l.omega, l.box_mask)
                for l, f in zip(layers, layer_feats)
            ]
            return float((comp.composite_forward(rebuilt, dens, occluders) * upstream).sum())

        feat_grads, dens_grads = comp.composite_grad(layers, densities, occluders, upstream)
        scale = max(
            1.0,
            max(float(np.max(np.abs(g), initial=0.0)) for g in feat_grads),
            float(np.max(np.abs(dens_grads), initial=0.0)),
        )
        floor = 1e-3 * scale

        # Every density coordinate.
        base_feats = [l.features for l in layers]
        for i, dens in enumerate(densities):
            numeric = np.zeros_like(dens)
            for d in range(dens.size):
                perturbed = [x.copy() for x in densities]
                perturbed[i][d] += step
                hi = loss(base_feats, perturbed)
                perturbed[i][d] -= 2 * step
                lo = loss(base_feats, perturbed)
                numeric[d] = (hi - lo) / (2 * step)
            worst = max(worst, float(relative_errors(dens_grads[i], numeric, floor).max()))

        # Sampled feature coordinates (covered tokens only).
        candidates = [i for i, l in enumerate(layers) if l.omega.size]
        for _ in range(coord_samples):
            i = int(rng.choice(candidates))
            u = int(rng.choice(layers[i].omega))
            d = int(rng.integers(upstream.shape[1]))
            perturbed = [f.copy() for f in base_feats]
            perturbed[i][u, d] += step
            hi = loss(perturbed, densities)
            perturbed[i][u, d] -= 2 * step
            lo = loss(perturbed, densities)
            numeric = (hi - lo) / (2 * step)
            worst = max(worst, float(relative_errors(feat_grads[i][u, d], numeric, floor).max()))

        # Directional derivative across all features and densities at once.
        dir_feats = [rng.normal(size=f.shape) * (f != 0) for f in base_feats]
        dir_dens = [rng.normal(size=d.shape) for d in densities]
        analytic_dir = sum(float((g * v).sum()) for g, v in zip(feat_grads, dir_feats)) + sum(
            float((g * v).sum()) for g, v in zip(dens_grads, dir_dens)
        )
        hi = loss(
            [f + step * v for f, v in zip(base_feats, dir_feats)],
            [np.clip(d + step * v, 0.0, None) for d, v in zip(densities, dir_dens)],
        )
        lo = loss(
            [f - step * v for f, v in zip(base_feats, dir_feats)],
            [np.clip(d - step * v, 0.0, None) for d, v in zip(densities, dir_dens)],
        )
        numeric_dir = (hi - lo) / (2 * step)
        worst = max(worst, float(relative_errors(np.array(analytic_dir), np.array(numeric_dir), floor).max()))
    return worst


def check_alignment_gradients(
    seeds: Sequence[int], step: float = FD_STEP, coord_samples: int = 150
) -> float:
    """Max relative error of the alignment-head gradients (similarity map,
    mask predictor, cross-entropy) vs central finite differences, float64."""
    worst = 0.0
    grid = TokenGrid(8, 8)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        torch.manual_seed(seed)
        predictor = MaskPredictor().double()
        features = torch.tensor(rng.normal(size=(grid.length, 16)))
        query = torch.tensor(rng.normal(size=16))
        target = torch.tensor(rng.random((grid.h, grid.w)) < 0.5)
        features.requires_grad_(True)
        query.requires_grad_(True)

        def loss_value() -> torch.Tensor:
            sims = similarity_map(features, query).view(grid.h, grid.w)
            probs = predictor(sims)
            return alignment_loss([probs], [target])

        loss = loss_value()
        params = [features, query, *predictor.parameters()]
        grads = torch.autograd.grad(loss, params)
        scale = max(1.0, max(float(g.abs().max()) for g in grads))
        floor = 1e-3 * scale

        with torch.no_grad():
            for tensor, grad in zip(params, grads):
                flat = tensor.view(-1)
                gflat = grad.reshape(-1)
                count = min(coord_samples, flat.numel())
                picks = rng.choice(flat.numel(), size=count, replace=False)
                for i in picks:
                    orig = float(flat[i])
                    flat[i] = orig + step
                    hi = float(loss_value())
                    flat[i] = orig - step
                    lo = float(loss_value())
                    flat[i] = orig
                    numeric = (hi - lo) / (2 * step)
                    worst = max(
                        worst,
                        float(relative_errors(np.array(float(gflat[i])), np.array(numeric), floor).max()),
                    )
    return worst
