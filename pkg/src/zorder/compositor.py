"""Volume-rendering compositor over per-instance feature layers.

Each instance carries a per-channel density vector. Opacity is
``1 - exp(-density)`` inside the instance's box mask and zero outside;
transmittance attenuates an instance by the densities of the instances
explicitly ordered in front of it wherever their boxes cover the token. The
rendering weight ``w = transmittance * opacity`` drives a hybrid aggregation:
tokens with positive total weight take the normalized weighted average, and
tokens where every weight vanishes fall back to a plain average of the
covering instances (zero where no box covers the token).

Everything here is plain NumPy with dtype following the inputs: tests run the
chain in float64 against a literal per-token oracle, while training calls it
in float32 through an autograd bridge. ``composite_grad`` is the hand-derived
backward pass for the full chain; the fallback branch is treated as locally
constant in density, the standard subgradient choice at the branch boundary.

Accumulation over instances always happens in ascending instance-id order, so
reordering an input list never changes the output bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .grid import TokenGrid, TokenMask
from .layout import OcclusionGraph, SceneLayout, occluder_set

__all__ = [
    "EPS",
    "InstanceFeatureLayer",
    "opacity",
    "transmittance",
    "render_weights",
    "composite",
    "residual_merge",
    "composite_forward",
    "composite_grad",
    "brute_force_composite",
]

EPS = 1e-8


@dataclass(frozen=True, eq=False)
class InstanceFeatureLayer:
    """Zero-padded feature layer for one instance.

    ``features`` is (L, D) and exactly zero at tokens outside ``omega``,
    the ascending index list of tokens inside the instance's box.
    """

    instance_id: int
    features: np.ndarray
    omega: np.ndarray
    box_mask: TokenMask

    def validate(self) -> None:
        length = self.box_mask.grid.length
        if self.features.ndim != 2 or self.features.shape[0] != length:
            raise ValueError(f"features must be ({length}, D), got {self.features.shape}")
        outside = np.ones(length, dtype=bool)
        outside[np.asarray(self.omega, dtype=np.int64)] = False
        if np.any(self.features[outside] != 0):
            raise ValueError("features must be exactly zero outside omega")


def _check_density(density: np.ndarray) -> np.ndarray:
    density = np.asarray(density)
    if density.ndim != 1:
        raise ValueError(f"density must be a 1-D per-channel vector, got shape {density.shape}")
    if not np.all(np.isfinite(density)):
        raise ValueError("density must be finite")
    if np.any(density < 0):
        raise ValueError("density must be non-negative")
    return density


def opacity(density: np.ndarray, box_mask: TokenMask) -> np.ndarray:
    """Per-token, per-channel opacity ``(1 - exp(-density)) * mask``; (L, D)."""
    density = _check_density(density)
    alpha = -np.expm1(-density)
    return alpha[None, :] * box_mask.bits[:, None].astype(density.dtype)


def transmittance(
    occluders: Sequence[tuple[np.ndarray, TokenMask]], length: int, dim: int
) -> np.ndarray:
    """Fraction of light reaching an instance through its occluders; (L, D).

    ``occluders`` pairs each front instance's density vector with its box
    mask. An empty list yields all ones. Values are exp of a non-positive
    sum, hence always in (0, 1].
    """
    dtype = np.asarray(occluders[0][0]).dtype if occluders else np.float64
    load = np.zeros((length, dim), dtype=dtype)
    for density, mask in occluders:
        density = _check_density(density)
        if density.shape[0] != dim:
            raise ValueError(f"density has {density.shape[0]} channels, expected {dim}")
        if mask.grid.length != length:
            raise ValueError(f"mask length {mask.grid.length} does not match {length}")
        load += density[None, :] * mask.bits[:, None].astype(density.dtype)
    return np.exp(-load)


def render_weights(
    densities: np.ndarray, masks: np.ndarray, occluder_matrix: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized opacity/transmittance/weight chain for one scene.

    densities: (n, D) non-negative; masks: (n, L) bool box masks;
    occluder_matrix: (n, n) bool, entry (i, j) true when j is in front of i.
    Returns (weights, opacities, transmittances), each (n, L, D).
    """
    densities = np.asarray(densities)
    masks_f = masks.astype(densities.dtype)
    alpha = (-np.expm1(-densities))[:, None, :] * masks_f[:, :, None]
    per_inst_load = densities[:, None, :] * masks_f[:, :, None]  # (n, L, D)
    trans = np.exp(-np.einsum("ij,jud->iud", occluder_matrix.astype(densities.dtype), per_inst_load))
    return trans * alpha, alpha, trans


def _sorted_by_id(
    layers: Sequence[InstanceFeatureLayer], *aligned: Sequence
) -> tuple[list[int], list[InstanceFeatureLayer], list[list]]:
    order = sorted(range(len(layers)), key=lambda k: layers[k].instance_id)
    return order, [layers[k] for k in order], [[seq[k] for k in order] for seq in aligned]


def _blend_arrays(feats: np.ndarray, w: np.ndarray, masks_f: np.ndarray, eps: float) -> np.ndarray:
    """Hybrid aggregation given precomputed weights; all inputs id-sorted."""
    total_w = w.sum(axis=0)
    weighted = (w * feats).sum(axis=0) / (total_w + eps)
    cover = masks_f.sum(axis=0)
    fallback = (masks_f[:, :, None] * feats).sum(axis=0) / np.maximum(cover, 1.0)[:, None]
    return np.where(total_w > 0, weighted, fallback)


def _forward_arrays(
    feats: np.ndarray,
    densities: np.ndarray,
    masks: np.ndarray,
    occ: np.ndarray,
    eps: float,
    return_cache: bool = False,
):
    """Full chain on raw id-sorted arrays: feats (n, L, D), densities (n, D),
    masks (n, L) bool, occ (n, n) bool; returns the (L, D) composite.

    With ``return_cache`` the intermediates needed by the backward pass ride
    along so training avoids recomputing them.
    """
    w, alpha, trans = render_weights(densities, masks, occ)
    masks_f = masks.astype(feats.dtype)
    total_w = w.sum(axis=0)
    denom = total_w + eps
    weighted = (w * feats).sum(axis=0) / denom
    cover = masks_f.sum(axis=0)
    fallback = (masks_f[:, :, None] * feats).sum(axis=0) / np.maximum(cover, 1.0)[:, None]
    active = total_w > 0
    out = np.where(active, weighted, fallback)
    if return_cache:
        return out, (w, alpha, trans, masks_f, denom, weighted, active)
    return out


def _backward_arrays(
    feats: np.ndarray,
    densities: np.ndarray,
    masks: np.ndarray,
    occ: np.ndarray,
    upstream: np.ndarray,
    eps: float,
    cache=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of :func:`_forward_arrays` for id-sorted arrays.

    Returns (d_feats (n, L, D), d_densities (n, D)). The fallback branch is
    locally constant in density, so only feature gradients flow through it.
    """
    if cache is None:
        _, cache = _forward_arrays(feats, densities, masks, occ, eps, return_cache=True)
    w, alpha, trans, masks_f, denom, weighted, active = cache

    g = np.asarray(upstream)
    if g.shape != weighted.shape:
        raise ValueError(f"upstream shape {g.shape} does not match output {weighted.shape}")
    g_active = np.where(active, g, 0.0)

    d_feats = g_active[None] * w / denom[None]  # (n, L, D)
    d_w = g_active[None] * (feats - weighted[None]) / denom[None]

    cover = np.maximum(masks_f.sum(axis=0), 1.0)  # (L,)
    g_fallback = np.where(active, 0.0, g)
    d_feats = d_feats + g_fallback[None] * masks_f[:, :, None] / cover[None, :, None]

    d_alpha = d_w * trans
    d_trans = d_w * alpha
    # alpha_i(u, d) = (1 - exp(-density_i[d])) * mask_i[u]
    d_dens = np.einsum("iud,iu->id", d_alpha, masks_f) * np.exp(-densities)
    # trans_i(u, d) = exp(-sum_j occ[i, j] * density_j[d] * mask_j[u])
    shrink = d_trans * trans
    pair = np.einsum("iud,ju->ijd", shrink, masks_f)
    d_dens -= np.einsum("ij,ijd->jd", occ.astype(densities.dtype), pair)
    return d_feats, d_dens


def composite(
    layers: Sequence[InstanceFeatureLayer],
    weights: Sequence[np.ndarray],
    eps: float = EPS,
    shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Hybrid-aggregate instance layers into one (L, D) feature map.

    Per token-channel: where the summed rendering weight is positive the
    output is the eps-stabilized weighted average; elsewhere it is the plain
    mean over instances whose box covers the token, and zero where no box
    does. ``shape`` is only needed for an empty layer list.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(layers) != len(weights):
        raise ValueError("layers and weights must align")
    if not layers:
        if shape is None:
            raise ValueError("shape required to composite zero layers")
        return np.zeros(shape)
    order, layers, (weights,) = _sorted_by_id(layers, weights)
    feats = np.stack([layer.features for layer in layers])  # (n, L, D)
    w = np.stack([np.asarray(wi) for wi in weights])  # (n, L, D)
    if w.shape != feats.shape:
        raise ValueError(f"weights shape {w.shape} does not match features {feats.shape}")
    masks_f = np.stack([layer.box_mask.bits for layer in layers]).astype(feats.dtype)  # (n, L)
    return _blend_arrays(feats, w, masks_f, eps)


def residual_merge(z_in: np.ndarray, z_out: np.ndarray) -> np.ndarray:
    """Elementwise sum of the block input and the composited map."""
    if z_in.shape != z_out.shape:
        raise ValueError(f"shape mismatch {z_in.shape} vs {z_out.shape}")
    return z_in + z_out


def _occluder_matrix(
    ids: Sequence[int], occluders_by_id: Mapping[int, Iterable[int]]
) -> np.ndarray:
    index = {inst_id: k for k, inst_id in enumerate(ids)}
    mat = np.zeros((len(ids), len(ids)), dtype=bool)
    for inst_id, fronts in occluders_by_id.items():
        if inst_id not in index:
            continue
        for front in fronts:
            if front in index and front != inst_id:
                mat[index[inst_id], index[front]] = True
    return mat


def composite_forward(
    layers: Sequence[InstanceFeatureLayer],
    densities: Sequence[np.ndarray],
    occluders_by_id: Mapping[int, Iterable[int]],
    eps: float = EPS,
) -> np.ndarray:
    """Full chain: densities and occluder sets to the composited (L, D) map."""
    if not layers:
        raise ValueError("composite_forward requires at least one layer")
    order, layers, (densities,) = _sorted_by_id(layers, densities)
    ids = [layer.instance_id for layer in layers]
    dens = np.stack([_check_density(d) for d in densities])
    masks = np.stack([layer.box_mask.bits for layer in layers])
    feats = np.stack([layer.features for layer in layers])
    return _forward_arrays(feats, dens, masks, _occluder_matrix(ids, occluders_by_id), eps)


def composite_grad(
    layers: Sequence[InstanceFeatureLayer],
    densities: Sequence[np.ndarray],
    occluders_by_id: Mapping[int, Iterable[int]],
    upstream: np.ndarray,
    eps: float = EPS,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Analytic gradients of the full compositing chain.

    Given the upstream (L, D) gradient of a scalar loss with respect to the
    composited map, returns per-layer feature gradients (aligned with the
    input ``layers`` order) and per-instance density gradients (n, D).
    """
    if not layers:
        raise ValueError("composite_grad requires at least one layer")
    order, slayers, (sdens,) = _sorted_by_id(layers, densities)
    ids = [layer.instance_id for layer in slayers]
    dens = np.stack([_check_density(d) for d in sdens])  # (n, D)
    masks = np.stack([layer.box_mask.bits for layer in slayers])  # (n, L)
    feats = np.stack([layer.features for layer in slayers])  # (n, L, D)
    occ = _occluder_matrix(ids, occluders_by_id)

    d_feats, d_dens = _backward_arrays(feats, dens, masks, occ, upstream, eps)

    inverse = np.empty(len(order), dtype=np.int64)
    inverse[order] = np.arange(len(order))
    feature_grads = [d_feats[inverse[k]] for k in range(len(layers))]
    density_grads = d_dens[inverse]
    return feature_grads, density_grads


def brute_force_composite(
    layout: SceneLayout,
    grid: TokenGrid,
    densities: Mapping[int, np.ndarray],
    features: Mapping[int, np.ndarray],
    eps: float = EPS,
    transitive: bool = False,
) -> np.ndarray:
    """Literal per-token, per-channel evaluation of the compositing rules.

    Test oracle only: triple-nested scalar loops, no vectorized shortcuts,
    and its own center-in-box test per token. Occluder sets come straight
    from the layout (direct mode) or via graph reachability (transitive).
    """
    instances = sorted(layout.instances, key=lambda inst: inst.id)
    graph = OcclusionGraph.from_layout(layout)
    fronts: dict[int, list[int]] = {}
    for inst in instances:
        if transitive:
            fronts[inst.id] = sorted(occluder_set(graph, inst.id, "transitive"))
        else:
            fronts[inst.id] = sorted(inst.occluders)
    by_id = {inst.id: inst for inst in instances}

    length = grid.length
    dim = next(iter(features.values())).shape[1] if features else 0
    out = np.zeros((length, dim))
    for u in range(length):
        row, col = u // grid.w, u % grid.w
        cx = (col + 0.5) / grid.w
        cy = (row + 0.5) / grid.h
        inside = {}
        for inst in instances:
            box = inst.box
            inside[inst.id] = box.x_min <= cx < box.x_max and box.y_min <= cy < box.y_max
        for d in range(dim):
            total_w = 0.0
            numer = 0.0
            for inst in instances:
                alpha = (1.0 - np.exp(-float(densities[inst.id][d]))) if inside[inst.id] else 0.0
                t = 1.0
                for front in fronts[inst.id]:
                    if inside[front]:
                        t *= np.exp(-float(densities[front][d]))
                weight = t * alpha
                total_w += weight
                numer += weight * float(features[inst.id][u, d])
            if total_w > 0.0:
                out[u, d] = numer / (total_w + eps)
            else:
                covering = [inst.id for inst in instances if inside[inst.id]]
                acc = 0.0
                for inst_id in covering:
                    acc += float(features[inst_id][u, d])
                out[u, d] = acc / max(1, len(covering))
    return out
