import math

import numpy as np
import pytest

from zorder.compositor import (
    InstanceFeatureLayer,
    brute_force_composite,
    composite,
    composite_forward,
    composite_grad,
    opacity,
    render_weights,
    residual_merge,
    transmittance,
)
from zorder.gradcheck import check_compositor_gradients
from zorder.grid import TokenGrid, rasterize_box, tokens_in_box
from zorder.layout import BoundingBox, InstanceAnnotation, PixelMask, SceneLayout

LN2 = math.log(2.0)


def make_layer(instance_id, box, grid, dim, rng=None, fill=None):
    omega = tokens_in_box(box, grid)
    feats = np.zeros((grid.length, dim))
    if omega.size:
        if fill is not None:
            feats[omega] = fill
        elif rng is not None:
            feats[omega] = rng.normal(size=(omega.size, dim))
    return InstanceFeatureLayer(instance_id, feats, omega, rasterize_box(box, grid))


class TestOpacity:
    def test_zero_density_zero_opacity(self):
        grid = TokenGrid(4, 4)
        mask = rasterize_box(BoundingBox(0, 0, 1, 1), grid)
        assert np.all(opacity(np.zeros(3), mask) == 0)

    def test_paper_fixed_density_value(self):
        grid = TokenGrid(2, 2)
        mask = rasterize_box(BoundingBox(0, 0, 1, 1), grid)
        alpha = opacity(np.array([5.0]), mask)
        assert abs(alpha[0, 0] - (1 - math.exp(-5))) < 1e-12

    def test_ln2_inside_and_outside(self):
        grid = TokenGrid(4, 4)
        box = BoundingBox(0, 0, 0.5, 0.5)
        alpha = opacity(np.array([LN2]), rasterize_box(box, grid))
        inside = tokens_in_box(box, grid)
        outside = np.setdiff1d(np.arange(grid.length), inside)
        assert np.allclose(alpha[inside], 0.5, atol=1e-12)
        assert np.all(alpha[outside] == 0)

    def test_negative_density_rejected(self):
        grid = TokenGrid(2, 2)
        mask = rasterize_box(BoundingBox(0, 0, 1, 1), grid)
        with pytest.raises(ValueError):
            opacity(np.array([-0.1]), mask)
        with pytest.raises(ValueError):
            opacity(np.array([np.nan]), mask)


class TestTransmittance:
    def test_no_occluders_all_ones(self):
        assert np.all(transmittance([], 16, 3) == 1.0)

    def test_single_ln2_occluder(self):
        grid = TokenGrid(2, 2)
        mask = rasterize_box(BoundingBox(0, 0, 1, 1), grid)
        trans = transmittance([(np.array([LN2]), mask)], grid.length, 1)
        assert np.allclose(trans, 0.5, atol=1e-12)

    def test_two_ln2_occluders(self):
        grid = TokenGrid(2, 2)
        mask = rasterize_box(BoundingBox(0, 0, 1, 1), grid)
        pair = [(np.array([LN2]), mask), (np.array([LN2]), mask)]
        trans = transmittance(pair, grid.length, 1)
        assert np.allclose(trans, 0.25, atol=1e-12)

    def test_dimension_mismatch(self):
        grid = TokenGrid(2, 2)
        mask = rasterize_box(BoundingBox(0, 0, 1, 1), grid)
        with pytest.raises(ValueError):
            transmittance([(np.array([1.0, 2.0]), mask)], grid.length, 1)


class TestComposite:
    def test_single_instance_normalization(self):
        grid = TokenGrid(2, 2)
        layer = make_layer(0, BoundingBox(0, 0, 1, 1), grid, 1, fill=3.0)
        weights = [np.full((grid.length, 1), 0.8)]
        out = composite([layer], weights, eps=1e-8)
        assert np.allclose(out, 3.0 * 0.8 / (0.8 + 1e-8), atol=1e-12)

    def test_front_back_mixture(self):
        # Both instances cover everything; front density ln2, back density
        # ln2 behind the front: weights 0.5 and 0.25 -> 2/3 front, 1/3 back.
        grid = TokenGrid(2, 2)
        front = make_layer(0, BoundingBox(0, 0, 1, 1), grid, 1, fill=1.0)
        back = make_layer(1, BoundingBox(0, 0, 1, 1), grid, 1, fill=4.0)
        out = composite_forward(
            [front, back], [np.array([LN2]), np.array([LN2])], {1: [0]}, eps=1e-12
        )
        assert np.allclose(out, 2 / 3 * 1.0 + 1 / 3 * 4.0, atol=1e-9)

    def test_zero_density_fallback_average(self):
        grid = TokenGrid(2, 2)
        a = make_layer(0, BoundingBox(0, 0, 1, 1), grid, 1, fill=1.0)
        b = make_layer(1, BoundingBox(0, 0, 1, 1), grid, 1, fill=5.0)
        out = composite_forward([a, b], [np.zeros(1), np.zeros(1)], {}, eps=1e-8)
        assert np.allclose(out, 3.0)

    def test_uncovered_tokens_are_zero(self):
        grid = TokenGrid(4, 4)
        layer = make_layer(0, BoundingBox(0, 0, 0.5, 0.5), grid, 2, fill=7.0)
        out = composite_forward([layer], [np.full(2, LN2)], {})
        outside = np.setdiff1d(np.arange(grid.length), layer.omega)
        assert np.all(out[outside] == 0)

    def test_residual_merge(self):
        ones = np.ones((4, 2))
        twos = np.full((4, 2), 2.0)
        assert np.array_equal(residual_merge(ones, twos), np.full((4, 2), 3.0))
        assert np.array_equal(residual_merge(ones, np.zeros((4, 2))), ones)
        with pytest.raises(ValueError):
            residual_merge(ones, np.zeros((3, 2)))


def build_layout(grid, boxes, occluders):
    empty = PixelMask.zeros(grid.w, grid.h)
    instances = tuple(
        InstanceAnnotation(
            id=i,
            box=box,
            modal_mask=empty,
            amodal_mask=empty,
            caption=0,
            occluders=tuple(occluders.get(i, ())),
        )
        for i, box in enumerate(boxes)
    )
    return SceneLayout(width=grid.w, height=grid.h, global_prompt=0, instances=instances)


def random_case(rng, max_instances=4, min_instances=1):
    grid = TokenGrid(int(rng.integers(2, 9)), int(rng.integers(2, 9)))
    n = int(rng.integers(min_instances, max_instances + 1))
    dim = int(rng.integers(1, 9))
    boxes, layers, densities, occluders = [], [], [], {}
    for i in range(n):
        x0 = float(rng.uniform(0, 0.7))
        y0 = float(rng.uniform(0, 0.7))
        box = BoundingBox(
            x0,
            y0,
            min(x0 + float(rng.uniform(0.15, 1.0)), 1.0),
            min(y0 + float(rng.uniform(0.15, 1.0)), 1.0),
        )
        boxes.append(box)
        layers.append(make_layer(i, box, grid, dim, rng=rng))
        densities.append(rng.uniform(0.0, 3.0, size=dim))
        occluders[i] = [j for j in range(i) if rng.random() < 0.4]
    return grid, boxes, layers, densities, occluders


class TestBruteForceOracle:
    def test_agreement_on_100_random_configurations(self):
        rng = np.random.default_rng(1234)
        worst = 0.0
        for _ in range(100):
            grid, boxes, layers, densities, occluders = random_case(rng)
            fast = composite_forward(layers, densities, occluders)
            layout = build_layout(grid, boxes, occluders)
            dens_map = {i: densities[i] for i in range(len(densities))}
            feat_map = {i: layers[i].features for i in range(len(layers))}
            slow = brute_force_composite(layout, grid, dens_map, feat_map)
            worst = max(worst, float(np.max(np.abs(fast - slow))))
        assert worst < 1e-10

    def test_no_instances_zero_map(self):
        grid = TokenGrid(4, 4)
        layout = build_layout(grid, [], {})
        out = brute_force_composite(layout, grid, {}, {})
        assert out.shape == (16, 0)

    def test_single_instance_full_cover_single_term(self):
        grid = TokenGrid(2, 2)
        box = BoundingBox(0, 0, 1, 1)
        layout = build_layout(grid, [box], {})
        feats = np.full((4, 1), 2.0)
        out = brute_force_composite(layout, grid, {0: np.array([LN2])}, {0: feats}, eps=1e-8)
        assert np.allclose(out, 2.0 * 0.5 / (0.5 + 1e-8))


class TestInvariants:
    def test_convexity_of_weighted_branch(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            grid, _, layers, densities, occluders = random_case(rng)
            dens = np.stack(densities)
            masks = np.stack([l.box_mask.bits for l in layers])
            occ = np.zeros((len(layers), len(layers)), dtype=bool)
            for i, fronts in occluders.items():
                for j in fronts:
                    occ[i, j] = True
            weights, _, _ = render_weights(dens, masks, occ)
            total = weights.sum(axis=0)
            active = total > 0
            if not np.any(active):
                continue
            coefficients = np.where(active, weights / np.where(active, total, 1.0), 0.0)
            sums = coefficients.sum(axis=0)[active]
            assert np.all(np.abs(sums - 1.0) < 1e-6)

    def test_occluder_monotonicity(self):
        rng = np.random.default_rng(8)
        grid = TokenGrid(4, 4)
        box = BoundingBox(0, 0, 1, 1)
        mask = rasterize_box(box, grid)
        for _ in range(200):
            low = float(rng.uniform(0, 2))
            high = low + float(rng.uniform(0.01, 2))
            t_low = transmittance([(np.array([low]), mask)], grid.length, 1)
            t_high = transmittance([(np.array([high]), mask)], grid.length, 1)
            assert np.all(t_high < t_low)

    def test_front_dominance_at_high_density(self):
        rng = np.random.default_rng(9)
        grid = TokenGrid(3, 3)
        box = BoundingBox(0, 0, 1, 1)
        for _ in range(200):
            dim = int(rng.integers(1, 5))
            front = make_layer(0, box, grid, dim, rng=rng)
            back = make_layer(1, box, grid, dim, rng=rng)
            densities = [np.full(dim, 50.0), rng.uniform(0.1, 3.0, dim)]
            out = composite_forward([front, back], densities, {1: [0]})
            assert np.max(np.abs(out - front.features)) < 1e-6

    def test_permutation_bit_identity(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            grid, _, layers, densities, occluders = random_case(rng, min_instances=2)
            base = composite_forward(layers, densities, occluders)
            order = rng.permutation(len(layers))
            shuffled_layers = [layers[k] for k in order]
            shuffled_densities = [densities[k] for k in order]
            again = composite_forward(shuffled_layers, shuffled_densities, occluders)
            assert np.array_equal(base, again)

    def test_zero_density_occluder_is_neutral(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            grid, _, layers, densities, occluders = random_case(rng, min_instances=2)
            densities = [d.copy() for d in densities]
            densities[0][:] = 0.0  # instance 0 becomes a zero-density front
            target = len(layers) - 1
            without = {i: [f for f in v if not (i == target and f == 0)] for i, v in occluders.items()}
            with_edge = {i: list(v) for i, v in without.items()}
            with_edge[target] = with_edge[target] + [0]
            base = composite_forward(layers, densities, without)
            added = composite_forward(layers, densities, with_edge)
            assert np.array_equal(base, added)


class TestGradients:
    def test_zero_upstream_zero_gradients(self):
        rng = np.random.default_rng(3)
        grid, _, layers, densities, occluders = random_case(rng)
        dim = layers[0].features.shape[1]
        fgrads, dgrads = composite_grad(layers, densities, occluders, np.zeros((grid.length, dim)))
        assert all(np.all(g == 0) for g in fgrads)
        assert np.all(dgrads == 0)

    def test_single_instance_feature_gradient(self):
        grid = TokenGrid(1, 1)
        layer = make_layer(0, BoundingBox(0, 0, 1, 1), grid, 1, fill=2.0)
        density = [np.array([LN2])]
        upstream = np.ones((1, 1))
        fgrads, _ = composite_grad([layer], density, {}, upstream, eps=1e-8)
        w = 0.5
        assert abs(fgrads[0][0, 0] - w / (w + 1e-8)) < 1e-12

    def test_matches_finite_differences(self):
        worst = check_compositor_gradients(range(10))
        assert worst < 1e-5
