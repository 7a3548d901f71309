import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zorder.layout import (
    BoundingBox,
    InstanceAnnotation,
    LayoutParseError,
    OcclusionGraph,
    PixelMask,
    SceneLayout,
    decode_rle,
    encode_rle,
    intersection_region,
    occluder_set,
    parse_layout,
    serialize_layout,
    validate_layout,
)

W = H = 8


def full_mask(bits_value=True):
    return PixelMask(W, H, np.full((H, W), bits_value, dtype=bool))


def box_mask(box):
    from zorder.layout import rasterize_box_pixels

    return rasterize_box_pixels(box, W, H)


def make_instance(idx, box, occluders=(), modal=None, amodal=None, caption=0):
    amodal = amodal if amodal is not None else box_mask(box)
    modal = modal if modal is not None else amodal
    return InstanceAnnotation(
        id=idx, box=box, modal_mask=modal, amodal_mask=amodal, caption=caption, occluders=occluders
    )


def three_instance_scene():
    a = make_instance(0, BoundingBox(0.0, 0.0, 0.5, 0.5))
    b_box = BoundingBox(0.25, 0.25, 0.75, 0.75)
    b_amodal = box_mask(b_box)
    b_modal = PixelMask(W, H, b_amodal.bits & ~a.amodal_mask.bits)
    b = make_instance(1, b_box, occluders=(0,), modal=b_modal, amodal=b_amodal, caption=1)
    c = make_instance(2, BoundingBox(0.75, 0.75, 1.0, 1.0), caption=2)
    return SceneLayout(width=W, height=H, global_prompt=0, instances=(a, b, c))


class TestValidateLayout:
    def test_well_formed_scene_empty_report(self):
        report = validate_layout(three_instance_scene())
        assert report.ok
        assert report.errors == []
        assert report.warnings == []

    def test_self_occlusion_reported(self):
        inst = make_instance(0, BoundingBox(0.0, 0.0, 0.5, 0.5), occluders=(0,))
        report = validate_layout(SceneLayout(W, H, 0, (inst,)))
        assert any("self-occlusion" in e for e in report.errors)

    def test_out_of_bounds_box_reported(self):
        inst = make_instance(0, BoundingBox(0.0, 0.0, 1.2, 0.5), amodal=full_mask(False), modal=full_mask(False))
        report = validate_layout(SceneLayout(W, H, 0, (inst,)))
        assert any("box out of bounds" in e for e in report.errors)

    def test_dangling_occluder_reported(self):
        inst = make_instance(0, BoundingBox(0.0, 0.0, 0.5, 0.5), occluders=(9,))
        report = validate_layout(SceneLayout(W, H, 0, (inst,)))
        assert any("dangling occluder id 9" in e for e in report.errors)

    def test_modal_outside_amodal_reported(self):
        box = BoundingBox(0.0, 0.0, 0.5, 0.5)
        report = validate_layout(
            SceneLayout(W, H, 0, (make_instance(0, box, modal=full_mask(True)),))
        )
        assert any("modal mask not contained" in e for e in report.errors)

    def test_cycle_is_warning_not_error(self):
        box = BoundingBox(0.0, 0.0, 1.0, 1.0)
        a = make_instance(0, box, occluders=(1,))
        b = make_instance(1, box, occluders=(0,), caption=1)
        report = validate_layout(SceneLayout(W, H, 0, (a, b)))
        assert report.ok
        assert any("cycle" in w for w in report.warnings)


class TestOccluderSet:
    def chain(self):
        # a occludes b, b occludes c
        return OcclusionGraph(frozenset({10, 11, 12}), frozenset({(10, 11), (11, 12)}))

    def test_empty_graph(self):
        graph = OcclusionGraph(frozenset({1, 2}), frozenset())
        assert occluder_set(graph, 1, "direct") == set()
        assert occluder_set(graph, 2, "transitive") == set()

    def test_chain_direct(self):
        assert occluder_set(self.chain(), 12, "direct") == {11}

    def test_chain_transitive(self):
        assert occluder_set(self.chain(), 12, "transitive") == {10, 11}

    def test_unknown_id_raises(self):
        with pytest.raises(KeyError):
            occluder_set(self.chain(), 99)

    def test_cycle_excludes_self(self):
        graph = OcclusionGraph(frozenset({0, 1}), frozenset({(0, 1), (1, 0)}))
        assert occluder_set(graph, 0, "transitive") == {1}
        assert occluder_set(graph, 1, "transitive") == {0}

    @given(st.sets(st.tuples(st.integers(0, 6), st.integers(0, 6)).filter(lambda e: e[0] != e[1]), max_size=20))
    def test_direct_subset_of_transitive(self, edges):
        nodes = frozenset(range(7))
        graph = OcclusionGraph(nodes, frozenset(edges))
        for node in nodes:
            assert occluder_set(graph, node, "direct") <= occluder_set(graph, node, "transitive")


class TestIntersectionRegion:
    def test_identical_boxes(self):
        box = BoundingBox(0.1, 0.2, 0.5, 0.8)
        assert intersection_region(box, box) == box

    def test_disjoint_boxes(self):
        assert intersection_region(BoundingBox(0, 0, 0.4, 0.4), BoundingBox(0.5, 0.5, 1, 1)) is None

    def test_partial_overlap(self):
        got = intersection_region(BoundingBox(0, 0, 0.6, 0.6), BoundingBox(0.4, 0.4, 1, 1))
        assert got == BoundingBox(0.4, 0.4, 0.6, 0.6)

    def test_shared_edge_has_zero_area(self):
        assert intersection_region(BoundingBox(0, 0, 0.5, 1), BoundingBox(0.5, 0, 1, 1)) is None


class TestRle:
    def test_known_encoding(self):
        mask = PixelMask(4, 1, np.array([[True, True, False, True]]))
        assert encode_rle(mask) == "0,2,1,1"

    def test_all_zeros(self):
        assert encode_rle(PixelMask.zeros(4, 2)) == "8"

    def test_all_ones(self):
        assert encode_rle(full_mask()) == f"0,{W * H}"

    def test_decode_rejects_bad_total(self):
        with pytest.raises(LayoutParseError):
            decode_rle("3,2", 4, 2)

    def test_decode_rejects_garbage(self):
        with pytest.raises(LayoutParseError):
            decode_rle("1,x,2", 2, 2)

    @given(st.lists(st.booleans(), min_size=1, max_size=64))
    def test_round_trip(self, bits):
        width = len(bits)
        mask = PixelMask(width, 1, np.array([bits]))
        assert decode_rle(encode_rle(mask), width, 1) == mask


class TestSerialization:
    def test_round_trip_identity(self):
        scene = three_instance_scene()
        assert parse_layout(serialize_layout(scene)) == scene

    def test_missing_occluders_field(self):
        raw = json.loads(serialize_layout(three_instance_scene()))
        del raw["instances"][0]["occluders"]
        with pytest.raises(LayoutParseError, match="missing field occluders"):
            parse_layout(json.dumps(raw))

    def test_missing_scene_field(self):
        raw = json.loads(serialize_layout(three_instance_scene()))
        del raw["width"]
        with pytest.raises(LayoutParseError, match="missing field width"):
            parse_layout(json.dumps(raw))

    def test_malformed_json(self):
        with pytest.raises(LayoutParseError, match="malformed JSON"):
            parse_layout("{not json")

    def test_bad_rle_names_field(self):
        raw = json.loads(serialize_layout(three_instance_scene()))
        raw["instances"][0]["modal_mask"] = "1,1"
        with pytest.raises(LayoutParseError, match="modal_mask"):
            parse_layout(json.dumps(raw))

    def test_golden_two_instance_fixture(self):
        # Hand-written fixture on a 4x2 canvas: instance 0 fills the left
        # half (pixels 0, 1, 4, 5), instance 1 the right half, occluded by 0.
        text = json.dumps(
            {
                "width": 4,
                "height": 2,
                "global_prompt": 1,
                "instances": [
                    {
                        "id": 0,
                        "box": [0.0, 0.0, 0.5, 1.0],
                        "caption": 3,
                        "occluders": [],
                        "modal_mask": "0,2,2,2,2",
                        "amodal_mask": "0,2,2,2,2",
                    },
                    {
                        "id": 1,
                        "box": [0.5, 0.0, 1.0, 1.0],
                        "caption": 5,
                        "occluders": [0],
                        "modal_mask": "2,2,2,2",
                        "amodal_mask": "2,2,2,2",
                    },
                ],
            }
        )
        scene = parse_layout(text)
        assert scene.width == 4 and scene.height == 2
        assert scene.global_prompt == 1
        first, second = scene.instances
        assert first.id == 0 and first.caption == 3 and first.occluders == ()
        assert second.occluders == (0,)
        expected_left = np.array([[True, True, False, False], [True, True, False, False]])
        assert np.array_equal(first.modal_mask.bits, expected_left)
        assert np.array_equal(second.amodal_mask.bits, ~expected_left)
        assert validate_layout(scene).ok
