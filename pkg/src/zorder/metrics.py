"""Metrics for generated images against their layouts.

Segmentation is an exact color oracle: the palette colors within a scene are
unique, so each pixel is assigned to the instance with the nearest palette
color, unassigned when nothing comes within the threshold. On top of the
segmentation: mean IoU against the modal masks, overlap-restricted mean IoU,
occlusion-order F1 and depth disagreement from pixel ownership inside box
intersections, and an existence rate. Scene rows aggregate into a CSV report
with a JSON twin.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .layout import (
    BoundingBox,
    InstanceAnnotation,
    PixelMask,
    SceneLayout,
    intersection_region,
    rasterize_box_pixels,
)
from .synth import caption_color

__all__ = [
    "SEGMENT_THRESHOLD",
    "SegmentationResult",
    "SceneMetrics",
    "segment_instances",
    "miou",
    "o_miou",
    "occlusion_f1",
    "depth_whdr",
    "existence_rate",
    "predict_front_map",
    "evaluate_scene",
    "report",
]

# Maximum RGB distance (0-255 scale) for a pixel to count as an instance's
# color: halfway separation of the palette under mild generation noise.
SEGMENT_THRESHOLD = 60.0

METRIC_COLUMNS = ("miou", "o_miou", "occ_f1", "dep_whdr", "existence_rate")


@dataclass
class SegmentationResult:
    """Per-instance predicted masks (pairwise disjoint) plus the leftovers."""

    masks: dict[int, PixelMask]
    unassigned: PixelMask


def segment_instances(
    image: np.ndarray,
    palette: Mapping[int, tuple[int, int, int]] | None,
    layout: SceneLayout,
    threshold: float = SEGMENT_THRESHOLD,
) -> SegmentationResult:
    """Assign each pixel to the instance with the nearest palette color.

    ``palette`` maps caption ids to RGB; None uses the built-in palette.
    Pixels farther than ``threshold`` from every instance color stay
    unassigned; exact ties go to the lower instance id.
    """
    instances = sorted(layout.instances, key=lambda inst: inst.id)
    height, width = image.shape[:2]
    if not instances:
        return SegmentationResult(masks={}, unassigned=PixelMask(width, height, np.ones((height, width), dtype=bool)))
    colors = np.array(
        [
            (palette[inst.caption] if palette is not None else caption_color(inst.caption))
            for inst in instances
        ],
        dtype=np.float64,
    )  # (n, 3)
    pixels = image.reshape(-1, 3).astype(np.float64)
    dists = np.sqrt(((pixels[None, :, :] - colors[:, None, :]) ** 2).sum(-1))  # (n, P)
    nearest = dists.argmin(axis=0)
    assigned = dists[nearest, np.arange(pixels.shape[0])] <= threshold
    masks = {}
    for k, inst in enumerate(instances):
        bits = (nearest == k) & assigned
        masks[inst.id] = PixelMask(width, height, bits.reshape(height, width))
    unassigned = PixelMask(width, height, (~assigned).reshape(height, width))
    return SegmentationResult(masks=masks, unassigned=unassigned)


def _iou(pred: np.ndarray, target: np.ndarray) -> float:
    union = np.count_nonzero(pred | target)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & target) / union


def miou(pred_masks: Sequence[PixelMask], target_masks: Sequence[PixelMask]) -> float | None:
    """Mean IoU over aligned instance masks; an empty-vs-empty pair scores 1."""
    if len(pred_masks) != len(target_masks):
        raise ValueError("pred and target lists must align")
    if not pred_masks:
        return None
    return float(np.mean([_iou(p.bits, t.bits) for p, t in zip(pred_masks, target_masks)]))


def _overlapping_pairs(layout: SceneLayout) -> list[tuple[InstanceAnnotation, InstanceAnnotation, BoundingBox]]:
    pairs = []
    instances = sorted(layout.instances, key=lambda inst: inst.id)
    for i in range(len(instances)):
        for j in range(i + 1, len(instances)):
            region = intersection_region(instances[i].box, instances[j].box)
            if region is not None:
                pairs.append((instances[i], instances[j], region))
    return pairs


def o_miou(pred_masks: Mapping[int, PixelMask], layout: SceneLayout) -> float | None:
    """Mean IoU restricted to pairwise box intersections.

    For every overlapping box pair, both instances' predicted and modal masks
    are clipped to the intersection; the per-instance IoUs on that clip all
    average together. None when the layout has no overlapping pair.
    """
    pairs = _overlapping_pairs(layout)
    if not pairs:
        return None
    scores = []
    for inst_a, inst_b, region in pairs:
        clip = rasterize_box_pixels(region, layout.width, layout.height).bits
        for inst in (inst_a, inst_b):
            pred = pred_masks[inst.id].bits & clip
            target = inst.modal_mask.bits & clip
            scores.append(_iou(pred, target))
    return float(np.mean(scores))


def occlusion_f1(pred_edges: set[tuple[int, int]], true_edges: set[tuple[int, int]]) -> float:
    """F1 over directed occlusion edges; both-empty scores a perfect 1."""
    if not pred_edges and not true_edges:
        return 1.0
    hits = len(pred_edges & true_edges)
    precision = hits / len(pred_edges) if pred_edges else 0.0
    recall = hits / len(true_edges) if true_edges else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def depth_whdr(
    pred_order: Mapping[frozenset[int], int], true_order: Mapping[frozenset[int], int]
) -> float | None:
    """Fraction of pairs (with both a prediction and ground truth) whose
    predicted front disagrees; None when no pair was evaluated."""
    common = set(pred_order) & set(true_order)
    if not common:
        return None
    disagreements = sum(1 for pair in common if pred_order[pair] != true_order[pair])
    return disagreements / len(common)


def predict_front_map(
    seg: SegmentationResult, layout: SceneLayout
) -> dict[frozenset[int], int]:
    """Pixel-ownership front predictions for every ground-truth occluded pair.

    For each pair connected by a stored occlusion edge, the instance owning
    strictly more segmented pixels inside the pair's box intersection is
    predicted front; ties and zero ownership predict nothing.
    """
    true_edges = {
        (front, inst.id) for inst in layout.instances for front in inst.occluders
    }
    by_id = {inst.id: inst for inst in layout.instances}
    predictions: dict[frozenset[int], int] = {}
    for front, back in true_edges:
        region = intersection_region(by_id[front].box, by_id[back].box)
        if region is None:
            continue
        clip = rasterize_box_pixels(region, layout.width, layout.height).bits
        count_front = np.count_nonzero(seg.masks[front].bits & clip)
        count_back = np.count_nonzero(seg.masks[back].bits & clip)
        if count_front > count_back:
            predictions[frozenset((front, back))] = front
        elif count_back > count_front:
            predictions[frozenset((front, back))] = back
    return predictions


def existence_rate(seg: SegmentationResult, layout: SceneLayout) -> float | None:
    """Fraction of instances whose predicted mask overlaps the modal mask
    with IoU at least 0.5."""
    if not layout.instances:
        return None
    hits = sum(
        1
        for inst in layout.instances
        if _iou(seg.masks[inst.id].bits, inst.modal_mask.bits) >= 0.5
    )
    return hits / len(layout.instances)


@dataclass
class SceneMetrics:
    scene_id: int
    miou: float | None
    o_miou: float | None
    occ_f1: float | None
    dep_whdr: float | None
    existence_rate: float | None

    def as_row(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "miou": self.miou,
            "o_miou": self.o_miou,
            "occ_f1": self.occ_f1,
            "dep_whdr": self.dep_whdr,
            "existence_rate": self.existence_rate,
        }


def evaluate_scene(
    image: np.ndarray,
    layout: SceneLayout,
    scene_id: int = 0,
    palette: Mapping[int, tuple[int, int, int]] | None = None,
) -> SceneMetrics:
    """All metrics for one generated image against its layout's ground truth."""
    seg = segment_instances(image, palette, layout)
    instances = sorted(layout.instances, key=lambda inst: inst.id)
    preds = [seg.masks[inst.id] for inst in instances]
    targets = [inst.modal_mask for inst in instances]
    true_edges = {(front, inst.id) for inst in layout.instances for front in inst.occluders}
    pred_map = predict_front_map(seg, layout)
    pred_edges = {
        (front, next(iter(pair - {front}))) for pair, front in pred_map.items()
    }
    true_map = {frozenset((front, back)): front for front, back in true_edges}
    return SceneMetrics(
        scene_id=scene_id,
        miou=miou(preds, targets),
        o_miou=o_miou(seg.masks, layout),
        occ_f1=occlusion_f1(pred_edges, true_edges),
        dep_whdr=depth_whdr(pred_map, true_map),
        existence_rate=existence_rate(seg, layout),
    )


def _aggregate(rows: Sequence[SceneMetrics]) -> dict:
    out: dict = {"scene_id": "aggregate"}
    for column in METRIC_COLUMNS:
        values = [getattr(row, column) for row in rows if getattr(row, column) is not None]
        out[column] = float(np.mean(values)) if values else None
    return out


def report(results: Sequence[SceneMetrics], path: str | Path) -> None:
    """Write the CSV report plus a JSON twin with identical values."""
    path = Path(path)
    rows = [row.as_row() for row in results]
    aggregate = _aggregate(results)

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("scene_id", *METRIC_COLUMNS))
    for row in rows:
        writer.writerow(
            [row["scene_id"], *("" if row[c] is None else repr(row[c]) for c in METRIC_COLUMNS)]
        )
    if rows:
        writer.writerow(
            [aggregate["scene_id"], *("" if aggregate[c] is None else repr(aggregate[c]) for c in METRIC_COLUMNS)]
        )
    path.write_text(buffer.getvalue())

    twin = {"scenes": rows, "aggregate": aggregate if rows else None}
    path.with_suffix(".json").write_text(json.dumps(twin, indent=2))
