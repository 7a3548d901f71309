"""Scene layout data model: boxes, masks, occluder lists, and the occlusion graph.

A layout describes one scene as a list of instances, each carrying an amodal
bounding box (full extent, including occluded parts), a visible (modal) and a
full (amodal) pixel mask, a categorical caption id, and the ids of the
instances directly in front of it. Layouts serialize to a single JSON object
per scene; masks travel as row-major binary run-length strings.

All types are immutable after construction and safe to share across threads.
Construction does not enforce semantic invariants; ``validate_layout`` reports
them so that malformed inputs can be inspected rather than rejected blindly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

__all__ = [
    "BoundingBox",
    "PixelMask",
    "InstanceAnnotation",
    "SceneLayout",
    "OcclusionGraph",
    "ValidationReport",
    "LayoutParseError",
    "validate_layout",
    "occluder_set",
    "intersection_region",
    "rasterize_box_pixels",
    "parse_layout",
    "serialize_layout",
    "encode_rle",
    "decode_rle",
]


class LayoutParseError(ValueError):
    """Raised when layout JSON is malformed or violates the schema."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates (amodal extent)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def is_valid(self) -> bool:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            return False
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            return False
        return 0.0 <= self.x_min and self.x_max <= 1.0 and 0.0 <= self.y_min and self.y_max <= 1.0

    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
        )


@dataclass(frozen=True, eq=False)
class PixelMask:
    """Binary pixel grid stored as a read-only (height, width) bool array."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width):
            raise ValueError(
                f"mask bits shape {bits.shape} does not match (height={self.height}, width={self.width})"
            )
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def zeros(cls, width: int, height: int) -> "PixelMask":
        return cls(width, height, np.zeros((height, width), dtype=bool))

    def count(self) -> int:
        return int(self.bits.sum())

    def is_subset_of(self, other: "PixelMask") -> bool:
        return bool(np.all(~self.bits | other.bits))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PixelMask):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and bool(np.array_equal(self.bits, other.bits))
        )

    def __hash__(self) -> int:
        return hash((self.width, self.height, self.bits.tobytes()))


@dataclass(frozen=True)
class InstanceAnnotation:
    """One instance of the condition quintuple: mask, box, occluders, caption."""

    id: int
    box: BoundingBox
    modal_mask: PixelMask
    amodal_mask: PixelMask
    caption: int
    occluders: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "occluders", tuple(int(o) for o in self.occluders))


@dataclass(frozen=True)
class SceneLayout:
    """Per-scene condition: instances plus the global prompt and geometry."""

    width: int
    height: int
    global_prompt: int
    instances: tuple[InstanceAnnotation, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))

    def instance_ids(self) -> tuple[int, ...]:
        return tuple(inst.id for inst in self.instances)

    def get(self, instance_id: int) -> InstanceAnnotation:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(f"no instance with id {instance_id}")


@dataclass(frozen=True)
class OcclusionGraph:
    """Directed pairwise relation: edge (front, back) means front occludes back."""

    nodes: frozenset[int]
    edges: frozenset[tuple[int, int]]

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", frozenset(int(n) for n in self.nodes))
        object.__setattr__(self, "edges", frozenset((int(a), int(b)) for a, b in self.edges))

    @classmethod
    def from_layout(cls, layout: SceneLayout) -> "OcclusionGraph":
        nodes = frozenset(layout.instance_ids())
        edges = frozenset(
            (front, inst.id) for inst in layout.instances for front in inst.occluders
        )
        return cls(nodes, edges)

    def has_cycle(self) -> bool:
        adjacency: dict[int, list[int]] = {n: [] for n in self.nodes}
        for front, back in self.edges:
            adjacency.setdefault(front, []).append(back)
        WHITE, GRAY, BLACK = 0, 1, 2
        color = {n: WHITE for n in adjacency}
        for start in adjacency:
            if color[start] != WHITE:
                continue
            stack: list[tuple[int, int]] = [(start, 0)]
            color[start] = GRAY
            while stack:
                node, i = stack[-1]
                if i < len(adjacency[node]):
                    stack[-1] = (node, i + 1)
                    nxt = adjacency[node][i]
                    if color[nxt] == GRAY:
                        return True
                    if color[nxt] == WHITE:
                        color[nxt] = GRAY
                        stack.append((nxt, 0))
                else:
                    color[node] = BLACK
                    stack.pop()
        return False


@dataclass
class ValidationReport:
    """Collected findings; an empty errors list means the layout is valid."""

    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __bool__(self) -> bool:
        return self.ok


def validate_layout(layout: SceneLayout) -> ValidationReport:
    """Check every layout invariant and return the findings.

    Errors cover out-of-bounds boxes, duplicate ids, self-occlusion, dangling
    occluder references, mask dimension mismatches, modal masks escaping their
    amodal mask, and amodal masks escaping their box. Cyclic occlusion is a
    warning only: mutual occlusion occurs in real scenes and the compositor is
    well-defined on cycles.
    """
    report = ValidationReport()
    ids = [inst.id for inst in layout.instances]
    known = set(ids)
    if len(known) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        report.errors.append(f"duplicate instance ids {dupes}")

    for inst in layout.instances:
        tag = f"instance {inst.id}"
        if not inst.box.is_valid():
            report.errors.append(f"{tag}: box out of bounds")
        if inst.id in inst.occluders:
            report.errors.append(f"{tag}: self-occlusion")
        for occ in inst.occluders:
            if occ not in known:
                report.errors.append(f"{tag}: dangling occluder id {occ}")
        for name, mask in (("modal", inst.modal_mask), ("amodal", inst.amodal_mask)):
            if mask.width != layout.width or mask.height != layout.height:
                report.errors.append(f"{tag}: {name} mask dimensions do not match scene")
        if (
            inst.modal_mask.bits.shape == inst.amodal_mask.bits.shape
            and not inst.modal_mask.is_subset_of(inst.amodal_mask)
        ):
            report.errors.append(f"{tag}: modal mask not contained in amodal mask")
        if inst.box.is_valid() and inst.amodal_mask.bits.shape == (layout.height, layout.width):
            box_raster = rasterize_box_pixels(inst.box, layout.width, layout.height)
            if not inst.amodal_mask.is_subset_of(box_raster):
                report.errors.append(f"{tag}: amodal mask not contained in box")

    graph = OcclusionGraph.from_layout(layout)
    if graph.has_cycle():
        report.warnings.append("occlusion graph contains a cycle")
    return report


def rasterize_box_pixels(box: BoundingBox, width: int, height: int) -> PixelMask:
    """Pixel-center rasterization of a box with half-open intervals,
    matching the token-grid rule."""
    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    in_x = (cx >= box.x_min) & (cx < box.x_max)
    in_y = (cy >= box.y_min) & (cy < box.y_max)
    return PixelMask(width, height, np.outer(in_y, in_x))


def occluder_set(
    graph: OcclusionGraph, instance_id: int, mode: Literal["direct", "transitive"] = "direct"
) -> set[int]:
    """Return the instances in front of ``instance_id``.

    Direct mode returns the stored front neighbors. Transitive mode returns
    every node that can reach ``instance_id`` along front-to-back edges,
    excluding the node itself even when it is reachable through a cycle.
    """
    if instance_id not in graph.nodes:
        raise KeyError(f"unknown instance id {instance_id}")
    if mode == "direct":
        return {front for front, back in graph.edges if back == instance_id}
    if mode != "transitive":
        raise ValueError(f"mode must be 'direct' or 'transitive', got {mode!r}")
    fronts_of: dict[int, set[int]] = {}
    for front, back in graph.edges:
        fronts_of.setdefault(back, set()).add(front)
    seen: set[int] = set()
    frontier = list(fronts_of.get(instance_id, ()))
    while frontier:
        node = frontier.pop()
        if node in seen:
            continue
        seen.add(node)
        frontier.extend(fronts_of.get(node, ()))
    seen.discard(instance_id)
    return seen


def intersection_region(a: BoundingBox, b: BoundingBox) -> BoundingBox | None:
    """Axis-aligned intersection of two boxes, or None when the overlap has zero area."""
    x_min = max(a.x_min, b.x_min)
    y_min = max(a.y_min, b.y_min)
    x_max = min(a.x_max, b.x_max)
    y_max = min(a.y_max, b.y_max)
    if x_min >= x_max or y_min >= y_max:
        return None
    return BoundingBox(x_min, y_min, x_max, y_max)


def encode_rle(mask: PixelMask) -> str:
    """Row-major binary run-length string: alternating run lengths, 0-run first."""
    flat = mask.bits.reshape(-1)
    n = flat.size
    if n == 0:
        return "0"
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = [0, *boundaries.tolist(), n]
    runs: list[int] = [0] if flat[0] else []
    runs.extend(end - start for start, end in zip(edges[:-1], edges[1:]))
    return ",".join(str(r) for r in runs)


def decode_rle(text: str, width: int, height: int) -> PixelMask:
    """Inverse of :func:`encode_rle`; raises LayoutParseError on malformed input."""
    try:
        runs = [int(part) for part in text.split(",")]
    except ValueError as exc:
        raise LayoutParseError(f"malformed RLE string: {exc}") from exc
    if any(r < 0 for r in runs):
        raise LayoutParseError("malformed RLE string: negative run length")
    total = sum(runs)
    if total != width * height:
        raise LayoutParseError(
            f"RLE run lengths sum to {total}, expected {width * height}"
        )
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return PixelMask(width, height, flat.reshape(height, width))


_SCENE_FIELDS = {"width": int, "height": int, "global_prompt": int, "instances": list}
_INSTANCE_FIELDS = {
    "id": int,
    "box": list,
    "caption": int,
    "occluders": list,
    "modal_mask": str,
    "amodal_mask": str,
}


def parse_layout(text: str) -> SceneLayout:
    """Parse one scene's layout JSON; errors name the offending field."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise LayoutParseError("layout must be a JSON object")
    for name, kind in _SCENE_FIELDS.items():
        if name not in raw:
            raise LayoutParseError(f"missing field {name}")
        if not isinstance(raw[name], kind) or isinstance(raw[name], bool):
            raise LayoutParseError(f"field {name} must be {kind.__name__}")
    width, height = raw["width"], raw["height"]
    if width <= 0 or height <= 0:
        raise LayoutParseError("field width/height must be positive")

    instances = []
    for pos, entry in enumerate(raw["instances"]):
        if not isinstance(entry, dict):
            raise LayoutParseError(f"instances[{pos}] must be an object")
        for name in _INSTANCE_FIELDS:
            if name not in entry:
                raise LayoutParseError(f"missing field {name}")
        box = entry["box"]
        if not (isinstance(box, list) and len(box) == 4 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in box)):
            raise LayoutParseError("field box must be [x_min, y_min, x_max, y_max]")
        if not isinstance(entry["id"], int) or isinstance(entry["id"], bool):
            raise LayoutParseError("field id must be int")
        if not isinstance(entry["caption"], int) or isinstance(entry["caption"], bool):
            raise LayoutParseError("field caption must be int")
        occluders = entry["occluders"]
        if not isinstance(occluders, list) or any(
            not isinstance(v, int) or isinstance(v, bool) for v in occluders
        ):
            raise LayoutParseError("field occluders must be a list of ints")
        masks = {}
        for name in ("modal_mask", "amodal_mask"):
            if not isinstance(entry[name], str):
                raise LayoutParseError(f"field {name} must be an RLE string")
            try:
                masks[name] = decode_rle(entry[name], width, height)
            except LayoutParseError as exc:
                raise LayoutParseError(f"field {name}: {exc}") from exc
        instances.append(
            InstanceAnnotation(
                id=entry["id"],
                box=BoundingBox(*(float(v) for v in box)),
                modal_mask=masks["modal_mask"],
                amodal_mask=masks["amodal_mask"],
                caption=entry["caption"],
                occluders=tuple(occluders),
            )
        )
    return SceneLayout(
        width=width,
        height=height,
        global_prompt=raw["global_prompt"],
        instances=tuple(instances),
    )


def serialize_layout(layout: SceneLayout) -> str:
    """Serialize to the layout JSON schema; inverse of :func:`parse_layout`."""
    payload = {
        "width": layout.width,
        "height": layout.height,
        "global_prompt": layout.global_prompt,
        "instances": [
            {
                "id": inst.id,
                "box": [inst.box.x_min, inst.box.y_min, inst.box.x_max, inst.box.y_max],
                "caption": inst.caption,
                "occluders": list(inst.occluders),
                "modal_mask": encode_rle(inst.modal_mask),
                "amodal_mask": encode_rle(inst.amodal_mask),
            }
            for inst in layout.instances
        ],
    }
    return json.dumps(payload, indent=2)
