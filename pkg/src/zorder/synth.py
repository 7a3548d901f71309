"""Procedural layered-shapes scenes with exact ground truth.

Each scene stacks 1-6 colored rectangles/circles with unique depth ranks on a
gray background. Painter's-algorithm rendering (far to near) yields the image
and the modal (visible) masks; a shape's own raster is its amodal mask.
Occlusion edges connect nearer shapes to the farther shapes their amodal
masks intersect, so the graph is acyclic by construction and consistent with
depth. Colors are unique within a scene, which lets evaluation segment the
render exactly by palette lookup.

Caption ids encode (color, kind); the global prompt id selects one of two
background shades.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .layout import (
    BoundingBox,
    InstanceAnnotation,
    OcclusionGraph,
    PixelMask,
    SceneLayout,
    parse_layout,
    serialize_layout,
)

__all__ = [
    "PALETTE",
    "BACKGROUNDS",
    "KINDS",
    "caption_id",
    "caption_color",
    "caption_kind",
    "palette_table",
    "ShapeSpec",
    "SyntheticScene",
    "GenConfig",
    "DatasetError",
    "generate_scene",
    "render_scene",
    "rasterize_shape",
    "derive_occlusion_edges",
    "export_dataset",
    "import_dataset",
]

# Near-corner RGB palette: pairwise distances >= 205, and every color stays
# more than the segmentation threshold away from both background shades.
PALETTE: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("black", (25, 25, 25)),
    ("red", (230, 25, 25)),
    ("green", (25, 230, 25)),
    ("blue", (25, 25, 230)),
    ("yellow", (230, 230, 25)),
    ("magenta", (230, 25, 230)),
    ("cyan", (25, 230, 230)),
    ("white", (230, 230, 230)),
)
BACKGROUNDS: tuple[tuple[int, int, int], ...] = ((110, 110, 110), (150, 150, 150))
KINDS: tuple[str, str] = ("rectangle", "circle")


def caption_id(color_index: int, kind: str) -> int:
    return color_index * len(KINDS) + KINDS.index(kind)


def caption_color(caption: int) -> tuple[int, int, int]:
    return PALETTE[caption // len(KINDS)][1]


def caption_kind(caption: int) -> str:
    return KINDS[caption % len(KINDS)]


def palette_table() -> dict:
    """The palette JSON payload: caption id <-> (color, kind), plus prompts."""
    return {
        "captions": [
            {
                "id": caption_id(ci, kind),
                "color": name,
                "kind": kind,
                "rgb": list(rgb),
            }
            for ci, (name, rgb) in enumerate(PALETTE)
            for kind in KINDS
        ],
        "prompts": [{"id": pi, "background": list(rgb)} for pi, rgb in enumerate(BACKGROUNDS)],
    }


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color_index: int
    box: BoundingBox
    depth_rank: int  # unique within a scene; smaller = nearer

    @property
    def caption(self) -> int:
        return caption_id(self.color_index, self.kind)


@dataclass(eq=False)
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) uint8
    layout: SceneLayout
    shapes: tuple[ShapeSpec, ...] = ()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return bool(np.array_equal(self.image, other.image)) and self.layout == other.layout


@dataclass(frozen=True)
class GenConfig:
    n_min: int = 2
    n_max: int = 4
    min_overlap_pairs: int = 1
    width: int = 32
    height: int = 32
    min_extent: float = 0.25
    max_extent: float = 0.6

    def __post_init__(self) -> None:
        if not 1 <= self.n_min <= self.n_max <= 6:
            raise ValueError("need 1 <= n_min <= n_max <= 6")
        if self.min_overlap_pairs < 0:
            raise ValueError("min_overlap_pairs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class DatasetError(RuntimeError):
    pass


def rasterize_shape(shape: ShapeSpec, width: int, height: int) -> PixelMask:
    """Pixel-center rasterization; circles inscribe their box, so every shape
    raster is contained in its box raster."""
    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    box = shape.box
    if shape.kind == "rectangle":
        in_x = (cx >= box.x_min) & (cx < box.x_max)
        in_y = (cy >= box.y_min) & (cy < box.y_max)
        bits = np.outer(in_y, in_x)
    elif shape.kind == "circle":
        center_x = (box.x_min + box.x_max) / 2
        center_y = (box.y_min + box.y_max) / 2
        radius = min(box.x_max - box.x_min, box.y_max - box.y_min) / 2
        dist2 = (cx[None, :] - center_x) ** 2 + (cy[:, None] - center_y) ** 2
        bits = dist2 <= radius * radius
    else:
        raise ValueError(f"unknown shape kind {shape.kind!r}")
    return PixelMask(width, height, bits)


def render_scene(
    shapes: Sequence[ShapeSpec], width: int = 32, height: int = 32, background_id: int = 0
) -> tuple[np.ndarray, list[PixelMask]]:
    """Painter's-algorithm render: paint far-to-near over the background.

    Returns the image and the modal masks aligned with ``shapes``; a pixel's
    modal owner is the nearest shape covering it.
    """
    image = np.empty((height, width, 3), dtype=np.uint8)
    image[:] = BACKGROUNDS[background_id]
    owner = np.full((height, width), -1, dtype=np.int64)
    for idx in sorted(range(len(shapes)), key=lambda k: -shapes[k].depth_rank):
        bits = rasterize_shape(shapes[idx], width, height).bits
        image[bits] = PALETTE[shapes[idx].color_index][1]
        owner[bits] = idx
    modal = [PixelMask(width, height, owner == idx) for idx in range(len(shapes))]
    return image, modal


def derive_occlusion_edges(
    shapes: Sequence[ShapeSpec], width: int = 32, height: int = 32
) -> OcclusionGraph:
    """Edge (i, j) iff shape i is nearer and their amodal rasters intersect."""
    masks = [rasterize_shape(shape, width, height).bits for shape in shapes]
    edges = set()
    for i, a in enumerate(shapes):
        for j, b in enumerate(shapes):
            if a.depth_rank < b.depth_rank and np.any(masks[i] & masks[j]):
                edges.add((i, j))
    return OcclusionGraph(frozenset(range(len(shapes))), frozenset(edges))


def _overlapping_box_pairs(shapes: Sequence[ShapeSpec]) -> int:
    count = 0
    for i in range(len(shapes)):
        for j in range(i + 1, len(shapes)):
            a, b = shapes[i].box, shapes[j].box
            if min(a.x_max, b.x_max) > max(a.x_min, b.x_min) and min(a.y_max, b.y_max) > max(
                a.y_min, b.y_min
            ):
                count += 1
    return count


def generate_scene(seed: int, config: GenConfig = GenConfig()) -> SyntheticScene:
    """Deterministically draw, render, and annotate one scene.

    Rejection-samples shape sets until at least ``min_overlap_pairs`` amodal
    box pairs overlap and every shape rasterizes to at least one pixel.
    """
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        n = int(rng.integers(config.n_min, config.n_max + 1))
        colors = rng.choice(len(PALETTE), size=n, replace=False)
        kinds = [KINDS[int(k)] for k in rng.integers(0, len(KINDS), size=n)]
        ranks = rng.permutation(n)
        shapes = []
        for i in range(n):
            w = float(rng.uniform(config.min_extent, config.max_extent))
            h = float(rng.uniform(config.min_extent, config.max_extent))
            x0 = float(rng.uniform(0.0, 1.0 - w))
            y0 = float(rng.uniform(0.0, 1.0 - h))
            shapes.append(
                ShapeSpec(
                    kind=kinds[i],
                    color_index=int(colors[i]),
                    box=BoundingBox(x0, y0, x0 + w, y0 + h),
                    depth_rank=int(ranks[i]),
                )
            )
        background_id = int(rng.integers(0, len(BACKGROUNDS)))
        if _overlapping_box_pairs(shapes) < config.min_overlap_pairs:
            continue
        amodal = [rasterize_shape(s, config.width, config.height) for s in shapes]
        if any(mask.count() == 0 for mask in amodal):
            continue
        image, modal = render_scene(shapes, config.width, config.height, background_id)
        graph = derive_occlusion_edges(shapes, config.width, config.height)
        instances = tuple(
            InstanceAnnotation(
                id=i,
                box=shapes[i].box,
                modal_mask=modal[i],
                amodal_mask=amodal[i],
                caption=shapes[i].caption,
                occluders=tuple(sorted(front for front, back in graph.edges if back == i)),
            )
            for i in range(n)
        )
        layout = SceneLayout(
            width=config.width, height=config.height, global_prompt=background_id, instances=instances
        )
        return SyntheticScene(image=image, layout=layout, shapes=tuple(shapes))
    raise DatasetError(f"rejection budget exhausted for seed {seed} with {config}")


def export_dataset(scenes: Sequence[SyntheticScene], directory: str | Path, config: GenConfig | None = None, seed: int | None = None) -> None:
    """Write one layout JSON and one PNG per scene plus palette and manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for idx, scene in enumerate(scenes):
        (directory / f"scene_{idx}.json").write_text(serialize_layout(scene.layout))
        Image.fromarray(scene.image, mode="RGB").save(directory / f"scene_{idx}.png")
    (directory / "palette.json").write_text(json.dumps(palette_table(), indent=2))
    manifest = {
        "scene_ids": list(range(len(scenes))),
        "count": len(scenes),
        "config": config.to_dict() if config is not None else None,
        "seed": seed,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def import_dataset(directory: str | Path) -> list[SyntheticScene]:
    """Read back an exported dataset; errors name the offending scene."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest: {exc}") from exc
    scenes = []
    for scene_id in manifest["scene_ids"]:
        json_path = directory / f"scene_{scene_id}.json"
        png_path = directory / f"scene_{scene_id}.png"
        for path in (json_path, png_path):
            if not path.exists():
                raise DatasetError(f"scene {scene_id}: missing file {path.name}")
        try:
            layout = parse_layout(json_path.read_text())
        except Exception as exc:
            raise DatasetError(f"scene {scene_id}: {exc}") from exc
        with Image.open(png_path) as img:
            image = np.asarray(img.convert("RGB"))
        if image.shape != (layout.height, layout.width, 3):
            raise DatasetError(f"scene {scene_id}: image size does not match layout")
        scenes.append(SyntheticScene(image=image, layout=layout))
    if len(scenes) != manifest.get("count", len(scenes)):
        raise DatasetError("manifest count does not match scene list")
    return scenes
