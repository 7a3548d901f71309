"""Occlusion-aware layout-to-image toy pipeline.

Composites per-instance feature layers with density/transmittance weights
ordered by an explicit occlusion graph, trains a small rectified-flow
transformer on procedurally generated layered-shape scenes, and scores
generations with occlusion-aware metrics.
"""

__version__ = "0.1.0"
