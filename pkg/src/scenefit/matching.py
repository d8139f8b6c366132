"""Turn feature-descriptor arrays from an upstream extractor into 3D-to-2D
correspondences, score how well an object is actually present in the scene
image, and filter out neglected objects.

Descriptor extraction itself happens upstream; this module only consumes
descriptor arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput
from .pnp import Correspondence, RansacResult

DEFAULT_NEGLECT_THRESHOLD = 0.5


@dataclass
class DescriptorMap:
    """Descriptors sampled on an image.

    For object renders, each entry carries the 3D object-frame point it back-
    projects to (points3d) and a foreground flag; scene-image maps carry only
    pixels and descriptors.
    """

    pixels: np.ndarray                 # (N, 2)
    descriptors: np.ndarray            # (N, d)
    points3d: np.ndarray | None = None     # (N, 3) for render maps
    foreground: np.ndarray | None = None   # (N,) bool, render maps only

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.shape[1] != 2:
            raise ValueError("pixels must be (N, 2)")
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != self.pixels.shape[0]:
            raise ValueError("descriptors must be (N, d) with one row per pixel")
        if self.descriptors.shape[1] < 1:
            raise ValueError("descriptor dimension must be >= 1")
        if not np.isfinite(self.descriptors).all() or not np.isfinite(self.pixels).all():
            raise ValueError("descriptor map contains non-finite values")
        if self.points3d is not None:
            self.points3d = np.asarray(self.points3d, dtype=np.float64)
            if self.points3d.shape != (len(self.pixels), 3):
                raise ValueError("points3d must be (N, 3)")
        if self.foreground is not None:
            self.foreground = np.asarray(self.foreground, dtype=bool)
            if self.foreground.shape != (len(self.pixels),):
                raise ValueError("foreground mask must be (N,)")

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass
class MatchReport:
    """Per-object matching outcome used by neglect filtering."""

    object_id: str
    correspondences: list[Correspondence]
    matching_score: float
    neglected: bool


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return X / safe


def match_descriptors(render_maps: list[DescriptorMap],
                      scene_map: DescriptorMap) -> list[Correspondence]:
    """Match every foreground render descriptor to its cosine-nearest scene
    descriptor.

    Render entries must carry 3D backprojections; multiple render views are
    pooled into one candidate set. Ties break to the lowest scene index.
    Returns one Correspondence per foreground render entry: (3D object point,
    2D scene pixel, cosine similarity).
    """
    if not render_maps:
        raise EmptyInput("no render descriptor maps given")
    if len(scene_map) == 0:
        raise EmptyInput("scene descriptor map is empty")
    dim = scene_map.dim
    pooled_desc = []
    pooled_pts = []
    for rm in render_maps:
        if rm.dim != dim:
            raise DimensionMismatch(f"render descriptors are {rm.dim}-d, scene is {dim}-d")
        if rm.points3d is None:
            raise ValueError("render maps need 3D backprojections (points3d)")
        keep = rm.foreground if rm.foreground is not None else np.ones(len(rm), dtype=bool)
        pooled_desc.append(rm.descriptors[keep])
        pooled_pts.append(rm.points3d[keep])
    Q = np.vstack(pooled_desc)
    P = np.vstack(pooled_pts)
    if len(Q) == 0:
        raise EmptyInput("all render entries are background-masked")

    sims = _unit_rows(Q) @ _unit_rows(scene_map.descriptors).T
    best = sims.argmax(axis=1)  # argmax takes the first maximum: lowest index wins
    return [
        Correspondence(object_point=P[i],
                       image_point=scene_map.pixels[best[i]],
                       similarity=float(np.clip(sims[i, best[i]], -1.0, 1.0)))
        for i in range(len(Q))
    ]


def matching_score(correspondences: list[Correspondence],
                   ransac_result: RansacResult | None) -> float:
    """Median cosine similarity over the RANSAC inlier correspondences.

    A missing result or an empty inlier set scores -1 (worst): no consensus
    means the object is effectively absent.
    """
    if ransac_result is None or not ransac_result.inlier_indices:
        return -1.0
    sims = [correspondences[i].similarity for i in ransac_result.inlier_indices]
    return float(np.median(sims))


def filter_neglect(reports: list[MatchReport],
                   threshold: float = DEFAULT_NEGLECT_THRESHOLD) -> tuple[list[str], list[str]]:
    """Split object ids into (accepted, rejected) by matching score.

    An object is accepted iff its score is >= threshold; a scene image is
    usable iff the rejected list is empty.
    """
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [-1, 1]")
    accepted = [r.object_id for r in reports if r.matching_score >= threshold]
    rejected = [r.object_id for r in reports if r.matching_score < threshold]
    return accepted, rejected
