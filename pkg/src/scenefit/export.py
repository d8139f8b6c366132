"""Static exports of a solved scene: OBJ geometry and a two-view SVG preview."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .errors import MissingTransform, SceneFitError
from .geom import CameraIntrinsics, Plane, RigidTransform, project_points
from .joint import SceneObject, SceneSolution

# Quad faces of an 8-corner box in the canonical order produced by
# aabb_corners: bottom ring 0..3, then the top ring 4..7 above it.
_BOX_QUADS = [
    (0, 3, 2, 1),  # bottom, outward normal down
    (4, 5, 6, 7),  # top
    (0, 1, 5, 4),
    (1, 2, 6, 5),
    (2, 3, 7, 6),
    (3, 0, 4, 7),
]


def color_for_id(object_id: str) -> str:
    """Deterministic per-id color from a hash of the id."""
    digest = hashlib.md5(object_id.encode("utf-8")).digest()
    hue = digest[0] / 255.0
    # fixed saturation/value; convert HSV -> RGB
    i = int(hue * 6.0) % 6
    f = hue * 6.0 - int(hue * 6.0)
    v, s = 0.85, 0.65
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return "#{:02x}{:02x}{:02x}".format(*(int(round(255 * c)) for c in rgb))


def _plane_basis(plane: Plane) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(origin, e1, e2): an orthonormal in-plane frame."""
    n = plane.normal
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = ref - (ref @ n) * n
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return -plane.offset * n, e1, e2


def _floor_quad(objects: list[SceneObject], solution: SceneSolution) -> np.ndarray:
    """A quad on the floor plane covering the scene footprint with margin."""
    pts = np.vstack([solution.transforms[o.id].apply(o.bbox_corners) for o in objects])
    origin, e1, e2 = _plane_basis(solution.floor)
    rel = pts - origin
    a, b = rel @ e1, rel @ e2
    ca, cb = (a.min() + a.max()) / 2.0, (b.min() + b.max()) / 2.0
    half = 0.75 * max(a.max() - a.min(), b.max() - b.min(), 1e-6)
    quad = []
    for sa, sb in [(-1, -1), (1, -1), (1, 1), (-1, 1)]:
        quad.append(origin + (ca + sa * half) * e1 + (cb + sb * half) * e2)
    return np.array(quad)


def _load_obj_mesh(path: Path) -> tuple[np.ndarray, list[list[int]]]:
    """Minimal OBJ reader: vertex positions and faces (vertex indices only)."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v" and len(parts) >= 4:
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                faces.append([i - 1 if i > 0 else len(vertices) + i for i in idx])
    if not vertices:
        raise SceneFitError(f"mesh {path} has no vertices")
    return np.array(vertices, dtype=np.float64), faces


def write_obj(path: str | Path, objects: list[SceneObject], solution: SceneSolution,
              mesh_root: str | Path | None = None) -> None:
    """World-frame OBJ: one named group per object (bbox, plus the referenced
    mesh when the object has one) and a floor quad group."""
    for obj in objects:
        if obj.id not in solution.transforms:
            raise MissingTransform(f"solution lacks a transform for {obj.id!r}")
    lines = ["# scenefit export"]
    offset = 0

    def emit(group: str, verts: np.ndarray, faces: list[tuple[int, ...]] | list[list[int]]):
        nonlocal offset
        lines.append(f"g {group}")
        for v in verts:
            lines.append("v {:.17g} {:.17g} {:.17g}".format(*v))
        for face in faces:
            lines.append("f " + " ".join(str(i + 1 + offset) for i in face))
        offset += len(verts)

    for obj in objects:
        tr = solution.transforms[obj.id]
        emit(obj.id, tr.apply(obj.bbox_corners), _BOX_QUADS)
        if obj.mesh_path:
            mesh_file = Path(mesh_root or ".") / obj.mesh_path
            if not mesh_file.exists():
                raise SceneFitError(f"mesh path {mesh_file} for {obj.id!r} not found")
            mverts, mfaces = _load_obj_mesh(mesh_file)
            emit(f"{obj.id}.mesh", tr.apply(mverts), mfaces)

    emit("floor", _floor_quad(objects, solution), [(0, 1, 2, 3)])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _hull2d(points: np.ndarray) -> np.ndarray:
    """Convex hull (counter-clockwise) of 2D points, monotone chain."""
    pts = np.unique(np.round(points, 9), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def build(seq):
        out: list[np.ndarray] = []
        for p in seq:
            while len(out) >= 2 and np.cross(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = build(pts)
    upper = build(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _svg_polygon(points: np.ndarray, fill: str, cls: str, opacity: float = 0.75) -> str:
    coords = " ".join(f"{p[0]:.3f},{p[1]:.3f}" for p in points)
    return (f'<polygon class="{cls}" points="{coords}" fill="{fill}" '
            f'fill-opacity="{opacity:.2f}" stroke="#222" stroke-width="1"/>')


def write_svg(path: str | Path, objects: list[SceneObject], solution: SceneSolution,
              camera: CameraIntrinsics, view_size: float = 400.0) -> None:
    """Two side-by-side views: an orthographic top-down projection onto the
    floor plane and the camera's perspective view. Each object is one convex
    polygon per view, colored deterministically by id."""
    for obj in objects:
        if obj.id not in solution.transforms:
            raise MissingTransform(f"solution lacks a transform for {obj.id!r}")

    floor_quad = _floor_quad(objects, solution)
    origin, e1, e2 = _plane_basis(solution.floor)

    def top_project(pts: np.ndarray) -> np.ndarray:
        rel = pts - origin
        return np.column_stack([rel @ e1, rel @ e2])

    def persp_project(pts: np.ndarray) -> np.ndarray | None:
        uv, depth = project_points(camera, RigidTransform.identity(), pts)
        if (depth <= 1e-6).any():
            return None
        return uv

    views = []
    for name, proj in [("top", top_project), ("perspective", persp_project)]:
        polys = []
        floor_2d = proj(floor_quad)
        if floor_2d is not None:
            polys.append(("floor", "#d9d2c4", floor_2d))
        for obj in objects:
            corners = solution.transforms[obj.id].apply(obj.bbox_corners)
            pts2 = proj(corners)
            if pts2 is None:
                continue
            polys.append(("object", color_for_id(obj.id), _hull2d(pts2)))
        views.append((name, polys))

    # normalize each view into a view_size box with a shared margin
    margin = 12.0
    groups = []
    for col, (name, polys) in enumerate(views):
        all_pts = np.vstack([p for _, _, p in polys]) if polys else np.zeros((1, 2))
        lo, hi = all_pts.min(axis=0), all_pts.max(axis=0)
        span = max(float((hi - lo).max()), 1e-6)
        scale = (view_size - 2 * margin) / span
        shapes = []
        for cls, color, pts in polys:
            local = (pts - lo) * scale + margin
            local[:, 1] = view_size - local[:, 1]  # y up in the drawing
            shapes.append(_svg_polygon(local, color, cls))
        tx = col * (view_size + margin)
        label = (f'<text x="{margin:.1f}" y="{margin + 4:.1f}" '
                 f'font-size="12" fill="#444">{name}</text>')
        groups.append(f'<g transform="translate({tx:.1f},0)">{label}' + "".join(shapes) + "</g>")

    width = 2 * view_size + margin
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
           f'height="{view_size:.0f}" viewBox="0 0 {width:.0f} {view_size:.0f}">'
           + "".join(groups) + "</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg + "\n")
