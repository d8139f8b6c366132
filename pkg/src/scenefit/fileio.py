"""Versioned file formats: scene and solution JSON documents plus the binary
descriptor-map sidecar.

All numeric JSON fields round-trip losslessly (Python's float repr is the
shortest exact decimal form); writers sort keys so identical data produces
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import jsonschema

from .errors import SchemaError
from .geom import CameraIntrinsics, Plane, RigidTransform
from .joint import SceneObject, SceneSolution
from .matching import DescriptorMap
from .pnp import Correspondence

FORMAT_VERSION = "1"

_TRANSFORM_SCHEMA = {
    "type": "object",
    "required": ["rotation_wxyz", "translation"],
    "properties": {
        "rotation_wxyz": {"type": "array", "items": {"type": "number"},
                          "minItems": 4, "maxItems": 4},
        "translation": {"type": "array", "items": {"type": "number"},
                        "minItems": 3, "maxItems": 3},
    },
}

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCENE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "camera", "objects"],
    "properties": {
        "version": {"const": FORMAT_VERSION},
        "description": {"type": "string"},
        "camera": {
            "type": "object",
            "required": ["fx", "fy", "cx", "cy"],
            "properties": {
                "fx": {"type": "number", "exclusiveMinimum": 0},
                "fy": {"type": "number", "exclusiveMinimum": 0},
                "cx": {"type": "number"},
                "cy": {"type": "number"},
                "skew": {"type": "number"},
            },
        },
        "objects": {
            "type": "array",
            "minItems": 0,
            "items": {
                "type": "object",
                "required": ["id", "keypoints", "bbox_corners", "bottom_indices"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "keypoints": {"type": "array", "items": _VEC3, "minItems": 1},
                    "bbox_corners": {"type": "array", "items": _VEC3,
                                     "minItems": 8, "maxItems": 8},
                    "bottom_indices": {
                        "type": "array",
                        "items": {"type": "integer", "minimum": 0, "maximum": 7},
                        "minItems": 4, "maxItems": 4,
                    },
                    "mesh_path": {"type": ["string", "null"]},
                },
            },
        },
        "correspondences": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["object_point", "image_point"],
                    "properties": {
                        "object_point": _VEC3,
                        "image_point": {"type": "array", "items": {"type": "number"},
                                        "minItems": 2, "maxItems": 2},
                        "similarity": {"type": "number", "minimum": -1, "maximum": 1},
                    },
                },
            },
        },
        "descriptor_maps": {
            "type": "object",
            "required": ["scene", "objects"],
            "properties": {
                "scene": {"type": "string"},
                "objects": {
                    "type": "object",
                    "additionalProperties": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
        "ground_truth": {"type": "object"},
    },
}

TRUTH_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "transforms"],
    "properties": {
        "version": {"const": FORMAT_VERSION},
        "transforms": {"type": "object", "additionalProperties": _TRANSFORM_SCHEMA},
        "world_transforms": {"type": "object", "additionalProperties": _TRANSFORM_SCHEMA},
        "camera_from_world": _TRANSFORM_SCHEMA,
        "inlier_labels": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "boolean"}},
        },
        "scene_extent": {"type": "number"},
    },
}

SOLUTION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "transforms", "floor"],
    "properties": {
        "version": {"const": FORMAT_VERSION},
        "transforms": {"type": "object", "additionalProperties": _TRANSFORM_SCHEMA},
        "floor": {"type": "array", "items": {"type": "number"},
                  "minItems": 4, "maxItems": 4},
        "loss_trace": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"},
                      "minItems": 5, "maxItems": 5},
        },
        "inliers": {
            "type": "object",
            "additionalProperties": {"type": "array", "items": {"type": "integer"}},
        },
        "matching_scores": {"type": "object", "additionalProperties": {"type": "number"}},
        "neglected": {"type": "array", "items": {"type": "string"}},
        "diverged": {"type": "boolean"},
    },
}


def _validate(doc: dict, schema: dict, what: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"invalid {what}: {exc.message}") from exc


def _load_json(path: str | Path, schema: dict, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise SchemaError(f"{what} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{what} file is not valid JSON: {exc}") from exc
    _validate(doc, schema, what)
    return doc


def _dump_json(doc: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- transforms and primitives ----------------------------------------------------


def transform_to_dict(tr: RigidTransform) -> dict:
    return {
        "rotation_wxyz": [float(x) for x in tr.rotation],
        "translation": [float(x) for x in tr.translation],
    }


def transform_from_dict(doc: dict, what: str = "transform") -> RigidTransform:
    q = np.array(doc["rotation_wxyz"], dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise SchemaError(f"{what}: quaternion is not unit length")
    return RigidTransform(q, np.array(doc["translation"], dtype=np.float64))


def _object_to_dict(obj: SceneObject) -> dict:
    indices = []
    for v in obj.bottom_vertices:
        hits = np.flatnonzero(np.all(np.abs(obj.bbox_corners - v) < 1e-12, axis=1))
        indices.append(int(hits[0]))
    return {
        "id": obj.id,
        "keypoints": obj.keypoints.tolist(),
        "bbox_corners": obj.bbox_corners.tolist(),
        "bottom_indices": indices,
        "mesh_path": obj.mesh_path,
    }


def _object_from_dict(doc: dict) -> SceneObject:
    corners = np.array(doc["bbox_corners"], dtype=np.float64)
    return SceneObject(
        id=doc["id"],
        keypoints=np.array(doc["keypoints"], dtype=np.float64),
        bbox_corners=corners,
        bottom_vertices=corners[doc["bottom_indices"]],
        mesh_path=doc.get("mesh_path"),
    )


def _correspondence_to_dict(c: Correspondence) -> dict:
    return {
        "object_point": [float(x) for x in c.object_point],
        "image_point": [float(x) for x in c.image_point],
        "similarity": float(c.similarity),
    }


def _correspondence_from_dict(doc: dict) -> Correspondence:
    return Correspondence(
        object_point=np.array(doc["object_point"], dtype=np.float64),
        image_point=np.array(doc["image_point"], dtype=np.float64),
        similarity=float(doc.get("similarity", 1.0)),
    )


# --- scene files -------------------------------------------------------------------


def scene_to_dict(description: str, camera: CameraIntrinsics, objects: list[SceneObject],
                  correspondences: dict[str, list[Correspondence]] | None = None,
                  descriptor_maps: tuple[str, dict[str, list[str]]] | None = None,
                  ground_truth: dict | None = None) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "description": description,
        "camera": {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx,
                   "cy": camera.cy, "skew": camera.skew},
        "objects": [_object_to_dict(o) for o in objects],
    }
    if correspondences is not None:
        doc["correspondences"] = {
            oid: [_correspondence_to_dict(c) for c in matches]
            for oid, matches in correspondences.items()
        }
    if descriptor_maps is not None:
        scene_path, object_paths = descriptor_maps
        doc["descriptor_maps"] = {"scene": scene_path, "objects": object_paths}
    if ground_truth is not None:
        doc["ground_truth"] = ground_truth
    return doc


def write_scene_file(path: str | Path, **kwargs) -> None:
    doc = scene_to_dict(**kwargs)
    _validate(doc, SCENE_SCHEMA, "scene file")
    _dump_json(doc, path)


def read_scene_file(path: str | Path):
    """Parse and validate a scene file.

    Returns (description, camera, objects, correspondences or None,
    descriptor_map paths or None, ground_truth dict or None). Descriptor map
    paths are resolved relative to the scene file's directory.
    """
    doc = _load_json(path, SCENE_SCHEMA, "scene file")
    camera = CameraIntrinsics(fx=doc["camera"]["fx"], fy=doc["camera"]["fy"],
                              cx=doc["camera"]["cx"], cy=doc["camera"]["cy"],
                              skew=doc["camera"].get("skew", 0.0))
    objects = [_object_from_dict(o) for o in doc["objects"]]
    correspondences = None
    if "correspondences" in doc:
        correspondences = {
            oid: [_correspondence_from_dict(c) for c in matches]
            for oid, matches in doc["correspondences"].items()
        }
    descriptor_paths = None
    if "descriptor_maps" in doc:
        base = Path(path).parent
        dm = doc["descriptor_maps"]
        scene_path = base / dm["scene"]
        object_paths = {oid: [base / p for p in paths] for oid, paths in dm["objects"].items()}
        missing = [str(p) for p in [scene_path, *(q for ps in object_paths.values() for q in ps)]
                   if not Path(p).exists()]
        if missing:
            raise SchemaError(f"referenced descriptor maps not found: {missing}")
        descriptor_paths = (scene_path, object_paths)
    return (doc.get("description", ""), camera, objects, correspondences,
            descriptor_paths, doc.get("ground_truth"))


# --- ground-truth sidecar ----------------------------------------------------------


def truth_to_dict(transforms: dict[str, RigidTransform],
                  world_transforms: dict[str, RigidTransform] | None = None,
                  camera_from_world: RigidTransform | None = None,
                  inlier_labels: dict[str, np.ndarray] | None = None,
                  scene_extent: float | None = None) -> dict:
    doc = {
        "version": FORMAT_VERSION,
        "transforms": {k: transform_to_dict(v) for k, v in transforms.items()},
    }
    if world_transforms is not None:
        doc["world_transforms"] = {k: transform_to_dict(v) for k, v in world_transforms.items()}
    if camera_from_world is not None:
        doc["camera_from_world"] = transform_to_dict(camera_from_world)
    if inlier_labels is not None:
        doc["inlier_labels"] = {k: [bool(b) for b in v] for k, v in inlier_labels.items()}
    if scene_extent is not None:
        doc["scene_extent"] = float(scene_extent)
    return doc


def write_truth_file(path: str | Path, **kwargs) -> None:
    doc = truth_to_dict(**kwargs)
    _validate(doc, TRUTH_SCHEMA, "ground-truth file")
    _dump_json(doc, path)


def read_truth_file(path: str | Path) -> dict:
    doc = _load_json(path, TRUTH_SCHEMA, "ground-truth file")
    return truth_from_dict(doc)


def truth_from_dict(doc: dict) -> dict:
    _validate(doc, TRUTH_SCHEMA, "ground truth")
    out = {
        "transforms": {k: transform_from_dict(v, f"truth transform {k!r}")
                       for k, v in doc["transforms"].items()},
    }
    if "world_transforms" in doc:
        out["world_transforms"] = {k: transform_from_dict(v)
                                   for k, v in doc["world_transforms"].items()}
    if "camera_from_world" in doc:
        out["camera_from_world"] = transform_from_dict(doc["camera_from_world"])
    if "inlier_labels" in doc:
        out["inlier_labels"] = {k: np.array(v, dtype=bool)
                                for k, v in doc["inlier_labels"].items()}
    if "scene_extent" in doc:
        out["scene_extent"] = float(doc["scene_extent"])
    return out


# --- solution files -----------------------------------------------------------------


def solution_to_dict(solution: SceneSolution) -> dict:
    return {
        "version": FORMAT_VERSION,
        "transforms": {k: transform_to_dict(v) for k, v in solution.transforms.items()},
        "floor": [float(x) for x in solution.floor.coeffs],
        "loss_trace": [[float(x) for x in row] for row in solution.loss_trace],
        "inliers": {k: [int(i) for i in v] for k, v in solution.inliers.items()},
        "matching_scores": {k: float(v) for k, v in solution.matching_scores.items()},
        "neglected": list(solution.neglected),
        "diverged": bool(solution.diverged),
    }


def write_solution_file(path: str | Path, solution: SceneSolution) -> None:
    doc = solution_to_dict(solution)
    _validate(doc, SOLUTION_SCHEMA, "solution file")
    for oid, tr in doc["transforms"].items():
        if abs(np.linalg.norm(tr["rotation_wxyz"]) - 1.0) > 1e-6:
            raise SchemaError(f"solution transform {oid!r}: quaternion not unit on write")
    _dump_json(doc, path)


def read_solution_file(path: str | Path) -> SceneSolution:
    doc = _load_json(path, SOLUTION_SCHEMA, "solution file")
    transforms = {k: transform_from_dict(v, f"solution transform {k!r}")
                  for k, v in doc["transforms"].items()}
    return SceneSolution(
        transforms=transforms,
        floor=Plane(np.array(doc["floor"], dtype=np.float64)),
        loss_trace=[tuple(row) for row in doc.get("loss_trace", [])],
        inliers={k: list(v) for k, v in doc.get("inliers", {}).items()},
        matching_scores=dict(doc.get("matching_scores", {})),
        neglected=list(doc.get("neglected", [])),
        diverged=bool(doc.get("diverged", False)),
    )


# --- descriptor-map sidecar ----------------------------------------------------------

_DMAP_MAGIC = b"SFDM"
_DMAP_VERSION = 1
_FLAG_POINTS3D = 1
_FLAG_FOREGROUND = 2


def write_descriptor_map(path: str | Path, dmap: DescriptorMap) -> None:
    """Binary sidecar: header (magic, version, count, dim, flags as
    little-endian uint32) followed by flat little-endian float32 arrays."""
    flags = 0
    if dmap.points3d is not None:
        flags |= _FLAG_POINTS3D
    if dmap.foreground is not None:
        flags |= _FLAG_FOREGROUND
    with open(path, "wb") as fh:
        fh.write(_DMAP_MAGIC)
        fh.write(struct.pack("<IIII", _DMAP_VERSION, len(dmap), dmap.dim, flags))
        fh.write(dmap.pixels.astype("<f4").tobytes())
        if dmap.points3d is not None:
            fh.write(dmap.points3d.astype("<f4").tobytes())
        if dmap.foreground is not None:
            fh.write(dmap.foreground.astype(np.uint8).tobytes())
        fh.write(dmap.descriptors.astype("<f4").tobytes())


def read_descriptor_map(path: str | Path) -> DescriptorMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _DMAP_MAGIC:
        raise SchemaError(f"{path}: not a descriptor-map file")
    version, count, dim, flags = struct.unpack_from("<IIII", data, 4)
    if version != _DMAP_VERSION:
        raise SchemaError(f"{path}: unsupported descriptor-map version {version}")
    off = 20
    def take(dtype, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off)
        off += arr.nbytes
        return arr.reshape(shape)
    pixels = take("<f4", (count, 2)).astype(np.float64)
    points3d = take("<f4", (count, 3)).astype(np.float64) if flags & _FLAG_POINTS3D else None
    foreground = take(np.uint8, (count,)).astype(bool) if flags & _FLAG_FOREGROUND else None
    descriptors = take("<f4", (count, dim)).astype(np.float64)
    return DescriptorMap(pixels=pixels, descriptors=descriptors,
                         points3d=points3d, foreground=foreground)
