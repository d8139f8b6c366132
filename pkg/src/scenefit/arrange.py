"""Scene-level orchestration: the full per-scene solve (match -> RANSAC ->
joint refinement), iterative merging for many objects, and the uniform /
circular baseline layout generators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import AllObjectsNeglected, EmptyInput, MissingTransform, NoConsensus, \
    NoSolution, TooFewCorrespondences
from .geom import CameraIntrinsics, Plane, RigidTransform, fit_plane, quat_from_axis_angle
from .joint import RefineConfig, SceneObject, SceneSolution, aabb_corners, initial_floor, optimize
from .matching import DEFAULT_NEGLECT_THRESHOLD, DescriptorMap, MatchReport, \
    filter_neglect, match_descriptors, matching_score
from .pnp import Correspondence, RansacConfig, RansacResult, ransac_pnp

logger = logging.getLogger(__name__)

# Fixed ranges of the uniform baseline: positions in [-2, 2] scene units,
# vertical-axis rotation in [-180, 180] degrees.
UNIFORM_TRANSLATION_RANGE = 2.0
UNIFORM_ROTATION_RANGE_DEG = 180.0

VERTICAL_AXIS = np.array([0.0, 0.0, 1.0])
FORWARD_AXIS = np.array([1.0, 0.0, 0.0])

COMPOUND_ID_SEPARATOR = "+"


@dataclass
class SceneSpec:
    """Everything needed to solve one scene image.

    Provide either ready correspondences per object, or descriptor maps
    (per-object render maps plus one scene map) to be matched here.
    """

    description: str
    objects: list[SceneObject]
    camera: CameraIntrinsics
    correspondences: dict[str, list[Correspondence]] | None = None
    render_descriptors: dict[str, list[DescriptorMap]] | None = None
    scene_descriptors: DescriptorMap | None = None

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids in scene spec: {ids}")
        if self.correspondences is None and self.render_descriptors is None:
            raise ValueError("scene spec needs correspondences or descriptor maps")

    def resolve_correspondences(self) -> dict[str, list[Correspondence]]:
        """Return per-object correspondences, matching descriptors if needed."""
        if self.correspondences is not None:
            return self.correspondences
        if self.scene_descriptors is None:
            raise ValueError("descriptor matching needs a scene descriptor map")
        out = {}
        for obj in self.objects:
            maps = (self.render_descriptors or {}).get(obj.id)
            if not maps:
                raise ValueError(f"no render descriptors for object {obj.id!r}")
            out[obj.id] = match_descriptors(maps, self.scene_descriptors)
        return out


def _bottom_face_of_aabb(lo: np.ndarray, hi: np.ndarray, floor: Plane) -> np.ndarray:
    """The 4-corner face of [lo, hi] nearest the floor (by the dominant
    normal axis, so the result is always a real face)."""
    corners = aabb_corners(lo, hi)
    k = int(np.argmax(np.abs(floor.normal)))
    target = lo[k] if floor.normal[k] > 0 else hi[k]
    face = corners[np.abs(corners[:, k] - target) < 1e-12]
    if face.shape != (4, 3):  # degenerate flat box: fall back to smallest residuals
        order = np.argsort(np.abs(corners @ floor.normal + floor.offset), kind="stable")
        face = corners[order[:4]]
    return face


@dataclass
class CompoundObject:
    """Several already-arranged objects treated as one rigid unit.

    The compound frame is the first member's solved frame; member transforms
    are relative to it. merged keypoints concatenate the members' keypoints
    (member order, transformed into the compound frame), and the collision
    geometry keeps one box per member.
    """

    id: str
    members: list[tuple[SceneObject, RigidTransform]]
    world_transform: RigidTransform
    scene_object: SceneObject = field(init=False)
    floor_in_frame: Plane = field(default_factory=Plane)

    def __post_init__(self):
        kpts = []
        boxes = []
        for obj, rel in self.members:
            kpts.append(rel.apply(obj.keypoints))
            for box in obj.collision_boxes():
                boxes.append(rel.apply(box))
        all_corners = np.vstack(boxes)
        lo, hi = all_corners.min(axis=0), all_corners.max(axis=0)
        self.scene_object = SceneObject(
            id=self.id,
            keypoints=np.vstack(kpts),
            bbox_corners=aabb_corners(lo, hi),
            bottom_vertices=_bottom_face_of_aabb(lo, hi, self.floor_in_frame),
            member_bboxes=boxes,
        )

    def absorb(self, solution: SceneSolution, new_object: SceneObject) -> "CompoundObject":
        """Extend the compound with one more object after a joint solve.

        The compound frame is unchanged: existing member transforms carry
        over, and the new member's relative pose comes from the solve.
        """
        if self.id not in solution.transforms:
            raise MissingTransform(f"solution lacks a transform for compound {self.id!r}")
        if new_object.id not in solution.transforms:
            raise MissingTransform(f"solution lacks a transform for {new_object.id!r}")
        tr_c = solution.transforms[self.id]
        rel_new = tr_c.inverse().compose(solution.transforms[new_object.id])
        return CompoundObject(
            id=self.id + COMPOUND_ID_SEPARATOR + new_object.id,
            members=self.members + [(new_object, rel_new)],
            world_transform=tr_c,
            floor_in_frame=solution.floor.transformed(tr_c.inverse()),
        )

    def decompose(self, world_transform: RigidTransform | None = None) -> dict[str, RigidTransform]:
        """World transforms of all members: world o relative, per member."""
        world = world_transform if world_transform is not None else self.world_transform
        return {obj.id: world.compose(rel) for obj, rel in self.members}


def merge_objects(solution: SceneSolution, objects: list[SceneObject]) -> CompoundObject:
    """Merge solved objects into one compound.

    The compound frame is the first object's solved frame, so the first
    member's relative transform is the identity.
    """
    if not objects:
        raise EmptyInput("cannot merge an empty object list")
    for obj in objects:
        if obj.id not in solution.transforms:
            raise MissingTransform(f"solution lacks a transform for {obj.id!r}")
    tr_c = solution.transforms[objects[0].id]
    tr_c_inv = tr_c.inverse()
    members = [(obj, tr_c_inv.compose(solution.transforms[obj.id])) for obj in objects]
    return CompoundObject(
        id=COMPOUND_ID_SEPARATOR.join(o.id for o in objects),
        members=members,
        world_transform=tr_c,
        floor_in_frame=solution.floor.transformed(tr_c_inv),
    )


def _solve_object(K: CameraIntrinsics, matches: list[Correspondence],
                  ransac_cfg: RansacConfig) -> RansacResult | None:
    try:
        return ransac_pnp(K, matches, ransac_cfg)
    except (TooFewCorrespondences, NoConsensus, NoSolution) as exc:
        logger.info("object pose estimation failed: %s", exc)
        return None


def arrange_scene(spec: SceneSpec,
                  cfg: RefineConfig = RefineConfig(),
                  ransac_cfg: RansacConfig = RansacConfig(),
                  neglect_threshold: float = DEFAULT_NEGLECT_THRESHOLD) -> SceneSolution:
    """Solve one scene: per-object RANSAC PnP, neglect filtering, then joint
    refinement over the surviving objects.

    Neglected objects (low matching score or no consensus) are reported in
    the solution, not fatal; raises AllObjectsNeglected when nothing
    survives.
    """
    if not spec.objects:
        raise AllObjectsNeglected("scene spec contains no objects")
    correspondences = spec.resolve_correspondences()

    reports: list[MatchReport] = []
    results: dict[str, RansacResult] = {}
    for obj in spec.objects:
        matches = correspondences.get(obj.id, [])
        result = _solve_object(spec.camera, matches, ransac_cfg) if matches else None
        score = matching_score(matches, result)
        if result is not None:
            results[obj.id] = result
        reports.append(MatchReport(object_id=obj.id, correspondences=matches,
                                   matching_score=score,
                                   neglected=score < neglect_threshold))

    accepted, _ = filter_neglect(reports, neglect_threshold)
    scores = {r.object_id: r.matching_score for r in reports}
    survivors = [o for o in spec.objects if o.id in accepted and o.id in results]
    survivor_ids = {o.id for o in survivors}
    neglected = [o.id for o in spec.objects if o.id not in survivor_ids]
    if not survivors:
        raise AllObjectsNeglected(f"no object passed matching: scores {scores}")

    init = {o.id: results[o.id].pose for o in survivors}
    inlier_idx = {o.id: results[o.id].inlier_indices for o in survivors}
    inlier_corrs = {
        o.id: [correspondences[o.id][i] for i in inlier_idx[o.id]]
        for o in survivors
    }
    solution = optimize(spec.camera, survivors, init, inlier_corrs, cfg,
                        floor=initial_floor(survivors, init), inliers=inlier_idx)
    solution.matching_scores = scores
    solution.neglected = neglected
    return solution


def _identity_solution(obj: SceneObject) -> SceneSolution:
    tr = RigidTransform.identity()
    floor = fit_plane(obj.bottom_vertices)
    return SceneSolution(transforms={obj.id: tr}, floor=floor, loss_trace=[],
                         inliers={}, matching_scores={}, neglected=[])


def arrange_iterative(steps: list[SceneSpec],
                      cfg: RefineConfig = RefineConfig(),
                      ransac_cfg: RansacConfig = RansacConfig(),
                      neglect_threshold: float = DEFAULT_NEGLECT_THRESHOLD) -> SceneSolution:
    """Solve a scene a pair at a time, merging after each iteration.

    The first usable step holds two plain objects; each later step holds the
    current compound (referenced by id; its geometry is maintained here) plus
    one new object. A step whose objects fail matching is skipped, so a
    retry step for the same object can follow. The returned solution maps
    every successfully introduced original object to its world transform in
    the final iteration's frame; objects never introduced are listed as
    neglected.
    """
    if not steps:
        raise EmptyInput("iterative arrangement needs at least one step")
    if len(steps) == 1 and len(steps[0].objects) == 1:
        return _identity_solution(steps[0].objects[0])

    compound: CompoundObject | None = None
    last_solution: SceneSolution | None = None
    intro_inliers: dict[str, list[int]] = {}
    intro_scores: dict[str, float] = {}
    attempted: list[str] = []

    for step_index, spec in enumerate(steps):
        if len(spec.objects) != 2:
            raise ValueError(f"iterative step {step_index} must contain exactly 2 objects")
        if compound is None:
            solve_spec = spec
            new_ids = [o.id for o in spec.objects]
        else:
            proxy_ids = [o.id for o in spec.objects if o.id == compound.id]
            if not proxy_ids:
                raise ValueError(
                    f"iterative step {step_index} does not reference compound {compound.id!r}")
            new_obj = next(o for o in spec.objects if o.id != compound.id)
            new_ids = [new_obj.id]
            # Substitute the internally maintained compound geometry; the
            # step file only has to agree on the id and correspondences.
            solve_spec = SceneSpec(
                description=spec.description,
                objects=[compound.scene_object, new_obj],
                camera=spec.camera,
                correspondences=spec.resolve_correspondences(),
            )
        attempted.extend(i for i in new_ids if i not in attempted)

        try:
            solution = arrange_scene(solve_spec, cfg, ransac_cfg, neglect_threshold)
        except AllObjectsNeglected as exc:
            logger.info("iteration %d unusable (%s); trying next step", step_index, exc)
            continue
        if solution.neglected:
            logger.info("iteration %d neglected %s; trying next step",
                        step_index, solution.neglected)
            continue

        for oid in new_ids:
            intro_inliers[oid] = solution.inliers.get(oid, [])
            intro_scores[oid] = solution.matching_scores.get(oid, 1.0)
        if compound is None:
            compound = merge_objects(solution, solve_spec.objects)
        else:
            compound = compound.absorb(solution, new_obj)
        last_solution = solution

    if compound is None or last_solution is None:
        raise AllObjectsNeglected("no iterative step produced a usable arrangement")

    transforms = compound.decompose()
    solved_ids = set(transforms)
    return SceneSolution(
        transforms=transforms,
        floor=last_solution.floor,
        loss_trace=last_solution.loss_trace,
        inliers={k: v for k, v in intro_inliers.items() if k in solved_ids},
        matching_scores=intro_scores,
        neglected=[i for i in attempted if i not in solved_ids],
        diverged=last_solution.diverged,
    )


# --- baseline layouts -----------------------------------------------------------


def baseline_uniform(objects: list[SceneObject], seed: int = 0) -> dict[str, RigidTransform]:
    """Random layout: x, y uniform in [-2, 2], yaw uniform in [-180, 180] deg,
    z = 0. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    out: dict[str, RigidTransform] = {}
    for obj in objects:
        x = rng.uniform(-UNIFORM_TRANSLATION_RANGE, UNIFORM_TRANSLATION_RANGE)
        y = rng.uniform(-UNIFORM_TRANSLATION_RANGE, UNIFORM_TRANSLATION_RANGE)
        theta = np.radians(rng.uniform(-UNIFORM_ROTATION_RANGE_DEG, UNIFORM_ROTATION_RANGE_DEG))
        out[obj.id] = RigidTransform(quat_from_axis_angle(VERTICAL_AXIS, theta),
                                     np.array([x, y, 0.0]))
    return out


def baseline_circular(objects: list[SceneObject], radius: float = 2.0) -> dict[str, RigidTransform]:
    """Evenly spaced layout on a ground circle, every object facing the center.

    Object k sits at angle 2*pi*k/N; its forward axis (+x) points at the
    origin.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    n = len(objects)
    out: dict[str, RigidTransform] = {}
    for k, obj in enumerate(objects):
        theta = 2.0 * np.pi * k / n
        pos = np.array([radius * np.cos(theta), radius * np.sin(theta), 0.0])
        # yaw theta + pi turns +x toward the circle center
        out[obj.id] = RigidTransform(quat_from_axis_angle(VERTICAL_AXIS, theta + np.pi), pos)
    return out
