"""Ground-truth scene generator: random box objects with known poses, rendered
into correspondences through a known camera, with controllable pixel noise,
planted outliers, and planted descriptor similarities.

Scenes are built in a world frame whose floor is the z = 0 plane, then viewed
by a camera placed to see every keypoint. The solver works in the camera
frame, so `true_transforms` holds the object-to-camera poses it should
recover; the world poses and the world-to-camera transform are kept alongside
for floor-level assertions and baseline comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .arrange import SceneSpec, merge_objects
from .errors import PlacementFailure
from .geom import CameraIntrinsics, Plane, RigidTransform, quat_from_axis_angle, \
    canonical_quat, quat_conjugate, quat_multiply, project_points
from .joint import SceneObject, SceneSolution, aabb_corners, bbox_iou_3d
from .pnp import Correspondence


@dataclass(frozen=True)
class SynthConfig:
    n_objects: int = 2
    keypoints_per_object: int = 100
    noise_sigma_px: float = 0.0
    outlier_fraction: float = 0.0
    scene_extent: float = 4.0
    seed: int = 0
    place_on_floor: bool = True
    allow_collisions: bool = False
    image_width: int = 1024
    image_height: int = 1024
    vfov_deg: float = 60.0
    # planted descriptor similarity of inlier matches (mean, std); outliers
    # draw from a low band so matching scores separate present/absent objects
    inlier_similarity: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        if self.keypoints_per_object < 8:
            raise ValueError("keypoints_per_object must be >= 8")
        if self.n_objects < 1 or self.scene_extent <= 0:
            raise ValueError("need n_objects >= 1 and a positive scene_extent")


@dataclass
class GroundTruthScene:
    objects: list[SceneObject]
    true_transforms: dict[str, RigidTransform]      # object -> camera (solver target)
    camera: CameraIntrinsics
    correspondences: dict[str, list[Correspondence]]
    inlier_labels: dict[str, np.ndarray]            # bool per correspondence
    world_transforms: dict[str, RigidTransform]     # object -> world (floor frame)
    camera_from_world: RigidTransform
    floor_camera: Plane                             # world z=0 plane in camera frame
    scene_extent: float
    image_size: tuple[int, int]
    description: str = "synthetic scene"

    def spec(self) -> SceneSpec:
        return SceneSpec(description=self.description, objects=self.objects,
                         camera=self.camera, correspondences=self.correspondences)


def _random_box_object(rng: np.random.Generator, oid: str, cfg: SynthConfig) -> SceneObject:
    """A box with its bottom face on the object-frame z = 0 plane and
    keypoints sampled in its interior with a guaranteed spread per axis."""
    e = cfg.scene_extent
    hx, hy = rng.uniform(0.08 * e, 0.15 * e, size=2)
    height = rng.uniform(0.15 * e, 0.30 * e)
    lo = np.array([-hx, -hy, 0.0])
    hi = np.array([hx, hy, height])
    corners = aabb_corners(lo, hi)

    margin = 0.05 * (hi - lo)
    for _ in range(50):
        pts = rng.uniform(lo + margin, hi - margin, size=(cfg.keypoints_per_object, 3))
        spread = pts.max(axis=0) - pts.min(axis=0)
        if (spread >= 0.4 * (hi - lo - 2 * margin)).all():
            break
    else:
        raise PlacementFailure(f"could not sample well-spread keypoints for {oid}")
    return SceneObject(id=oid, keypoints=pts, bbox_corners=corners,
                       bottom_vertices=corners[:4])


def _random_world_pose(rng: np.random.Generator, obj: SceneObject,
                       cfg: SynthConfig) -> RigidTransform:
    e = cfg.scene_extent
    footprint = float(np.linalg.norm(obj.bbox_corners[:, :2], axis=1).max())
    span = max(e / 2.0 - footprint, 0.1 * e)
    x, y = rng.uniform(-span, span, size=2)
    yaw = rng.uniform(-np.pi, np.pi)
    q = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
    if cfg.place_on_floor:
        z = 0.0
    else:
        z = rng.uniform(0.0, 0.2 * e)
        axis = rng.normal(size=3)
        q = quat_from_axis_angle(axis, rng.uniform(-np.pi, np.pi))
    return RigidTransform(q, np.array([x, y, z]))


def _inflate(corners: np.ndarray, factor: float) -> np.ndarray:
    center = corners.mean(axis=0)
    return center + factor * (corners - center)


def _place_objects(rng: np.random.Generator, objects: list[SceneObject],
                   cfg: SynthConfig) -> dict[str, RigidTransform]:
    poses: dict[str, RigidTransform] = {}
    placed_boxes: list[np.ndarray] = []
    for obj in objects:
        for _ in range(200):
            pose = _random_world_pose(rng, obj, cfg)
            # inflated test keeps slack for the camera-frame hull check below
            box = _inflate(pose.apply(obj.bbox_corners), 1.15)
            if cfg.allow_collisions or all(bbox_iou_3d(box, other) == 0.0
                                           for other in placed_boxes):
                poses[obj.id] = pose
                placed_boxes.append(box)
                break
        else:
            raise PlacementFailure(
                f"could not place {obj.id} without collisions in {cfg.scene_extent} units")
    return poses


def look_at_camera(eye: np.ndarray, target: np.ndarray) -> RigidTransform:
    """World-to-camera transform for a camera at `eye` looking at `target`,
    with the image's down direction roughly aligned to world -z."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise ValueError("camera eye and target coincide")
    z_cam = forward / fn
    world_down = np.array([0.0, 0.0, -1.0])
    x_cam = np.cross(world_down, z_cam)
    xn = np.linalg.norm(x_cam)
    if xn < 1e-9:  # looking straight up/down: any horizontal right vector works
        x_cam = np.array([1.0, 0.0, 0.0])
    else:
        x_cam = x_cam / xn
    y_cam = np.cross(z_cam, x_cam)
    R = np.vstack([x_cam, y_cam, z_cam])
    return RigidTransform.from_matrix(R, -R @ np.asarray(eye, dtype=np.float64))


def _visible(K: CameraIntrinsics, cam_tr: RigidTransform, pts: np.ndarray,
             width: int, height: int) -> bool:
    uv, depth = project_points(K, cam_tr, pts)
    if (depth <= 0.05).any():
        return False
    m = 0.03 * min(width, height)
    return bool((uv[:, 0] > m).all() and (uv[:, 0] < width - m).all()
                and (uv[:, 1] > m).all() and (uv[:, 1] < height - m).all())


def _camera_boxes_disjoint(objects: list[SceneObject],
                           world: dict[str, RigidTransform],
                           cam: RigidTransform) -> bool:
    """Check that the camera-frame axis-aligned hulls stay disjoint.

    The collision penalty acts on these hulls, so a usable ground-truth
    scene must be collision-free in this exact sense (with a little slack).
    """
    per_object = []
    for o in objects:
        tr = cam.compose(world[o.id])
        per_object.append([_inflate(tr.apply(b), 1.1) for b in o.collision_boxes()])
    for i in range(len(per_object)):
        for j in range(i + 1, len(per_object)):
            for bi in per_object[i]:
                for bj in per_object[j]:
                    if bbox_iou_3d(bi, bj) > 0.0:
                        return False
    return True


def _place_camera(rng: np.random.Generator, objects: list[SceneObject],
                  world: dict[str, RigidTransform], cfg: SynthConfig,
                  K: CameraIntrinsics, require_disjoint: bool = False) -> RigidTransform:
    centers = np.array([world[o.id].translation for o in objects])
    target = centers.mean(axis=0) + np.array([0.0, 0.0, 0.1 * cfg.scene_extent])
    distance = 1.8 * cfg.scene_extent
    for attempt in range(60):
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        elevation = rng.uniform(np.radians(30.0), np.radians(60.0))
        eye = target + distance * np.array([
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ])
        cam = look_at_camera(eye, target)
        ok = all(
            _visible(K, cam.compose(world[o.id]), o.keypoints,
                     cfg.image_width, cfg.image_height)
            for o in objects
        )
        if ok and require_disjoint:
            ok = _camera_boxes_disjoint(objects, world, cam)
        if ok:
            return cam
        if attempt % 10 == 9:
            distance *= 1.25
    raise PlacementFailure("no camera pose sees every keypoint")


def _planted_similarity(rng: np.random.Generator, cfg: SynthConfig, inlier: bool) -> float:
    mean, std = cfg.inlier_similarity
    if inlier:
        if std == 0.0:
            return float(np.clip(mean, -1.0, 1.0))
        return float(np.clip(rng.normal(mean, std), -1.0, 1.0))
    if mean >= 1.0 and std == 0.0:
        return 1.0  # similarity carries no signal in plain synthetic scenes
    return float(rng.uniform(0.0, 0.35))


def _synth_correspondences(rng: np.random.Generator, obj: SceneObject,
                           cam_tr: RigidTransform, K: CameraIntrinsics,
                           cfg: SynthConfig) -> tuple[list[Correspondence], np.ndarray]:
    uv, _ = project_points(K, cam_tr, obj.keypoints)
    m = len(obj.keypoints)
    labels = np.ones(m, dtype=bool)
    n_out = int(round(cfg.outlier_fraction * m))
    if n_out:
        labels[rng.choice(m, size=n_out, replace=False)] = False
    diag = math.hypot(cfg.image_width, cfg.image_height)
    clearance = 0.04 * diag + 10.0 * cfg.noise_sigma_px
    out: list[Correspondence] = []
    for i in range(m):
        if labels[i]:
            pix = uv[i].copy()
            if cfg.noise_sigma_px > 0:
                pix = pix + rng.normal(0.0, cfg.noise_sigma_px, size=2)
        else:
            for _ in range(100):  # keep outliers clear of the inlier noise band
                pix = np.array([rng.uniform(0, cfg.image_width),
                                rng.uniform(0, cfg.image_height)])
                if np.linalg.norm(pix - uv[i]) > clearance:
                    break
            else:
                raise PlacementFailure("could not place an outlier away from its true pixel")
        out.append(Correspondence(object_point=obj.keypoints[i], image_point=pix,
                                  similarity=_planted_similarity(rng, cfg, bool(labels[i]))))
    return out, labels


def generate_scene(cfg: SynthConfig) -> GroundTruthScene:
    """Build a random ground-truth scene, deterministic per cfg.seed.

    Objects are boxes with interior keypoints; with place_on_floor their true
    bottoms lie exactly on world z = 0; without allow_collisions the true
    bounding boxes are pairwise disjoint. The camera is placed so that every
    keypoint projects inside the image with positive depth.
    """
    rng = np.random.default_rng(cfg.seed)
    objects = [_random_box_object(rng, f"obj{i}", cfg) for i in range(cfg.n_objects)]
    K = CameraIntrinsics.from_fov(cfg.image_width, cfg.image_height, cfg.vfov_deg)
    cam = None
    for _ in range(20):
        world = _place_objects(rng, objects, cfg)
        try:
            cam = _place_camera(rng, objects, world, cfg, K,
                                require_disjoint=not cfg.allow_collisions)
            break
        except PlacementFailure:
            continue
    if cam is None:
        raise PlacementFailure("no placement admits a camera with disjoint hulls")

    true_cam = {o.id: cam.compose(world[o.id]) for o in objects}
    correspondences: dict[str, list[Correspondence]] = {}
    labels: dict[str, np.ndarray] = {}
    for o in objects:
        correspondences[o.id], labels[o.id] = _synth_correspondences(
            rng, o, true_cam[o.id], K, cfg)

    return GroundTruthScene(
        objects=objects,
        true_transforms=true_cam,
        camera=K,
        correspondences=correspondences,
        inlier_labels=labels,
        world_transforms=world,
        camera_from_world=cam,
        floor_camera=Plane(np.array([0.0, 0.0, 1.0, 0.0])).transformed(cam),
        scene_extent=cfg.scene_extent,
        image_size=(cfg.image_width, cfg.image_height),
    )


def corrupt_object(scene: GroundTruthScene, object_id: str, seed: int = 0,
                   similarity_band: tuple[float, float] = (0.0, 0.25)) -> GroundTruthScene:
    """Replace one object's correspondences with pure noise (uniform image
    points, low similarities), modeling an object missing from the image."""
    rng = np.random.default_rng(seed)
    w, h = scene.image_size
    obj = next(o for o in scene.objects if o.id == object_id)
    noisy = [
        Correspondence(object_point=p,
                       image_point=np.array([rng.uniform(0, w), rng.uniform(0, h)]),
                       similarity=float(rng.uniform(*similarity_band)))
        for p in obj.keypoints
    ]
    correspondences = dict(scene.correspondences)
    correspondences[object_id] = noisy
    labels = dict(scene.inlier_labels)
    labels[object_id] = np.zeros(len(noisy), dtype=bool)
    return replace(scene, correspondences=correspondences, inlier_labels=labels)


def pose_error(true: RigidTransform, est: RigidTransform) -> tuple[float, float]:
    """(geodesic rotation error in degrees, translation difference norm)."""
    q_rel = quat_multiply(quat_conjugate(true.rotation), est.rotation)
    q_rel = canonical_quat(q_rel)
    angle = 2.0 * math.atan2(float(np.linalg.norm(q_rel[1:])), float(abs(q_rel[0])))
    return math.degrees(angle), float(np.linalg.norm(true.translation - est.translation))


def _fixed_box_object(rng: np.random.Generator, oid: str, half_xy: float,
                      height: float, keypoints: int) -> SceneObject:
    lo = np.array([-half_xy, -half_xy, 0.0])
    hi = np.array([half_xy, half_xy, height])
    corners = aabb_corners(lo, hi)
    margin = 0.05 * (hi - lo)
    pts = rng.uniform(lo + margin, hi - margin, size=(keypoints, 3))
    return SceneObject(id=oid, keypoints=pts, bbox_corners=corners,
                       bottom_vertices=corners[:4])


def generate_floor_offset_scene(offset: float = 0.3, gap: float = 1.0,
                                keypoints: int = 100, seed: int = 0) -> GroundTruthScene:
    """Two objects whose image evidence puts their bottom planes `offset`
    apart: the second object's correspondences come from a pose displaced
    along its viewing ray (where reprojection constrains depth only weakly),
    lifting its bottoms off the shared floor.

    true_transforms hold the data-generating (displaced) poses, which is what
    per-object pose estimation recovers.
    """
    rng = np.random.default_rng(seed)
    half = 0.4
    a = _fixed_box_object(rng, "obj0", half, 0.8, keypoints)
    b = _fixed_box_object(rng, "obj1", half, 0.8, keypoints)
    shift = gap / 2.0 + half
    world = {
        "obj0": RigidTransform(np.array([1.0, 0, 0, 0]), np.array([-shift + half, 0.0, 0.0])),
        "obj1": RigidTransform(np.array([1.0, 0, 0, 0]), np.array([shift - half, 0.0, 0.0])),
    }
    # camera broadside to the separation axis so the ray displacement below
    # does not change the x-gap between the objects
    extent = 4.0
    target = np.array([0.0, 0.0, 0.4])
    elevation = np.radians(60.0)
    eye = target + 1.8 * extent * np.array([0.0, -np.cos(elevation), np.sin(elevation)])
    cam = look_at_camera(eye, target)

    b_center = world["obj1"].apply(b.bbox_corners.mean(axis=0))
    ray = b_center - eye
    ray = ray / np.linalg.norm(ray)
    alpha = offset / ray[2]  # displacement that raises the bottoms by `offset`
    displaced = RigidTransform(world["obj1"].rotation,
                               world["obj1"].translation + alpha * ray)

    data_world = {"obj0": world["obj0"], "obj1": displaced}
    cfg = SynthConfig(n_objects=2, keypoints_per_object=keypoints, seed=seed)
    K = CameraIntrinsics.from_fov(cfg.image_width, cfg.image_height, cfg.vfov_deg)
    true_cam = {oid: cam.compose(data_world[oid]) for oid in data_world}
    for oid, obj in (("obj0", a), ("obj1", b)):
        if not _visible(K, true_cam[oid], obj.keypoints,
                        cfg.image_width, cfg.image_height):
            raise PlacementFailure("offset scene keypoints fall outside the image")
    correspondences = {}
    labels = {}
    for obj in (a, b):
        correspondences[obj.id], labels[obj.id] = _synth_correspondences(
            rng, obj, true_cam[obj.id], K, cfg)
    return GroundTruthScene(
        objects=[a, b], true_transforms=true_cam, camera=K,
        correspondences=correspondences, inlier_labels=labels,
        world_transforms=data_world, camera_from_world=cam,
        floor_camera=Plane(np.array([0.0, 0.0, 1.0, 0.0])).transformed(cam),
        scene_extent=extent, image_size=(cfg.image_width, cfg.image_height),
        description="floor-offset scene",
    )


def generate_overlap_scene(iou: float = 0.4, keypoints: int = 100,
                           seed: int = 0) -> GroundTruthScene:
    """Two identical boxes overlapping with the given axis-aligned IOU, seen
    from straight above (so camera-frame hulls match world boxes exactly).

    Only the first object carries correspondences; the second has none, so
    nothing but the scene priors constrains it.
    """
    if not 0.0 < iou < 1.0:
        raise ValueError("iou must be in (0, 1)")
    rng = np.random.default_rng(seed)
    half = 0.4
    a = _fixed_box_object(rng, "obj0", half, 0.8, keypoints)
    b = _fixed_box_object(rng, "obj1", half, 0.8, keypoints)
    # identical boxes offset along x: iou = (w - d) / (w + d) with w = 2*half
    d = 2.0 * half * (1.0 - iou) / (1.0 + iou)
    world = {
        "obj0": RigidTransform(np.array([1.0, 0, 0, 0]), np.zeros(3)),
        "obj1": RigidTransform(np.array([1.0, 0, 0, 0]), np.array([d, 0.0, 0.0])),
    }
    eye = np.array([d / 2.0, 0.0, 7.0])
    cam = look_at_camera(eye, np.array([d / 2.0, 0.0, 0.0]))
    true_cam = {oid: cam.compose(world[oid]) for oid in world}
    cfg = SynthConfig(n_objects=2, keypoints_per_object=keypoints, seed=seed,
                      allow_collisions=True)
    K = CameraIntrinsics.from_fov(cfg.image_width, cfg.image_height, cfg.vfov_deg)
    corr_a, labels_a = _synth_correspondences(rng, a, true_cam["obj0"], K, cfg)
    return GroundTruthScene(
        objects=[a, b], true_transforms=true_cam, camera=K,
        correspondences={"obj0": corr_a, "obj1": []},
        inlier_labels={"obj0": labels_a, "obj1": np.zeros(0, dtype=bool)},
        world_transforms=world, camera_from_world=cam,
        floor_camera=Plane(np.array([0.0, 0.0, 1.0, 0.0])).transformed(cam),
        scene_extent=4.0, image_size=(cfg.image_width, cfg.image_height),
        description="overlap scene",
    )


# --- iterative-pipeline scenarios -------------------------------------------------


@dataclass
class IterativeScenario:
    """Per-iteration specs for the pair-merging pipeline plus the ground truth
    they were generated from.

    Compound geometry in each step is produced by the same merge machinery the
    pipeline uses, applied to the true poses, so step correspondences line up
    with the internally maintained compound to solver precision.
    """

    base: GroundTruthScene
    steps: list[SceneSpec]
    order: list[str]
    corrupted_steps: list[int] = field(default_factory=list)


def generate_iterative_steps(cfg: SynthConfig, order: list[int] | None = None,
                             retry_after_neglect: bool = False) -> IterativeScenario:
    """Build the step sequence introducing cfg.n_objects one pair at a time.

    Every iteration views the same world arrangement through a fresh camera.
    With retry_after_neglect, the second introduction step is emitted once
    with pure-noise data for the new object and then again clean, exercising
    the skip-and-retry path.
    """
    if cfg.n_objects < 2:
        raise ValueError("iterative scenarios need at least 2 objects")
    base = generate_scene(cfg)
    rng = np.random.default_rng(cfg.seed + 7919)
    w, h = base.image_size
    idx_order = order if order is not None else list(range(cfg.n_objects))
    ordered = [base.objects[i] for i in idx_order]
    world = base.world_transforms

    steps: list[SceneSpec] = []
    corrupted: list[int] = []

    def step_cfg() -> SynthConfig:
        return cfg

    def make_step(entities: list[tuple[SceneObject, RigidTransform]],
                  corrupt_last: bool) -> SceneSpec:
        cam = _place_camera(rng, [e[0] for e in entities],
                            {e[0].id: e[1] for e in entities}, cfg, base.camera,
                            require_disjoint=not cfg.allow_collisions)
        correspondences = {}
        for pos, (obj, wpose) in enumerate(entities):
            if corrupt_last and pos == len(entities) - 1:
                correspondences[obj.id] = [
                    Correspondence(object_point=p,
                                   image_point=np.array([rng.uniform(0, w), rng.uniform(0, h)]),
                                   similarity=float(rng.uniform(0.0, 0.25)))
                    for p in obj.keypoints
                ]
            else:
                correspondences[obj.id], _ = _synth_correspondences(
                    rng, obj, cam.compose(wpose), base.camera, step_cfg())
        return SceneSpec(description=base.description,
                         objects=[e[0] for e in entities], camera=base.camera,
                         correspondences=correspondences)

    first, second = ordered[0], ordered[1]
    steps.append(make_step([(first, world[first.id]), (second, world[second.id])],
                           corrupt_last=False))

    # Track the compound exactly as the pipeline will, but from true poses.
    truth_solution = SceneSolution(
        transforms={first.id: world[first.id], second.id: world[second.id]},
        floor=Plane(np.array([0.0, 0.0, 1.0, 0.0])), loss_trace=[])
    compound = merge_objects(truth_solution, [first, second])

    for n, new_obj in enumerate(ordered[2:], start=2):
        entities = [(compound.scene_object, world[first.id]), (new_obj, world[new_obj.id])]
        if retry_after_neglect and n == 2:
            corrupted.append(len(steps))
            steps.append(make_step(entities, corrupt_last=True))
        steps.append(make_step(entities, corrupt_last=False))
        truth_solution = SceneSolution(
            transforms={compound.id: world[first.id], new_obj.id: world[new_obj.id]},
            floor=Plane(np.array([0.0, 0.0, 1.0, 0.0])), loss_trace=[])
        compound = compound.absorb(truth_solution, new_obj)

    return IterativeScenario(base=base, steps=steps,
                             order=[o.id for o in ordered], corrupted_steps=corrupted)
