"""Joint pose refinement over all scene objects.

Starting from per-object RANSAC poses, this module minimizes a single scalar
loss over every object's (quaternion, translation) and, optionally, the shared
floor plane:

    total = reprojection + omega_surface * surface + omega_collision * collision

* reprojection: summed squared pixel error of each object's inlier matches;
* surface: summed squared plane residual of each object's 4 bottom bounding
  box vertices against the shared floor;
* collision: summed pairwise 3D bounding-box IOU (axis-aligned hulls of the
  transformed corners), penalizing interpenetration.

Optimization is plain Adam with per-step renormalization of quaternions and
the plane normal. Gradients are exact hand-derived derivatives of the
functions evaluated here, so finite-difference checks agree to rounding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss
from .geom import (
    CameraIntrinsics,
    Plane,
    RigidTransform,
    canonical_quat,
    fit_plane,
    quat_to_matrix_jacobian,
    _quat_to_matrix_raw,
)
from .pnp import Correspondence

logger = logging.getLogger(__name__)

# Behind-camera handling inside the differentiable projection: depths below
# _DEPTH_EPS are clamped in the divisor and a quadratic barrier pushes the
# point back in front of the camera.
_DEPTH_EPS = 1e-6
_DEPTH_BARRIER = 1e6

_BOX_EDGES = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]


def aabb_corners(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Corners of the axis-aligned box [lo, hi], bottom face first.

    Order: (x0,y0,z0) (x1,y0,z0) (x1,y1,z0) (x0,y1,z0), then the same x-y
    ring at z1.
    """
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    return np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ], dtype=np.float64)


@dataclass
class SceneObject:
    """A rigid object: keypoints for matching plus bounding-box geometry.

    member_bboxes is the collision geometry: one corner set per rigid member.
    Plain objects leave it None, meaning [bbox_corners]; merged compound
    objects carry one box per original member so collisions act on the parts,
    not the union hull.
    """

    id: str
    keypoints: np.ndarray          # (K, 3) object frame
    bbox_corners: np.ndarray       # (8, 3)
    bottom_vertices: np.ndarray    # (4, 3), subset of bbox_corners
    mesh_path: str | None = None
    member_bboxes: list[np.ndarray] | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.bbox_corners = np.asarray(self.bbox_corners, dtype=np.float64)
        self.bottom_vertices = np.asarray(self.bottom_vertices, dtype=np.float64)
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] != 3 or len(self.keypoints) == 0:
            raise ValueError(f"object {self.id!r}: keypoints must be a non-empty (K, 3) array")
        if self.bbox_corners.shape != (8, 3):
            raise ValueError(f"object {self.id!r}: bbox_corners must be (8, 3)")
        if self.bottom_vertices.shape != (4, 3):
            raise ValueError(f"object {self.id!r}: bottom_vertices must be (4, 3)")
        if not (np.isfinite(self.keypoints).all() and np.isfinite(self.bbox_corners).all()):
            raise ValueError(f"object {self.id!r}: non-finite geometry")
        center = self.bbox_corners.mean(axis=0)
        radii = np.linalg.norm(self.bbox_corners - center, axis=1)
        if radii.max() - radii.min() > 1e-6 * max(radii.max(), 1e-12):
            raise ValueError(f"object {self.id!r}: bbox_corners do not form a box")
        for v in self.bottom_vertices:
            if not np.any(np.all(np.abs(self.bbox_corners - v) < 1e-9, axis=1)):
                raise ValueError(f"object {self.id!r}: bottom vertex {v} is not a bbox corner")
        if self.member_bboxes is not None:
            self.member_bboxes = [np.asarray(b, dtype=np.float64) for b in self.member_bboxes]
            for b in self.member_bboxes:
                if b.shape != (8, 3):
                    raise ValueError(f"object {self.id!r}: member box must be (8, 3)")

    def collision_boxes(self) -> list[np.ndarray]:
        return self.member_bboxes if self.member_bboxes is not None else [self.bbox_corners]


@dataclass(frozen=True)
class RefineConfig:
    """Weights and optimizer settings for the joint refinement."""

    omega_surface: float = 1e6
    omega_collision: float = 1e4
    learning_rate: float = 0.001
    steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    optimize_plane: bool = True
    trace_interval: int = 10
    # stop early once total loss reaches this floor: an (essentially) exact
    # minimum is a fixed point, which constant-rate Adam would otherwise
    # orbit at step-size amplitude. 0 disables.
    convergence_loss: float = 1e-9

    def __post_init__(self):
        if min(self.omega_surface, self.omega_collision) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.learning_rate <= 0 or self.steps < 1 or self.trace_interval < 1:
            raise ValueError("learning_rate, steps and trace_interval must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam parameters")
        if self.convergence_loss < 0:
            raise ValueError("convergence_loss must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """Raw loss components; total applies the configured omega weights."""

    reprojection: float
    surface: float
    collision: float
    total: float


@dataclass
class SceneGradient:
    """Structured gradient of the total loss.

    floor is None when the plane is frozen (RefineConfig.optimize_plane off).
    """

    rotation: dict[str, np.ndarray]       # id -> (4,)
    translation: dict[str, np.ndarray]    # id -> (3,)
    floor: np.ndarray | None


@dataclass
class SceneSolution:
    transforms: dict[str, RigidTransform]
    floor: Plane
    loss_trace: list[tuple[int, float, float, float, float]]
    inliers: dict[str, list[int]] = field(default_factory=dict)
    matching_scores: dict[str, float] = field(default_factory=dict)
    neglected: list[str] = field(default_factory=list)
    diverged: bool = False


# --- evaluation core ----------------------------------------------------------


class _SceneEval:
    """Precomputed per-object arrays for repeated loss/gradient evaluation."""

    def __init__(self, K: CameraIntrinsics, objects: list[SceneObject],
                 correspondences: dict[str, list[Correspondence]] | None):
        self.K = K
        self.objects = objects
        self.P: list[np.ndarray] = []
        self.U: list[np.ndarray] = []
        self.bottoms: list[np.ndarray] = []
        self.boxes: list[list[np.ndarray]] = []
        correspondences = correspondences or {}
        for obj in objects:
            matches = correspondences.get(obj.id, [])
            if matches:
                self.P.append(np.array([c.object_point for c in matches]))
                self.U.append(np.array([c.image_point for c in matches]))
            else:
                self.P.append(np.zeros((0, 3)))
                self.U.append(np.zeros((0, 2)))
            self.bottoms.append(obj.bottom_vertices)
            self.boxes.append(obj.collision_boxes())

    def evaluate(self, q: np.ndarray, t: np.ndarray, plane: np.ndarray,
                 cfg: RefineConfig, want_grad: bool, plane_free: bool):
        """Loss components and (optionally) gradients at raw parameters.

        q: (n, 4), t: (n, 3), plane: (4,) with unit normal. The rotation used
        is the raw quaternion polynomial, so the gradients returned are exact
        derivatives of the value computed here even slightly off the unit
        sphere.
        """
        n = len(self.objects)
        K = self.K
        Rs = [_quat_to_matrix_raw(q[i]) for i in range(n)]
        dRs = [quat_to_matrix_jacobian(q[i]) for i in range(n)] if want_grad else None
        gq = np.zeros((n, 4)) if want_grad else None
        gt = np.zeros((n, 3)) if want_grad else None
        gplane = np.zeros(4) if (want_grad and plane_free) else None

        # reprojection (+ depth barrier)
        repro = 0.0
        for i in range(n):
            P, U = self.P[i], self.U[i]
            if len(P) == 0:
                continue
            X = P @ Rs[i].T + t[i]
            s = X[:, 2]
            clamped = s < _DEPTH_EPS
            s_eff = np.where(clamped, _DEPTH_EPS, s)
            u = (K.fx * X[:, 0] + K.skew * X[:, 1]) / s_eff + K.cx
            v = (K.fy * X[:, 1]) / s_eff + K.cy
            eu = u - U[:, 0]
            ev = v - U[:, 1]
            repro += float(eu @ eu + ev @ ev)
            if clamped.any():
                gap = _DEPTH_EPS - s[clamped]
                repro += float(_DEPTH_BARRIER * (gap @ gap))
            if want_grad:
                gX = np.zeros_like(X)
                gX[:, 0] = 2.0 * eu * K.fx / s_eff
                gX[:, 1] = 2.0 * (eu * K.skew + ev * K.fy) / s_eff
                live = ~clamped
                gX[live, 2] = -2.0 * (eu[live] * (u[live] - K.cx)
                                      + ev[live] * (v[live] - K.cy)) / s_eff[live]
                gX[clamped, 2] += -2.0 * _DEPTH_BARRIER * (_DEPTH_EPS - s[clamped])
                gt[i] += gX.sum(axis=0)
                M = gX.T @ P
                for k in range(4):
                    gq[i, k] += float(np.sum(dRs[i][k] * M))

        # surface
        nvec, d = plane[:3], plane[3]
        surface = 0.0
        for i in range(n):
            B = self.bottoms[i]
            W = B @ Rs[i].T + t[i]
            r = W @ nvec + d
            surface += float(r @ r)
            if want_grad:
                w_s = cfg.omega_surface
                gW = 2.0 * r[:, None] * nvec[None, :]
                gt[i] += w_s * gW.sum(axis=0)
                M = gW.T @ B
                for k in range(4):
                    gq[i, k] += w_s * float(np.sum(dRs[i][k] * M))
                if gplane is not None:
                    gplane[:3] += w_s * 2.0 * (r[:, None] * W).sum(axis=0)
                    gplane[3] += w_s * 2.0 * float(r.sum())

        # collision: every unordered object pair, every cross pair of member boxes
        collision = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                for Ci in self.boxes[i]:
                    for Cj in self.boxes[j]:
                        collision += self._pair_iou(
                            i, j, Ci, Cj, Rs, t, dRs, gq, gt,
                            cfg.omega_collision if want_grad else 0.0)

        total = repro + cfg.omega_surface * surface + cfg.omega_collision * collision
        breakdown = LossBreakdown(repro, surface, collision, total)
        if not want_grad:
            return breakdown, None, None, None
        return breakdown, gq, gt, gplane

    def _pair_iou(self, i, j, Ci, Cj, Rs, t, dRs, gq, gt, weight) -> float:
        """IOU of the axis-aligned hulls of two transformed corner sets.

        When weight > 0, accumulates d(weight * iou)/d(pose) into gq/gt via the
        argmin/argmax corners that realize each hull bound.
        """
        Wa = Ci @ Rs[i].T + t[i]
        Wb = Cj @ Rs[j].T + t[j]
        ia_lo, ia_hi = Wa.argmin(axis=0), Wa.argmax(axis=0)
        ib_lo, ib_hi = Wb.argmin(axis=0), Wb.argmax(axis=0)
        lo_a, hi_a = Wa.min(axis=0), Wa.max(axis=0)
        lo_b, hi_b = Wb.min(axis=0), Wb.max(axis=0)
        ext_a, ext_b = hi_a - lo_a, hi_b - lo_b
        ov = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
        if (ov <= 0.0).any():
            return 0.0
        inter = float(np.prod(ov))
        vol_a, vol_b = float(np.prod(ext_a)), float(np.prod(ext_b))
        union = vol_a + vol_b - inter
        if union <= 0.0:
            return 0.0
        iou = inter / union
        if weight == 0.0:
            return iou

        d_inter = weight * (union + inter) / (union * union)   # d(w*iou)/d(inter)
        d_vol = -weight * inter / (union * union)              # d(w*iou)/d(vol_a or vol_b)
        ga = np.zeros((8, 3))
        gb = np.zeros((8, 3))
        for k in range(3):
            dI_dov = inter / ov[k]
            # overlap bounds: the tighter box's corner carries the derivative
            if hi_a[k] <= hi_b[k]:
                ga[ia_hi[k], k] += d_inter * dI_dov
            else:
                gb[ib_hi[k], k] += d_inter * dI_dov
            if lo_a[k] >= lo_b[k]:
                ga[ia_lo[k], k] -= d_inter * dI_dov
            else:
                gb[ib_lo[k], k] -= d_inter * dI_dov
            # own-volume terms
            if ext_a[k] > 0.0:
                dV = vol_a / ext_a[k]
                ga[ia_hi[k], k] += d_vol * dV
                ga[ia_lo[k], k] -= d_vol * dV
            if ext_b[k] > 0.0:
                dV = vol_b / ext_b[k]
                gb[ib_hi[k], k] += d_vol * dV
                gb[ib_lo[k], k] -= d_vol * dV
        gt[i] += ga.sum(axis=0)
        gt[j] += gb.sum(axis=0)
        Ma = ga.T @ Ci
        Mb = gb.T @ Cj
        for k in range(4):
            gq[i, k] += float(np.sum(dRs[i][k] * Ma))
            gq[j, k] += float(np.sum(dRs[j][k] * Mb))
        return iou


def _stack_params(objects: list[SceneObject],
                  transforms: dict[str, RigidTransform]) -> tuple[np.ndarray, np.ndarray]:
    q = np.array([transforms[o.id].rotation for o in objects], dtype=np.float64)
    t = np.array([transforms[o.id].translation for o in objects], dtype=np.float64)
    return q, t


# --- public loss surface --------------------------------------------------------


def reprojection_loss(K: CameraIntrinsics, objects: list[SceneObject],
                      transforms: dict[str, RigidTransform],
                      correspondences: dict[str, list[Correspondence]]) -> float:
    """Summed squared pixel reprojection error over all objects' matches."""
    ev = _SceneEval(K, objects, correspondences)
    q, t = _stack_params(objects, transforms)
    bd, _, _, _ = ev.evaluate(q, t, np.array([0.0, 0.0, 1.0, 0.0]),
                              RefineConfig(), want_grad=False, plane_free=False)
    return bd.reprojection


def surface_loss(objects: list[SceneObject],
                 transforms: dict[str, RigidTransform], floor: Plane) -> float:
    """Summed squared floor-plane residual of every object's bottom vertices."""
    total = 0.0
    for obj in objects:
        W = transforms[obj.id].apply(obj.bottom_vertices)
        r = W @ floor.normal + floor.offset
        total += float(r @ r)
    return total


def bbox_iou_3d(box_a: np.ndarray, box_b: np.ndarray) -> float:
    """Intersection-over-union of the axis-aligned hulls of two corner sets."""
    a = np.asarray(box_a, dtype=np.float64)
    b = np.asarray(box_b, dtype=np.float64)
    if a.shape != (8, 3) or b.shape != (8, 3):
        raise ValueError("boxes must be (8, 3) corner arrays")
    lo_a, hi_a = a.min(axis=0), a.max(axis=0)
    lo_b, hi_b = b.min(axis=0), b.max(axis=0)
    ov = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
    if (ov <= 0.0).any():
        return 0.0
    inter = float(np.prod(ov))
    union = float(np.prod(hi_a - lo_a)) + float(np.prod(hi_b - lo_b)) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def collision_loss(objects: list[SceneObject],
                   transforms: dict[str, RigidTransform]) -> float:
    """Sum of bbox_iou_3d over unordered object pairs (member boxes crossed)."""
    total = 0.0
    for i in range(len(objects)):
        tri = transforms[objects[i].id]
        boxes_i = [tri.apply(b) for b in objects[i].collision_boxes()]
        for j in range(i + 1, len(objects)):
            trj = transforms[objects[j].id]
            boxes_j = [trj.apply(b) for b in objects[j].collision_boxes()]
            for bi in boxes_i:
                for bj in boxes_j:
                    total += bbox_iou_3d(bi, bj)
    return total


def total_loss(K: CameraIntrinsics, objects: list[SceneObject],
               transforms: dict[str, RigidTransform], floor: Plane,
               correspondences: dict[str, list[Correspondence]],
               cfg: RefineConfig = RefineConfig()) -> tuple[float, LossBreakdown]:
    """Weighted scene loss and its raw components."""
    ev = _SceneEval(K, objects, correspondences)
    q, t = _stack_params(objects, transforms)
    bd, _, _, _ = ev.evaluate(q, t, floor.coeffs, cfg, want_grad=False, plane_free=False)
    return bd.total, bd


def loss_gradient(K: CameraIntrinsics, objects: list[SceneObject],
                  transforms: dict[str, RigidTransform], floor: Plane,
                  correspondences: dict[str, list[Correspondence]],
                  cfg: RefineConfig = RefineConfig()) -> SceneGradient:
    """Exact gradient of total_loss wrt every quaternion, translation, and
    (when cfg.optimize_plane) the plane coefficients.
    """
    ev = _SceneEval(K, objects, correspondences)
    q, t = _stack_params(objects, transforms)
    bd, gq, gt, gplane = ev.evaluate(q, t, floor.coeffs, cfg,
                                     want_grad=True, plane_free=cfg.optimize_plane)
    if not math.isfinite(bd.total):
        raise NonFiniteLoss(f"total loss is {bd.total} at the given parameters")
    return SceneGradient(
        rotation={o.id: gq[i] for i, o in enumerate(objects)},
        translation={o.id: gt[i] for i, o in enumerate(objects)},
        floor=gplane if cfg.optimize_plane else None,
    )


def initial_floor(objects: list[SceneObject],
                  transforms: dict[str, RigidTransform]) -> Plane:
    """Least-squares plane through all objects' transformed bottom vertices."""
    pts = np.vstack([transforms[o.id].apply(o.bottom_vertices) for o in objects])
    return fit_plane(pts)


def optimize(K: CameraIntrinsics, objects: list[SceneObject],
             init_transforms: dict[str, RigidTransform],
             correspondences: dict[str, list[Correspondence]],
             cfg: RefineConfig = RefineConfig(),
             floor: Plane | None = None,
             inliers: dict[str, list[int]] | None = None) -> SceneSolution:
    """Run cfg.steps Adam updates on all poses (and the floor plane).

    The floor starts from the least-squares fit of the initial bottom
    vertices unless one is passed in. Quaternions and the plane normal are
    renormalized after every update. The loss trace is sampled every
    cfg.trace_interval steps plus the final step. A non-finite loss aborts
    with the last finite state and diverged=True.
    """
    if not objects:
        raise ValueError("optimize needs at least one object")
    missing = [o.id for o in objects if o.id not in init_transforms]
    if missing:
        raise ValueError(f"missing initial transforms for {missing}")

    ev = _SceneEval(K, objects, correspondences)
    q, t = _stack_params(objects, transforms=init_transforms)
    plane = (floor if floor is not None else initial_floor(objects, init_transforms)).coeffs.copy()

    n = len(objects)
    m_q, v_q = np.zeros((n, 4)), np.zeros((n, 4))
    m_t, v_t = np.zeros((n, 3)), np.zeros((n, 3))
    m_p, v_p = np.zeros(4), np.zeros(4)
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate

    trace: list[tuple[int, float, float, float, float]] = []
    diverged = False
    prev = (q.copy(), t.copy(), plane.copy())
    prev_step = 0
    final_step = cfg.steps
    for step in range(cfg.steps):
        bd, gq, gt, gp = ev.evaluate(q, t, plane, cfg, want_grad=True,
                                     plane_free=cfg.optimize_plane)
        if not math.isfinite(bd.total):
            logger.warning("joint refinement diverged at step %d; keeping last finite state", step)
            q, t, plane = prev
            diverged = True
            final_step = prev_step
            break
        if step % cfg.trace_interval == 0:
            trace.append((step, bd.reprojection, bd.surface, bd.collision, bd.total))
        if cfg.convergence_loss > 0 and bd.total <= cfg.convergence_loss:
            final_step = step
            break
        prev = (q.copy(), t.copy(), plane.copy())
        prev_step = step

        k = step + 1
        c1, c2 = 1.0 - b1 ** k, 1.0 - b2 ** k
        m_q = b1 * m_q + (1 - b1) * gq
        v_q = b2 * v_q + (1 - b2) * gq * gq
        q = q - lr * (m_q / c1) / (np.sqrt(v_q / c2) + eps)
        m_t = b1 * m_t + (1 - b1) * gt
        v_t = b2 * v_t + (1 - b2) * gt * gt
        t = t - lr * (m_t / c1) / (np.sqrt(v_t / c2) + eps)
        if cfg.optimize_plane:
            m_p = b1 * m_p + (1 - b1) * gp
            v_p = b2 * v_p + (1 - b2) * gp * gp
            plane = plane - lr * (m_p / c1) / (np.sqrt(v_p / c2) + eps)
            plane = plane / np.linalg.norm(plane[:3])
        q = q / np.linalg.norm(q, axis=1, keepdims=True)

    final_bd, _, _, _ = ev.evaluate(q, t, plane, cfg, want_grad=False, plane_free=False)
    if math.isfinite(final_bd.total):
        if not trace or trace[-1][0] != final_step:
            trace.append((final_step, final_bd.reprojection, final_bd.surface,
                          final_bd.collision, final_bd.total))

    transforms = {
        o.id: RigidTransform(canonical_quat(q[i] / np.linalg.norm(q[i])), t[i])
        for i, o in enumerate(objects)
    }
    return SceneSolution(
        transforms=transforms,
        floor=Plane(plane),
        loss_trace=trace,
        inliers=dict(inliers or {}),
        diverged=diverged,
    )
