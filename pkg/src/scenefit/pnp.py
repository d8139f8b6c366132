"""Classic Perspective-n-Point: a P3P minimal solver with 4th-point
disambiguation, RANSAC over noisy correspondences, and Gauss-Newton pose
refinement on the inlier set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, NoConsensus, NoSolution, TooFewCorrespondences
from .geom import (
    CameraIntrinsics,
    RigidTransform,
    canonical_quat,
    matrix_to_quat,
    project_points,
    quat_to_matrix_jacobian,
    _quat_to_matrix_raw,
)

MIN_CORRESPONDENCES = 4


@dataclass(frozen=True)
class Correspondence:
    """One 3D object point matched to a 2D image point.

    similarity is the descriptor cosine similarity of the match, in [-1, 1];
    synthetic correspondences use 1.0.
    """

    object_point: np.ndarray   # (3,) object frame
    image_point: np.ndarray    # (2,) pixels
    similarity: float = 1.0

    def __post_init__(self):
        op = np.asarray(self.object_point, dtype=np.float64)
        ip = np.asarray(self.image_point, dtype=np.float64)
        if op.shape != (3,) or ip.shape != (2,):
            raise ValueError("correspondence needs a (3,) object point and a (2,) image point")
        if not (-1.0 - 1e-9 <= self.similarity <= 1.0 + 1e-9):
            raise ValueError(f"similarity {self.similarity} outside [-1, 1]")
        object.__setattr__(self, "object_point", op.copy())
        object.__setattr__(self, "image_point", ip.copy())


@dataclass(frozen=True)
class RansacConfig:
    """Knobs for ransac_pnp.

    inlier_threshold_px defaults (when None) to 2% of the image diagonal,
    estimated from the principal point as the center of a 2*cx by 2*cy image.
    """

    inlier_threshold_px: float | None = None
    max_iters: int = 2000
    confidence: float = 0.999
    seed: int = 0
    refine_iters: int = 50

    def resolve_threshold(self, K: CameraIntrinsics) -> float:
        if self.inlier_threshold_px is not None:
            return float(self.inlier_threshold_px)
        return 0.02 * 2.0 * math.hypot(K.cx, K.cy)


@dataclass
class RansacResult:
    pose: RigidTransform
    inlier_indices: list[int]
    iterations_run: int


def _correspondence_arrays(correspondences) -> tuple[np.ndarray, np.ndarray]:
    P = np.array([c.object_point for c in correspondences], dtype=np.float64)
    U = np.array([c.image_point for c in correspondences], dtype=np.float64)
    return P, U


def reprojection_error_single(K: CameraIntrinsics, tr: RigidTransform,
                              c: Correspondence) -> float:
    """Pixel distance between the observed point and the reprojection.

    Points at or behind the camera plane get +inf, so RANSAC scoring can
    treat them as automatic outliers.
    """
    uv, s = project_points(K, tr, c.object_point[None, :])
    if s[0] <= 1e-9:
        return math.inf
    return float(np.linalg.norm(uv[0] - c.image_point))


def _reprojection_errors(K: CameraIntrinsics, tr: RigidTransform,
                         P: np.ndarray, U: np.ndarray) -> np.ndarray:
    uv, s = project_points(K, tr, P)
    err = np.linalg.norm(uv - U, axis=1)
    err[s <= 1e-9] = np.inf
    return err


# --- P3P minimal solver -----------------------------------------------------

def _p3p_quartic(A2, B2, C2, ca, cb, cg) -> np.ndarray:
    """Quartic in v = s3/s1 from the law-of-cosines system (resultant in u)."""
    a4 = (A2 - B2 - C2) ** 2 - 4.0 * B2 * C2 * ca * ca
    a3 = 4.0 * (-A2 * A2 * cb + A2 * B2 * ca * cg + A2 * B2 * cb + 2 * A2 * C2 * cb
                - B2 * B2 * ca * cg + 2 * B2 * C2 * ca * ca * cb + B2 * C2 * ca * cg
                - B2 * C2 * cb - C2 * C2 * cb)
    a2 = 2.0 * (2 * A2 * A2 * cb * cb + A2 * A2 - 4 * A2 * B2 * ca * cb * cg
                - 2 * A2 * B2 * cg * cg - 4 * A2 * C2 * cb * cb - 2 * A2 * C2
                + 2 * B2 * B2 * ca * ca + 2 * B2 * B2 * cg * cg - B2 * B2
                - 2 * B2 * C2 * ca * ca - 4 * B2 * C2 * ca * cb * cg
                + 2 * C2 * C2 * cb * cb + C2 * C2)
    a1 = 4.0 * (-A2 * A2 * cb + A2 * B2 * ca * cg + 2 * A2 * B2 * cb * cg * cg
                - A2 * B2 * cb + 2 * A2 * C2 * cb - B2 * B2 * ca * cg
                + B2 * C2 * ca * cg + B2 * C2 * cb - C2 * C2 * cb)
    a0 = (A2 + B2 - C2) ** 2 - 4.0 * A2 * B2 * cg * cg
    return np.array([a4, a3, a2, a1, a0])


def _polish_distances(s: tuple[float, float, float], A2, B2, C2, ca, cb, cg):
    """Newton-polish the camera distances on the three cosine-law residuals."""
    s1, s2, s3 = s
    scale = max(A2, B2, C2)
    for _ in range(10):
        r = np.array([
            s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - A2,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - B2,
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - C2,
        ])
        if np.abs(r).max() < 1e-14 * scale:
            break
        J = np.array([
            [0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
            [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
            [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0],
        ])
        try:
            d = np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            break
        s1, s2, s3 = s1 - d[0], s2 - d[1], s3 - d[2]
    return s1, s2, s3


def _absolute_orientation(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rigid transform mapping src points onto dst (Kabsch)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cd - R @ cs


def solve_minimal(K: CameraIntrinsics, sample: list[Correspondence]) -> list[RigidTransform]:
    """P3P on the first 3 correspondences, disambiguated by the 4th.

    Returns pose candidates ranked by the 4th point's reprojection error
    (best first). Raises DegenerateGeometry for collinear object points and
    NoSolution when no quartic root yields positive camera distances.
    """
    if len(sample) < 4:
        raise TooFewCorrespondences(f"minimal sample needs 4 correspondences, got {len(sample)}")
    P, U = _correspondence_arrays(sample[:4])
    P3, U3 = P[:3], U[:3]

    cross = np.cross(P3[1] - P3[0], P3[2] - P3[0])
    edge = max(np.linalg.norm(P3[1] - P3[0]), np.linalg.norm(P3[2] - P3[0]))
    if np.linalg.norm(cross) <= 1e-9 * max(edge * edge, 1e-300):
        raise DegenerateGeometry("the first 3 object points are collinear")

    Kinv = np.linalg.inv(K.matrix())
    rays = np.column_stack([U3, np.ones(3)]) @ Kinv.T
    norms = np.linalg.norm(rays, axis=1)
    if (norms < 1e-12).any():
        raise DegenerateGeometry("image ray with zero norm")
    rays /= norms[:, None]

    A2 = float(np.sum((P3[1] - P3[2]) ** 2))
    B2 = float(np.sum((P3[0] - P3[2]) ** 2))
    C2 = float(np.sum((P3[0] - P3[1]) ** 2))
    ca = float(rays[1] @ rays[2])
    cb = float(rays[0] @ rays[2])
    cg = float(rays[0] @ rays[1])

    coef = _p3p_quartic(A2, B2, C2, ca, cb, cg)
    scale = np.abs(coef).max()
    if scale == 0.0 or not np.isfinite(scale):
        raise NoSolution("degenerate quartic")
    coef = coef / scale
    if abs(coef[0]) < 1e-14:
        roots = np.roots(coef[1:]) if np.abs(coef[1:]).max() > 0 else np.array([])
    else:
        roots = np.roots(coef)
    dcoef = np.polyder(coef)

    poses: list[tuple[float, RigidTransform]] = []
    seen: list[np.ndarray] = []
    for root in roots:
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        for _ in range(4):  # polish the real root before using it
            fv = np.polyval(coef, v)
            dfv = np.polyval(dcoef, v)
            if dfv == 0.0:
                break
            v -= fv / dfv
        if v <= 0.0:
            continue
        s1den = 1.0 + v * v - 2.0 * v * cb
        if s1den <= 0.0:
            continue
        s1 = math.sqrt(B2 / s1den)
        denom = 2.0 * (cg - v * ca)
        if abs(denom) > 1e-9:
            u_cands = [(((A2 - C2) / B2) * s1den - v * v + 1.0) / denom]
        else:
            # u elimination degenerates; fall back to the quadratic in u.
            disc = cg * cg - (1.0 - (C2 / B2) * s1den)
            u_cands = [cg + math.sqrt(disc), cg - math.sqrt(disc)] if disc >= 0 else []
        for u in u_cands:
            if u <= 0.0:
                continue
            lhs = u * u + v * v - 2.0 * u * v * ca
            rhs = (A2 / B2) * s1den
            if abs(lhs - rhs) > 1e-4 * max(1.0, abs(rhs)):
                continue
            s1p, s2p, s3p = _polish_distances((s1, u * s1, v * s1), A2, B2, C2, ca, cb, cg)
            if min(s1p, s2p, s3p) <= 0.0:
                continue
            Xc = np.array([s1p * rays[0], s2p * rays[1], s3p * rays[2]])
            R, t = _absolute_orientation(P3, Xc)
            tr = RigidTransform(matrix_to_quat(R), t)
            depths = tr.apply(P3)[:, 2]
            if (depths <= 0).any():
                continue
            key = np.concatenate([tr.rotation, tr.translation])
            if any(np.allclose(key, k, atol=1e-8) for k in seen):
                continue
            seen.append(key)
            err4 = _reprojection_errors(K, tr, P[3:4], U[3:4])[0]
            poses.append((err4, tr))

    if not poses:
        raise NoSolution("no P3P root with positive camera distances")
    poses.sort(key=lambda item: item[0])
    return [tr for _, tr in poses]


# --- Gauss-Newton refinement -------------------------------------------------

def _residuals_and_jacobian(K: CameraIntrinsics, q: np.ndarray, t: np.ndarray,
                            P: np.ndarray, U: np.ndarray):
    """Stacked pixel residuals (observed - projected) and their Jacobian wrt (q, t).

    Returns (residuals (2m,), jacobian (2m, 7)) or None when any point falls
    at or behind the camera.
    """
    R = _quat_to_matrix_raw(q)
    X = P @ R.T + t
    s = X[:, 2]
    if (s <= 1e-9).any():
        return None
    u = (K.fx * X[:, 0] + K.skew * X[:, 1] + K.cx * s) / s
    v = (K.fy * X[:, 1] + K.cy * s) / s
    res = np.column_stack([U[:, 0] - u, U[:, 1] - v]).ravel()

    m = P.shape[0]
    du_dX = np.column_stack([K.fx / s, np.full(m, K.skew) / s, (K.cx - u) / s])
    dv_dX = np.column_stack([np.zeros(m), K.fy / s, (K.cy - v) / s])
    dR = quat_to_matrix_jacobian(q)          # (4, 3, 3)
    dX_dq = np.einsum("kab,mb->mka", dR, P)  # (m, 4, 3)

    J = np.empty((2 * m, 7))
    J[0::2, :4] = -np.einsum("ma,mka->mk", du_dX, dX_dq)
    J[1::2, :4] = -np.einsum("ma,mka->mk", dv_dX, dX_dq)
    J[0::2, 4:] = -du_dX
    J[1::2, 4:] = -dv_dX
    return res, J


def refine_pose(K: CameraIntrinsics, tr: RigidTransform, P: np.ndarray,
                U: np.ndarray, max_iters: int = 50) -> RigidTransform:
    """Damped Gauss-Newton on (quaternion, translation), minimizing the summed
    squared reprojection error. Never returns a pose worse than the input.
    """
    q = tr.rotation.copy()
    t = tr.translation.copy()

    def cost(qc, tc):
        out = _residuals_and_jacobian(K, qc, tc, P, U)
        return math.inf if out is None else float(out[0] @ out[0])

    best_q, best_t = q.copy(), t.copy()
    best_cost = cost(q, t)
    lam = 1e-6
    for _ in range(max_iters):
        out = _residuals_and_jacobian(K, q, t, P, U)
        if out is None:
            break
        res, J = out
        JtJ = J.T @ J
        g = J.T @ res
        stepped = False
        for _ in range(8):  # grow damping until the step helps
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            q_new = q + delta[:4]
            nq = np.linalg.norm(q_new)
            if nq < 1e-12:
                lam *= 10.0
                continue
            q_new /= nq
            t_new = t + delta[4:]
            c_new = cost(q_new, t_new)
            if c_new < best_cost:
                q, t = q_new, t_new
                best_q, best_t, best_cost = q_new.copy(), t_new.copy(), c_new
                lam = max(lam * 0.3, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            break
        if best_cost <= 1e-24:
            break
    return RigidTransform(canonical_quat(best_q), best_t)


# --- RANSAC -------------------------------------------------------------------

def ransac_pnp(K: CameraIntrinsics, correspondences: list[Correspondence],
               config: RansacConfig = RansacConfig()) -> RansacResult:
    """Robust pose estimation: repeated minimal P3P fits with inlier counting,
    adaptive early stop, and Gauss-Newton refinement on the final inlier set.

    Deterministic for a fixed config.seed. Raises TooFewCorrespondences below
    4 inputs and NoConsensus when the best model has fewer than 4 inliers.
    """
    n = len(correspondences)
    if n < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(f"need at least {MIN_CORRESPONDENCES} correspondences, got {n}")
    P, U = _correspondence_arrays(correspondences)
    threshold = config.resolve_threshold(K)
    rng = np.random.default_rng(config.seed)

    best_pose: RigidTransform | None = None
    best_count = 0
    best_mean = math.inf
    needed = config.max_iters
    it = 0
    while it < min(needed, config.max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        sample = [correspondences[i] for i in idx]
        try:
            candidates = solve_minimal(K, sample)
        except (DegenerateGeometry, NoSolution):
            continue
        for cand in candidates:
            err = _reprojection_errors(K, cand, P, U)
            mask = err <= threshold
            count = int(mask.sum())
            if count == 0:
                continue
            mean_err = float(err[mask].mean())
            if count > best_count or (count == best_count and mean_err < best_mean):
                best_pose, best_count, best_mean = cand, count, mean_err
                w = count / n
                if w >= 1.0:
                    needed = it
                elif w > 0:
                    denom = math.log(max(1.0 - w ** 4, 1e-12))
                    needed = min(config.max_iters,
                                 int(math.ceil(math.log(1.0 - config.confidence) / denom)))

    if best_pose is None or best_count < MIN_CORRESPONDENCES:
        raise NoConsensus(f"best model has {best_count} inliers (< {MIN_CORRESPONDENCES})")

    err = _reprojection_errors(K, best_pose, P, U)
    inlier_mask = err <= threshold
    refined = refine_pose(K, best_pose, P[inlier_mask], U[inlier_mask],
                          max_iters=config.refine_iters)
    ref_err = _reprojection_errors(K, refined, P, U)
    ref_mask = ref_err <= threshold

    # Keep whichever pose classifies more inliers (lower mean error on ties);
    # refinement cannot get worse on its own inlier set, but the classified
    # set may shift near the threshold.
    ref_count = int(ref_mask.sum())
    ref_mean = float(ref_err[ref_mask].mean()) if ref_count else math.inf
    if (ref_count, -ref_mean) >= (best_count, -best_mean) and ref_count >= MIN_CORRESPONDENCES:
        pose, mask = refined, ref_mask
    else:
        pose, mask = best_pose, inlier_mask

    pose = RigidTransform(canonical_quat(pose.rotation), pose.translation)
    return RansacResult(pose=pose,
                        inlier_indices=[int(i) for i in np.flatnonzero(mask)],
                        iterations_run=it)
