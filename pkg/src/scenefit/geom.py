"""Core geometric types and operations: quaternions, rigid transforms, pinhole
projection, and plane fitting.

Conventions used throughout the library:

* Right-handed coordinates; the camera looks along +z, so visible points have
  positive depth. Image origin is top-left, u grows rightward, v downward.
* Quaternions are stored (w, x, y, z), Hamilton convention, and kept unit
  length.
* Points are float64 numpy arrays: (3,) for 3D points, (2,) for pixels, (4,)
  for homogeneous points. Batches stack along the first axis.
* A plane is the homogeneous 4-vector (a, b, c, d) with unit normal (a, b, c);
  the signed distance of a point P is a*x + b*y + c*z + d.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, DepthNonPositive


@dataclass(frozen=True)
class Tolerances:
    """Numeric tolerances shared by the geometry layer.

    Centralized so tests and callers agree on what "unit" and "degenerate"
    mean everywhere.
    """

    unit_norm: float = 1e-9        # max |norm - 1| after renormalization
    quat_input: float = 1e-6       # |norm - 1| beyond which inputs are renormalized
    depth_min: float = 1e-9        # projection depth at or below this is invalid
    collinear: float = 1e-9        # relative eigenvalue ratio for collinearity
    zero_vector: float = 1e-12     # norms below this count as zero


DEFAULT_TOL = Tolerances()


def normalize_quat(q: np.ndarray, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """Return q scaled to unit norm; reject (near-)zero quaternions."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    n = float(np.linalg.norm(q))
    if n < tol.zero_vector:
        raise DegenerateGeometry("zero quaternion does not encode a rotation")
    return q / n


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Fix the quaternion sign so w >= 0 (first nonzero component positive on w == 0)."""
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c > 0.0:
            return q.copy()
        if c < 0.0:
            return -q
    return q.copy()


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, both (w, x, y, z)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Unit quaternion for a rotation of angle_rad about axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < DEFAULT_TOL.zero_vector:
        raise DegenerateGeometry("rotation axis must be nonzero")
    half = 0.5 * angle_rad
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


def quat_to_matrix(q: np.ndarray, tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """Convert a unit quaternion (w, x, y, z) to a 3x3 rotation matrix.

    Inputs whose norm deviates from 1 by more than tol.quat_input are
    renormalized first; a zero quaternion is rejected.
    """
    q = np.asarray(q, dtype=np.float64)
    n = float(np.linalg.norm(q))
    if n < tol.zero_vector:
        raise DegenerateGeometry("zero quaternion does not encode a rotation")
    if abs(n - 1.0) > tol.quat_input:
        q = q / n
    return _quat_to_matrix_raw(q)


def _quat_to_matrix_raw(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from the unit-quaternion polynomial form, no checks.

    Used by the differentiable loss code, which evaluates the same polynomial
    the gradient formulas differentiate.
    """
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def quat_to_matrix_jacobian(q: np.ndarray) -> np.ndarray:
    """Partial derivatives of the raw quaternion-to-matrix polynomial.

    Returns a (4, 3, 3) array: entry [k] is dR/dq_k for q = (w, x, y, z).
    """
    w, x, y, z = q
    return 2.0 * np.array([
        [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Convert a rotation matrix to a unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    trace = R[0, 0] + R[1, 1] + R[2, 2]
    if trace > 0.0:
        s = 0.5 / np.sqrt(trace + 1.0)
        q = np.array([
            0.25 / s,
            (R[2, 1] - R[1, 2]) * s,
            (R[0, 2] - R[2, 0]) * s,
            (R[1, 0] - R[0, 1]) * s,
        ])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([
            (R[2, 1] - R[1, 2]) / s,
            0.25 * s,
            (R[0, 1] + R[1, 0]) / s,
            (R[0, 2] + R[2, 0]) / s,
        ])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([
            (R[0, 2] - R[2, 0]) / s,
            (R[0, 1] + R[1, 0]) / s,
            0.25 * s,
            (R[1, 2] + R[2, 1]) / s,
        ])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([
            (R[1, 0] - R[0, 1]) / s,
            (R[0, 2] + R[2, 0]) / s,
            (R[1, 2] + R[2, 1]) / s,
            0.25 * s,
        ])
    return canonical_quat(q / np.linalg.norm(q))


@dataclass(frozen=True)
class RigidTransform:
    """A rigid body transform: unit-quaternion rotation plus translation.

    As a 3x4 matrix this is [R | T]; applied to a point P it yields R @ P + T.
    """

    rotation: np.ndarray      # (4,) unit quaternion, (w, x, y, z)
    translation: np.ndarray   # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", normalize_quat(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"translation must have 3 components, got shape {t.shape}")
        object.__setattr__(self, "translation", t.copy())

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "RigidTransform":
        return RigidTransform(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix34(self) -> np.ndarray:
        """The 3x4 matrix [R | T]."""
        return np.column_stack([self.rotation_matrix(), self.translation])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        pts = np.asarray(points, dtype=np.float64)
        R = self.rotation_matrix()
        if pts.ndim == 1:
            return R @ pts + self.translation
        return pts @ R.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: apply `other` first, then `self`."""
        q = normalize_quat(quat_multiply(self.rotation, other.rotation))
        t = self.apply(other.translation)
        return RigidTransform(q, t)

    def inverse(self) -> "RigidTransform":
        q_inv = quat_conjugate(self.rotation)
        R_inv = quat_to_matrix(q_inv)
        return RigidTransform(q_inv, -(R_inv @ self.translation))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point, optional skew (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, self.skew, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @staticmethod
    def from_fov(width: int = 1024, height: int = 1024,
                 vfov_deg: float = 60.0) -> "CameraIntrinsics":
        """Nominal square-pixel camera from a vertical field of view."""
        f = (height / 2.0) / np.tan(np.radians(vfov_deg) / 2.0)
        return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0)


def project(K: CameraIntrinsics, tr: RigidTransform, point: np.ndarray,
            tol: Tolerances = DEFAULT_TOL) -> np.ndarray:
    """Project a 3D point through [R | T] and the pinhole K onto the image.

    `point` may be a (3,) point or a (4,) homogeneous point (dehomogenized
    internally). Raises DepthNonPositive when the transformed depth is at or
    below tol.depth_min.
    """
    p = np.asarray(point, dtype=np.float64)
    if p.shape == (4,):
        if abs(p[3]) < tol.zero_vector:
            raise DegenerateGeometry("homogeneous point with w = 0 is not a finite point")
        p = p[:3] / p[3]
    elif p.shape != (3,):
        raise ValueError(f"point must be (3,) or (4,), got shape {p.shape}")
    X = tr.apply(p)
    s = X[2]
    if s <= tol.depth_min:
        raise DepthNonPositive(f"projected depth {s:.3e} is not positive")
    u = (K.fx * X[0] + K.skew * X[1] + K.cx * s) / s
    v = (K.fy * X[1] + K.cy * s) / s
    return np.array([u, v])


def project_points(K: CameraIntrinsics, tr: RigidTransform,
                   points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch projection of (N, 3) points; returns ((N, 2) pixels, (N,) depths).

    No depth check: callers decide how to treat non-positive depths (pixel
    values for those rows are computed against the raw depth and may be
    meaningless).
    """
    pts = np.asarray(points, dtype=np.float64)
    X = tr.apply(pts)
    s = X[:, 2]
    u = (K.fx * X[:, 0] + K.skew * X[:, 1] + K.cx * s) / s
    v = (K.fy * X[:, 1] + K.cy * s) / s
    return np.column_stack([u, v]), s


@dataclass(frozen=True)
class Plane:
    """Plane as homogeneous coefficients (a, b, c, d) with unit normal (a, b, c)."""

    coeffs: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0, 0.0]))

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.shape != (4,):
            raise ValueError(f"plane needs 4 coefficients, got shape {c.shape}")
        n = float(np.linalg.norm(c[:3]))
        if n < DEFAULT_TOL.zero_vector:
            raise DegenerateGeometry("plane normal must be nonzero")
        object.__setattr__(self, "coeffs", c / n)

    @property
    def normal(self) -> np.ndarray:
        return self.coeffs[:3]

    @property
    def offset(self) -> float:
        return float(self.coeffs[3])

    def transformed(self, tr: RigidTransform) -> "Plane":
        """The plane's image under tr (covariant map of the homogeneous coeffs)."""
        n = tr.rotation_matrix() @ self.normal
        d = self.offset - float(n @ tr.translation)
        return Plane(np.concatenate([n, [d]]))


def plane_residual(plane: Plane, points: np.ndarray) -> np.ndarray | float:
    """Signed distance(s) a*x + b*y + c*z + d for one point or an (N, 3) batch."""
    pts = np.asarray(points, dtype=np.float64)
    r = pts @ plane.normal + plane.offset
    if pts.ndim == 1:
        return float(r)
    return r


def fit_plane(points: np.ndarray, tol: Tolerances = DEFAULT_TOL) -> Plane:
    """Least-squares plane through a point cloud.

    Eigen-decomposition of the centered 3x3 covariance; the eigenvector of
    the smallest eigenvalue is the normal. Orientation is fixed by making the
    normal's largest-magnitude component positive. Raises DegenerateGeometry
    for fewer than 3 points or (near-)collinear input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise DegenerateGeometry("plane fitting needs at least 3 points of shape (N, 3)")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    # Collinear (or coincident) points: the two smallest eigenvalues both vanish.
    scale = max(float(evals[2]), tol.zero_vector)
    if evals[1] <= tol.collinear * scale:
        raise DegenerateGeometry("points are collinear within tolerance")
    normal = evecs[:, 0]
    k = int(np.argmax(np.abs(normal)))
    if normal[k] < 0:
        normal = -normal
    d = -float(normal @ centroid)
    return Plane(np.concatenate([normal, [d]]))
