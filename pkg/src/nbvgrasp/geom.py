"""Core 3D geometry: pinhole camera model, PCA-fitted oriented bounding
boxes, ray/box intersection, and tangent frames on a view sphere.

Conventions used throughout the package:
  - right-handed world frame, +z up
  - camera optical frame: +z forward (viewing direction), +x right,
    +y down; image origin at the top-left corner
  - quaternions stored as (w, x, y, z), unit norm
  - all lengths in meters
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9
EPS_BOX = 1e-4  # half-extent floor for degenerate fits, meters

_Z = np.array([0.0, 0.0, 1.0])


class GeometryError(Exception):
    """Base class for geometry failures."""


class OutOfBoundsError(GeometryError):
    """Pixel coordinate outside the image."""


class InvalidDepthError(GeometryError):
    """Depth sample is zero (invalid)."""


class BehindCameraError(GeometryError):
    """Point has non-positive depth along the optical axis."""


class DegenerateInputError(GeometryError):
    """Point set too small or collinear for a PCA box fit."""


class PoleSingularityError(GeometryError):
    """Tangent frame undefined: radial direction aligned with world z."""


def as_vec3(v) -> np.ndarray:
    """Coerce to a float64 array of shape (3,)."""
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


def normalize(v) -> np.ndarray:
    """Unit vector along v. Raises ValueError on a zero vector."""
    a = as_vec3(v)
    n = float(np.linalg.norm(a))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return a / n


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics (fx, fy focal lengths and cx, cy principal point,
    all in pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix for a unit quaternion (w, x, y, z)."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    n = w * w + x * x + y * y + z * z
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"quaternion norm^2 {n} not within tolerance of 1")
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
             (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
             (R[2, 1] + R[1, 2]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
             (R[2, 1] + R[1, 2]) / s, 0.25 * s]
        )
    q = q / np.linalg.norm(q)
    if q[0] < 0:  # canonical sign for determinism
        q = -q
    return q


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera pose: optical-frame position and orientation quaternion
    (w, x, y, z) with the +z axis as the viewing direction."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        q = np.asarray(self.orientation, dtype=np.float64)
        if q.shape != (4,):
            raise ValueError("orientation must be a quaternion (w, x, y, z)")
        if abs(float(np.linalg.norm(q)) - 1.0) > UNIT_TOL:
            raise ValueError("orientation quaternion must be unit norm")
        object.__setattr__(self, "orientation", q)

    def rotation_matrix(self) -> np.ndarray:
        """Columns are the camera axes (right, down, forward) in world frame."""
        return quat_to_matrix(self.orientation)

    @staticmethod
    def look_at(position, target) -> "CameraPose":
        """Pose at `position` with the optical axis through `target`.

        Image-down is aligned with world-down where possible; a fixed
        frame is chosen when looking straight up or down.
        """
        pos = as_vec3(position)
        fwd = normalize(as_vec3(target) - pos)
        down = -_Z - (-_Z @ fwd) * fwd
        n = np.linalg.norm(down)
        if n < 1e-12:
            x_cam = np.array([1.0, 0.0, 0.0])
            y_cam = np.cross(fwd, x_cam)
        else:
            y_cam = down / n
            x_cam = np.cross(y_cam, fwd)
        R = np.column_stack([x_cam, y_cam, fwd])
        return CameraPose(pos, matrix_to_quat(R))


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Dense depth map in meters; 0 marks an invalid sample."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth data must be a 2D array")
        if np.any(d < 0):
            raise ValueError("depth values must be >= 0")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class OrientedBox:
    """Oriented 3D box: center, rotation (columns = principal axes, det +1)
    and positive half-extents along those axes.

    Containment is closed: points on the boundary count as inside.
    """

    center: np.ndarray
    rotation: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center))
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", R)
        h = as_vec3(self.half_extents)
        if np.any(h <= 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "half_extents", h)

    def corners(self) -> np.ndarray:
        """All 8 corners, shape (8, 3)."""
        signs = np.array(
            [
                [sx, sy, sz]
                for sx in (-1.0, 1.0)
                for sy in (-1.0, 1.0)
                for sz in (-1.0, 1.0)
            ]
        )
        return self.center + (signs * self.half_extents) @ self.rotation.T

    def contains(self, point, slack: float = 0.0) -> bool:
        local = self.rotation.T @ (as_vec3(point) - self.center)
        return bool(np.all(np.abs(local) <= self.half_extents + slack))

    def extent_along(self, axis) -> tuple[float, float]:
        """(min, max) of the box's projection onto a world-frame axis."""
        a = as_vec3(axis)
        c = float(self.center @ a)
        r = float(np.abs(a @ self.rotation) @ self.half_extents)
        return c - r, c + r

    def min_z(self) -> float:
        return self.extent_along(_Z)[0]

    def max_z(self) -> float:
        return self.extent_along(_Z)[1]

    def expanded(self, amount: float) -> "OrientedBox":
        """Box grown isotropically by `amount` on every half-extent."""
        return OrientedBox(self.center, self.rotation, self.half_extents + amount)


def backproject(u: float, v: float, depth: DepthImage, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel (u, v) to a camera-frame 3D point using its depth sample.

    Returns d * K^-1 * (u, v, 1)^T where d is the depth at the pixel.

    Raises:
        OutOfBoundsError: (u, v) outside the image.
        InvalidDepthError: depth at (u, v) is 0.
    """
    if not (0 <= u < depth.width and 0 <= v < depth.height):
        raise OutOfBoundsError(f"pixel ({u}, {v}) outside {depth.width}x{depth.height}")
    d = float(depth.data[int(v), int(u)])
    if d == 0.0:
        raise InvalidDepthError(f"no depth at pixel ({u}, {v})")
    return np.array([d * (u - K.cx) / K.fx, d * (v - K.cy) / K.fy, d])


def project(p, K: CameraIntrinsics) -> tuple[float, float, float]:
    """Project a camera-frame point to pixel coordinates plus depth.

    Inverse of backproject for points in front of the camera.

    Raises:
        BehindCameraError: p.z <= 0.
    """
    p = as_vec3(p)
    if p[2] <= 0:
        raise BehindCameraError(f"point depth {p[2]} is not positive")
    u = K.fx * p[0] / p[2] + K.cx
    v = K.fy * p[1] / p[2] + K.cy
    return float(u), float(v), float(p[2])


def _axis_aligned_fallback(pts: np.ndarray) -> OrientedBox:
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    half = np.maximum((hi - lo) / 2.0, EPS_BOX)
    return OrientedBox((lo + hi) / 2.0, np.eye(3), half)


def fit_oriented_box(points, degenerate: str = "raise") -> OrientedBox:
    """PCA box fit: axes are covariance eigenvectors ordered by descending
    eigenvalue, each sign-fixed so its largest-magnitude component is
    positive (last axis may be re-flipped to keep det +1).

    The box is the tightest one with those axes: its center is the midpoint
    of the projected extents, so every input point is contained. Half-extents
    are floored at EPS_BOX so flat point sets still yield a valid box.

    Args:
        points: >= 3 non-collinear 3D points.
        degenerate: "raise" to raise DegenerateInputError on bad input,
            "aabb" to fall back to an axis-aligned box instead.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if degenerate not in ("raise", "aabb"):
        raise ValueError("degenerate must be 'raise' or 'aabb'")

    def _fail(msg: str) -> OrientedBox:
        if degenerate == "raise":
            raise DegenerateInputError(msg)
        return _axis_aligned_fallback(pts)

    if pts.shape[0] < 3:
        return _fail(f"need at least 3 points, got {pts.shape[0]}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / pts.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    if evals[1] <= 1e-12 * max(evals[2], 1e-12):
        return _fail("points are collinear")

    order = np.argsort(-evals, kind="stable")  # descending, stable on ties
    R = evecs[:, order]
    d = evals[order]

    # Within a (near-)tied eigenvalue block the eigenvectors are an
    # arbitrary basis of the eigenspace; re-pick a deterministic basis
    # aligned with the canonical axes (x, then y, then z).
    tie_tol = 1e-9 * max(float(d[0]), 1e-12)
    start = 0
    while start < 3:
        end = start + 1
        while end < 3 and d[start] - d[end] <= tie_tol:
            end += 1
        if end - start > 1:
            span = R[:, start:end]
            proj = span @ span.T
            picked = []
            for axis in np.eye(3):
                v = proj @ axis
                for u in picked:
                    v = v - (v @ u) * u
                n = float(np.linalg.norm(v))
                if n > 1e-8:
                    picked.append(v / n)
                if len(picked) == end - start:
                    break
            R[:, start:end] = np.column_stack(picked)
        start = end

    for k in range(3):
        col = R[:, k]
        if col[np.argmax(np.abs(col))] < 0:
            R[:, k] = -col
    if np.linalg.det(R) < 0:
        R[:, 2] = -R[:, 2]

    local = centered @ R
    lo = local.min(axis=0)
    hi = local.max(axis=0)
    center = mean + R @ ((lo + hi) / 2.0)
    half = np.maximum((hi - lo) / 2.0, EPS_BOX)
    return OrientedBox(center, R, half)


def ray_box_intersect(origin, direction, box: OrientedBox) -> float | None:
    """Nearest non-negative hit distance of a ray against a box, or None.

    Slab test in the box frame; an origin inside the box yields 0.
    """
    o = box.rotation.T @ (as_vec3(origin) - box.center)
    d = box.rotation.T @ as_vec3(direction)
    t0, t1 = -np.inf, np.inf
    for i in range(3):
        if abs(d[i]) < 1e-15:
            if abs(o[i]) > box.half_extents[i]:
                return None
            continue
        ta = (-box.half_extents[i] - o[i]) / d[i]
        tb = (box.half_extents[i] - o[i]) / d[i]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return None
    if t1 < 0:
        return None
    return max(float(t0), 0.0)


def tangent_basis(x, s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal frame at x on a sphere centered at s.

    Returns (e_rad, e_up, e_az): outward radial, up-slope tangent
    (positive world-z on the upper hemisphere) and horizontal azimuthal
    tangent (zero world-z).

    Raises:
        PoleSingularityError: radial direction within tolerance of +-z.
        DegenerateInputError: x equals s.
    """
    r = as_vec3(x) - as_vec3(s)
    n = float(np.linalg.norm(r))
    if n == 0.0:
        raise DegenerateInputError("x coincides with the sphere center")
    e_rad = r / n
    if abs(e_rad[2]) >= 1.0 - UNIT_TOL:
        raise PoleSingularityError("radial direction aligned with world z")
    az = np.cross(_Z, e_rad)
    e_az = az / np.linalg.norm(az)
    e_up = np.cross(e_rad, e_az)
    return e_rad, e_up, e_az
