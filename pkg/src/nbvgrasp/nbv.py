"""Velocity fields on a view sphere for next-best-view planning.

A target point and one or more occluder points induce a tangential
velocity field on a camera sphere: at camera position x the field pushes
the view around the sphere toward the ray that leaves the occluder
through the target, where the occluder no longer blocks the line of
sight.  The field strength falls to zero as the camera approaches that
ray, so integrating the field walks the camera to a stagnation point
that serves as the next viewpoint.

Cameras are constrained to the upper hemisphere, and below 45 degrees of
elevation any down-slope component of the field is cut so trajectories
never dive toward the table.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geom import (
    DegenerateInputError,
    OrientedBox,
    PoleSingularityError,
    as_vec3,
    normalize,
    tangent_basis,
)

REJECTION_TOL = 1e-9
TRUNCATION_ELEVATION = np.deg2rad(45.0)

DEFAULT_STEP_FRACTION = 0.02  # Euler step as a fraction of the sphere radius
DEFAULT_EPS_STAG = 1e-3
DEFAULT_MAX_STEPS = 2000


class DegenerateGeometryError(Exception):
    """Field query with coincident points (target = occluder, or x = occluder)."""


@dataclass(frozen=True, eq=False)
class ViewSphere:
    """Camera sphere: center and radius of the viewing hemisphere."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def project(self, x, hemisphere: bool = True) -> np.ndarray:
        """Nearest point on the sphere; optionally clamped to elevation >= 0."""
        r = as_vec3(x) - self.center
        if hemisphere and r[2] < 0.0:
            r = r.copy()
            r[2] = 0.0
        n = float(np.linalg.norm(r))
        if n == 0.0:
            raise DegenerateGeometryError("cannot project the sphere center")
        return self.center + r * (self.radius / n)

    def elevation(self, x) -> float:
        """Elevation angle of x above the sphere's equatorial plane, radians."""
        r = normalize(as_vec3(x) - self.center)
        return float(np.arcsin(np.clip(r[2], -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class FieldSample:
    """One field evaluation: tangent velocity, strength coefficient in
    [0, 1], whether truncation altered the velocity, and how many
    degenerate contributions were skipped."""

    velocity: np.ndarray
    beta: float
    truncated: bool = False
    skipped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "velocity", as_vec3(self.velocity))

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.velocity))


@dataclass(frozen=True, eq=False)
class OccluderPoints:
    """Occluder sample points driving the field: box centers plus the
    eight box corners of every occluder."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("occluder point set must be non-empty")
        object.__setattr__(self, "points", pts)

    @staticmethod
    def from_boxes(boxes: list[OrientedBox]) -> "OccluderPoints":
        pts = []
        for box in boxes:
            pts.append(box.center)
            pts.extend(box.corners())
        return OccluderPoints(np.asarray(pts))

    @staticmethod
    def from_points(points) -> "OccluderPoints":
        return OccluderPoints(np.asarray(points, dtype=np.float64))

    def __len__(self) -> int:
        return int(self.points.shape[0])


def _contribution(x, sphere, p_target, p_oc):
    """Strength and unit direction of one occluder point's contribution.

    Returns (beta, e_v) where e_v is None when the rejection of the
    escape direction onto the tangent space vanishes (antipodal
    configuration).  Raises DegenerateGeometryError when the geometry
    does not define a direction at all.
    """
    x = as_vec3(x)
    p_oc = as_vec3(p_oc)
    diff = as_vec3(p_target) - p_oc
    if float(np.linalg.norm(diff)) < 1e-12:
        raise DegenerateGeometryError("target coincides with an occluder point")
    e_oc = diff / np.linalg.norm(diff)
    off = x - p_oc
    if float(np.linalg.norm(off)) < 1e-12:
        raise DegenerateGeometryError("camera coincides with an occluder point")
    e_rad = normalize(x - sphere.center)
    beta = float(np.arccos(np.clip(e_oc @ (off / np.linalg.norm(off)), -1.0, 1.0)) / np.pi)
    rej = e_oc - (e_oc @ e_rad) * e_rad
    n = float(np.linalg.norm(rej))
    if n < REJECTION_TOL:
        return beta, None
    return beta, rej / n


def field_single(x, sphere: ViewSphere, p_target, p_oc) -> FieldSample:
    """Field of a single occluder point at camera position x.

    The velocity is beta * e_v where e_v is the unit rejection of the
    occluder-to-target direction onto the tangent space at x, and beta
    in [0, 1] is the angle (over pi) between that direction and the
    occluder-to-camera direction.  beta = 0 exactly on the escape ray.

    When the rejection vanishes (camera antipodal to the escape ray) the
    azimuthal tangent direction is used as a deterministic fallback.

    Raises:
        DegenerateGeometryError: p_target equals p_oc, or x equals p_oc.
        PoleSingularityError: fallback direction needed while x sits at
            the sphere pole (no azimuth is defined there).
    """
    beta, e_v = _contribution(x, sphere, p_target, p_oc)
    if e_v is None:
        _, _, e_az = tangent_basis(x, sphere.center)
        e_v = e_az
    return FieldSample(velocity=beta * e_v, beta=beta)


def field_multi(x, sphere: ViewSphere, p_target, occ: OccluderPoints) -> FieldSample:
    """Superposed field of every occluder point: velocity = sum of
    beta_m * e_v,m; the reported beta is the mean of the contributing
    betas.

    Contributions with a vanishing rejection add zero velocity but their
    beta still enters the mean.  Contributions whose geometry is
    degenerate (occluder point equal to the target or to x) are skipped
    and counted in `skipped`.
    """
    velocity = np.zeros(3)
    betas = []
    skipped = 0
    for p_oc in occ.points:
        try:
            beta, e_v = _contribution(x, sphere, p_target, p_oc)
        except DegenerateGeometryError:
            skipped += 1
            continue
        betas.append(beta)
        if e_v is not None:
            velocity = velocity + beta * e_v
    mean_beta = float(np.mean(betas)) if betas else 0.0
    return FieldSample(velocity=velocity, beta=mean_beta, skipped=skipped)


def truncate_downward(sample: FieldSample, x, sphere: ViewSphere) -> FieldSample:
    """Cut the down-slope component of a field sample below 45 degrees
    of elevation.

    The velocity is decomposed in the tangent frame at x into an
    up-slope coefficient a and an azimuthal coefficient b; below the
    elevation threshold a negative a is clamped to zero, which keeps the
    result tangent and makes its world-z component non-negative.
    """
    if sphere.elevation(x) >= TRUNCATION_ELEVATION:
        return FieldSample(sample.velocity, sample.beta, False, sample.skipped)
    _, e_up, e_az = tangent_basis(x, sphere.center)
    a = float(sample.velocity @ e_up)
    b = float(sample.velocity @ e_az)
    if a >= 0.0:
        return FieldSample(sample.velocity, sample.beta, False, sample.skipped)
    return FieldSample(b * e_az, sample.beta, True, sample.skipped)


class TrajectoryStatus(enum.Enum):
    STAGNATED = "stagnated"
    BUDGET = "budget"


@dataclass(frozen=True, eq=False)
class IntegrationResult:
    """Integrated field trajectory.

    `points` holds the positions after each accepted Euler step (the
    start position is not included); `speeds` and `betas` hold one entry
    per field evaluation — evaluation k happens at the position before
    step k, and when the integration stagnates the last entry is the
    terminal evaluation at `final`.
    """

    points: list = field(default_factory=list)
    status: TrajectoryStatus = TrajectoryStatus.STAGNATED
    final: np.ndarray = None
    speeds: list = field(default_factory=list)
    betas: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.points)


def integrate_trajectory(
    x0,
    sphere: ViewSphere,
    p_target,
    occ: OccluderPoints,
    step: float | None = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    eps_stag: float = DEFAULT_EPS_STAG,
) -> IntegrationResult:
    """Walk the truncated field by explicit Euler steps on the sphere.

    Each step moves step * velocity and re-projects onto the sphere,
    clamping to the upper hemisphere.  Integration stops when the
    truncated field speed drops below eps_stag (STAGNATED) or after
    max_steps accepted steps (BUDGET).

    Args:
        x0: start position on the sphere.
        step: Euler step length; defaults to 0.02 * sphere radius.
        max_steps: step budget; 0 yields an empty BUDGET trajectory.
        eps_stag: stagnation speed threshold.
    """
    if step is None:
        step = DEFAULT_STEP_FRACTION * sphere.radius
    if not step > 0:
        raise ValueError("step must be positive")
    x = sphere.project(x0)
    points: list[np.ndarray] = []
    speeds: list[float] = []
    betas: list[float] = []
    for _ in range(max_steps):
        sample = truncate_downward(field_multi(x, sphere, p_target, occ), x, sphere)
        speeds.append(sample.speed)
        betas.append(sample.beta)
        if sample.speed < eps_stag:
            return IntegrationResult(points, TrajectoryStatus.STAGNATED, x, speeds, betas)
        x = sphere.project(x + step * sample.velocity)
        points.append(x)
    return IntegrationResult(points, TrajectoryStatus.BUDGET, x, speeds, betas)
