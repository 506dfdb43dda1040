"""Deterministic synthetic environment for closed-loop experiments.

Stands in for the robot and the learned perception stack: ground-truth
box scenes, ray-cast target visibility, a noisy detector stub, a
synthetic grasp-observation generator with von Mises-Fisher direction
noise, and a voting oracle that guesses likely occluders when the
target has vanished from view.  Every operation is pure and
bit-deterministic given (scene, seed), so whole episodes replay
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import GraspObservation
from .geom import CameraPose, OrientedBox, as_vec3, normalize, ray_box_intersect
from .relations import xy_hulls_overlap
from .scene import Detection, ObjectDescription, SceneSnapshot

DEFAULT_VISIBILITY_GRID = 8
DEFAULT_V_MIN = 0.1
KAPPA_CLAMP = 1e6

EXPERT_XY = "xy-overlap"
EXPERT_LOS = "line-of-sight"
EXPERT_PROXIMITY = "proximity"


class UnknownLabelError(KeyError):
    """Raised when an operation names an object absent from the scene."""


class NoHypothesisError(RuntimeError):
    """Raised when occluder inference has no target region to reason about."""


@dataclass(frozen=True, eq=False)
class SimObject:
    label: str
    description: ObjectDescription
    box: OrientedBox

    def __post_init__(self):
        if self.label != self.description.label:
            raise ValueError("label must match the description label")


@dataclass(frozen=True, eq=False)
class GroundTruthScene:
    """Immutable ground-truth arrangement of boxes on a table."""

    objects: tuple[SimObject, ...]
    target_label: str
    table_height: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels):
            raise ValueError("object labels must be unique")
        if self.target_label not in labels:
            raise ValueError(f"target label {self.target_label!r} not in scene")
        for obj in self.objects:
            if obj.box.min_z() < self.table_height - 1e-9:
                raise ValueError(f"object {obj.label!r} extends below the table")

    def labels(self) -> tuple[str, ...]:
        return tuple(o.label for o in self.objects)

    def get(self, label: str) -> SimObject:
        for obj in self.objects:
            if obj.label == label:
                return obj
        raise UnknownLabelError(label)

    def target(self) -> SimObject:
        return self.get(self.target_label)


@dataclass(frozen=True)
class VisibilityReport:
    fraction: float
    sample_count: int
    blocked_by: tuple[str, ...]

    def __post_init__(self):
        unblocked = self.sample_count - len(self.blocked_by)
        if self.sample_count > 0 and abs(
            self.fraction - unblocked / self.sample_count
        ) > 1e-12:
            raise ValueError("fraction must equal unblocked / sample_count")


@dataclass(frozen=True)
class DetectionNoise:
    sigma_center: float = 0.0
    drop_prob: float = 0.0
    mislabel_prob: float = 0.0

    def __post_init__(self):
        if self.sigma_center < 0:
            raise ValueError("sigma_center must be >= 0")
        for name in ("drop_prob", "mislabel_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass(frozen=True)
class GraspNoise:
    sigma_contact: float = 0.0
    kappa_obs: float = 100.0
    q_visibility_gain: float = 0.45
    base_q: float = 0.5

    def __post_init__(self):
        if self.sigma_contact < 0:
            raise ValueError("sigma_contact must be >= 0")
        if self.kappa_obs <= 0:
            raise ValueError("kappa_obs must be positive")
        if self.q_visibility_gain < 0:
            raise ValueError("q_visibility_gain must be >= 0")
        if not 0.0 <= self.base_q <= 1.0:
            raise ValueError("base_q must lie in [0, 1]")


@dataclass(frozen=True)
class OccluderVote:
    expert: str
    candidates: tuple[str, ...]


def _facing_faces(box: OrientedBox, camera_pos: np.ndarray):
    """Yield (face center, outward normal, in-plane axes and half sizes)
    for the faces whose outward normal points toward the camera."""
    for axis in range(3):
        for sign in (1.0, -1.0):
            n = sign * box.rotation[:, axis]
            center = box.center + n * box.half_extents[axis]
            if float(n @ (camera_pos - center)) <= 0.0:
                continue
            a, b = (axis + 1) % 3, (axis + 2) % 3
            yield (
                center,
                box.rotation[:, a],
                box.half_extents[a],
                box.rotation[:, b],
                box.half_extents[b],
            )


def _face_grid(box: OrientedBox, camera_pos: np.ndarray, grid_n: int) -> np.ndarray:
    """Stratified sample points (cell centers of an n-by-n grid) on every
    camera-facing face.  Returns an (N, 3) array; N = 0 means no face
    looks at the camera (camera inside the box)."""
    coords = (np.arange(grid_n) + 0.5) / grid_n * 2.0 - 1.0
    u, v = np.meshgrid(coords, coords, indexing="ij")
    points = []
    for center, e_a, h_a, e_b, h_b in _facing_faces(box, camera_pos):
        pts = (
            center[None, :]
            + (u.ravel() * h_a)[:, None] * e_a[None, :]
            + (v.ravel() * h_b)[:, None] * e_b[None, :]
        )
        points.append(pts)
    if not points:
        return np.empty((0, 3))
    return np.vstack(points)


def visibility(
    scene: GroundTruthScene,
    camera: CameraPose,
    target_label: str,
    grid_n: int = DEFAULT_VISIBILITY_GRID,
) -> VisibilityReport:
    """Fraction of stratified surface samples on the target's
    camera-facing faces that are reachable by an unobstructed ray from
    the camera.  blocked_by lists the nearest blocker per blocked
    sample."""
    target = scene.get(target_label)
    samples = _face_grid(target.box, camera.position, grid_n)
    others = [o for o in scene.objects if o.label != target_label]
    blocked: list[str] = []
    for point in samples:
        offset = point - camera.position
        dist = float(np.linalg.norm(offset))
        if dist < 1e-12:
            continue
        direction = offset / dist
        nearest_t = None
        nearest_label = None
        for obj in others:
            t = ray_box_intersect(camera.position, direction, obj.box)
            if t is not None and t < dist - 1e-9:
                if nearest_t is None or t < nearest_t:
                    nearest_t = t
                    nearest_label = obj.label
        if nearest_label is not None:
            blocked.append(nearest_label)
    count = len(samples)
    fraction = 1.0 if count == 0 else (count - len(blocked)) / count
    return VisibilityReport(
        fraction=fraction, sample_count=count, blocked_by=tuple(blocked)
    )


def simulate_detections(
    scene: GroundTruthScene,
    camera: CameraPose,
    noise: DetectionNoise,
    seed: int,
    v_min: float = DEFAULT_V_MIN,
    tick: int = 0,
) -> list[Detection]:
    """Noisy detector stub.

    Objects visible above v_min yield detections with Gaussian center
    jitter, random drops, and label swaps, all driven by one seeded
    generator consumed in scene order.
    """
    rng = np.random.default_rng(seed)
    detections: list[Detection] = []
    labels = scene.labels()
    for obj in scene.objects:
        report = visibility(scene, camera, obj.label)
        if report.fraction <= v_min:
            continue
        if rng.random() < noise.drop_prob:
            continue
        center = obj.box.center + rng.normal(0.0, noise.sigma_center, 3)
        description = obj.description
        if rng.random() < noise.mislabel_prob and len(labels) > 1:
            other = [lbl for lbl in labels if lbl != obj.label]
            wrong = other[int(rng.integers(len(other)))]
            description = ObjectDescription(
                label=wrong,
                color=description.color,
                pattern=description.pattern,
                spatial_relation=description.spatial_relation,
            )
        box = OrientedBox(
            center=center,
            rotation=obj.box.rotation.copy(),
            half_extents=obj.box.half_extents.copy(),
        )
        detections.append(Detection(description=description, box=box, source_tick=tick))
    return detections


def sample_vmf(mu, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n unit vectors from a von Mises-Fisher distribution via the
    tangent-normal decomposition (exact inverse-CDF for the cosine)."""
    mu = normalize(as_vec3(mu))
    kappa = min(float(kappa), KAPPA_CLAMP)
    if kappa < 1e-12:
        raw = rng.normal(size=(n, 3))
        return raw / np.linalg.norm(raw, axis=1, keepdims=True)
    u = 1.0 - rng.random(n)  # in (0, 1]: keeps the log finite at huge kappa
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = np.clip(w, -1.0, 1.0)
    tangent = rng.normal(size=(n, 3))
    tangent -= np.outer(tangent @ mu, mu)
    norms = np.linalg.norm(tangent, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    tangent /= norms
    radial = np.sqrt(np.clip(1.0 - w * w, 0.0, None))
    return w[:, None] * mu[None, :] + radial[:, None] * tangent


def _baseline_direction(box: OrientedBox) -> tuple[np.ndarray, float]:
    """Canonical grasp baseline: the box axis with the smallest half
    extent (grasp across the thinnest span), sign fixed so the largest
    component is positive.  Returns (unit axis, opening width)."""
    axis_idx = int(np.argmin(box.half_extents))
    mu = box.rotation[:, axis_idx].copy()
    if mu[int(np.argmax(np.abs(mu)))] < 0:
        mu = -mu
    return mu, 2.0 * float(box.half_extents[axis_idx])


def _approach_bin(mu: np.ndarray, k_bins: int) -> int:
    """Approach-direction bin of a straight-down grasp in the half-circle
    perpendicular to the baseline."""
    z = np.array([0.0, 0.0, 1.0])
    x = np.array([1.0, 0.0, 0.0])
    ref = x - (x @ mu) * mu
    if np.linalg.norm(ref) < 1e-9:
        ref = np.array([0.0, 1.0, 0.0]) - (np.array([0.0, 1.0, 0.0]) @ mu) * mu
    b1 = normalize(ref)
    b2 = np.cross(mu, b1)
    approach = -z + (z @ mu) * mu
    if np.linalg.norm(approach) < 1e-9:
        return 0
    approach = normalize(approach)
    angle = float(np.arctan2(approach @ b2, approach @ b1)) % np.pi
    return int(angle / np.pi * k_bins) % k_bins


def _smeared_bins(index: int, k_bins: int) -> np.ndarray:
    bins = np.zeros(k_bins)
    bins[index] = 1.0
    bins[(index - 1) % k_bins] += 0.25
    bins[(index + 1) % k_bins] += 0.25
    return bins


def simulate_grasp_observations(
    scene: GroundTruthScene,
    camera: CameraPose,
    labels: list[str] | None,
    noise: GraspNoise,
    seed: int,
    k_bins: int = 6,
    n_per_object: int = 3,
    v_min: float = DEFAULT_V_MIN,
    tick: int = 0,
) -> list[GraspObservation]:
    """Synthetic grasp hypotheses for the requested objects.

    Contacts jitter around the box center, baselines are vMF samples
    around the thinnest box axis, quality grows with visibility, and
    approach bins are a smeared one-hot at the geometric bin.
    Invisible objects yield nothing.
    """
    rng = np.random.default_rng(seed)
    wanted = scene.labels() if labels is None else tuple(labels)
    observations: list[GraspObservation] = []
    for obj in scene.objects:
        if obj.label not in wanted:
            continue
        report = visibility(scene, camera, obj.label)
        if report.fraction <= v_min:
            continue
        mu_true, width = _baseline_direction(obj.box)
        bin_idx = _approach_bin(mu_true, k_bins)
        quality = min(
            max(noise.base_q + noise.q_visibility_gain * report.fraction, 0.0), 1.0
        )
        mus = sample_vmf(mu_true, noise.kappa_obs, n_per_object, rng)
        for i in range(n_per_object):
            contact = obj.box.center + rng.normal(0.0, noise.sigma_contact, 3)
            observations.append(
                GraspObservation(
                    contact=contact,
                    mu=normalize(mus[i]),
                    kappa=noise.kappa_obs,
                    approach_bins=_smeared_bins(bin_idx, k_bins),
                    width=width,
                    quality=quality,
                    tick=tick,
                )
            )
    return observations


def _region_from_history(history: list[SceneSnapshot]) -> OrientedBox | None:
    for snapshot in reversed(history):
        record = snapshot.target()
        if record is not None:
            return record.box
    return None


def occluder_votes(
    snapshot: SceneSnapshot,
    region: OrientedBox,
    camera: CameraPose | None = None,
) -> list[OccluderVote]:
    """Three deterministic expert rankings of likely occluders of the
    given region: xy-footprint overlap, line-of-sight blocking, and
    plain proximity."""
    candidates = [rec for rec in snapshot.objects if not rec.is_target]
    if camera is None:
        overhead = region.center + np.array([0.0, 0.0, 1.0])
        camera = CameraPose.look_at(overhead, region.center)

    overlapping = [
        rec for rec in candidates if xy_hulls_overlap(rec.box, region)
    ]
    overlapping.sort(
        key=lambda rec: (
            float(np.linalg.norm(rec.box.center[:2] - region.center[:2])),
            rec.id,
        )
    )
    xy_vote = OccluderVote(EXPERT_XY, tuple(rec.label for rec in overlapping))

    ray_targets = np.vstack([region.center[None, :], region.corners()])
    hits = []
    for rec in candidates:
        count = 0
        for point in ray_targets:
            offset = point - camera.position
            dist = float(np.linalg.norm(offset))
            if dist < 1e-12:
                continue
            t = ray_box_intersect(camera.position, offset / dist, rec.box)
            if t is not None and t < dist - 1e-9:
                count += 1
        if count > 0:
            hits.append((-count, rec.id, rec.label))
    hits.sort()
    los_vote = OccluderVote(EXPERT_LOS, tuple(label for _, _, label in hits))

    by_distance = sorted(
        candidates,
        key=lambda rec: (
            float(np.linalg.norm(rec.box.center - region.center)),
            rec.id,
        ),
    )
    prox_vote = OccluderVote(EXPERT_PROXIMITY, tuple(rec.label for rec in by_distance))
    return [xy_vote, los_vote, prox_vote]


def infer_occluders(
    snapshot: SceneSnapshot,
    history: list[SceneSnapshot],
    last_target_region: OrientedBox | None = None,
    camera: CameraPose | None = None,
) -> list[str]:
    """Ranked occluder hypotheses via Borda-count aggregation of the
    expert votes.  Raises NoHypothesisError when no target region is
    known (no hint and no historical sighting)."""
    region = last_target_region
    if region is None:
        region = _region_from_history(history)
    if region is None:
        raise NoHypothesisError("no target region available for occluder inference")
    votes = occluder_votes(snapshot, region, camera)
    ids = {rec.label: rec.id for rec in snapshot.objects if not rec.is_target}
    scores: dict[str, int] = {}
    for vote in votes:
        n = len(vote.candidates)
        for rank, label in enumerate(vote.candidates):
            scores[label] = scores.get(label, 0) + (n - rank)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], ids.get(kv[0], 0)))
    return [label for label, _ in ranked]


def remove_object(scene: GroundTruthScene, label: str) -> GroundTruthScene:
    """Scene with the named object taken away (pure; the input scene is
    untouched)."""
    if label not in scene.labels():
        raise UnknownLabelError(label)
    if label == scene.target_label:
        raise ValueError("cannot remove the target from the scene")
    return GroundTruthScene(
        objects=tuple(o for o in scene.objects if o.label != label),
        target_label=scene.target_label,
        table_height=scene.table_height,
        rng_seed=scene.rng_seed,
    )


def attempt_grasp(quality: float, rng: np.random.Generator) -> bool:
    """Simulated grasp execution: succeeds with probability equal to the
    fused grasp quality."""
    if not 0.0 <= quality <= 1.0:
        raise ValueError("quality must lie in [0, 1]")
    return bool(rng.random() < quality)
