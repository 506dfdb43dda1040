"""Closed-loop episode driver.

Each simulated tick advances the whole stack once: detect, fold the
detections into the scene belief, pick a strategy from the spatial
relations, move the camera one velocity-field step when a better view
is wanted, ingest grasp observations, and ask the fusion engine whether
to commit.  Episodes end when the target is grasped, when any failure
condition repeats too often, or when the tick budget runs out.

Event kinds recorded in the log (fields beyond tick/kind noted):
  occluder_inferred  label = best hypothesis for who hides the target
  reprioritize       label = next object scheduled for removal
  ghost_discarded    label = detected object absent from the world
  grasp_attempt      label, value = fused quality, flag = success
  collision          label = object whose grasp was blocked by a neighbor
  disturbance        label = object whose grasp jostled the arrangement
  object_removed     label = occluder taken off the table
  target_grasped     label = the prompt target
  abort              label = failure counter that hit its limit
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fusion import FusionConfig, FusionEngine, TerminationDecision
from .geom import CameraPose, OrientedBox, PoleSingularityError
from .nbv import (
    DegenerateGeometryError,
    OccluderPoints,
    ViewSphere,
    field_multi,
    truncate_downward,
)
from .relations import (
    RelationConfig,
    StrategyAction,
    boxes_intersect,
    compute_relations,
    decide_strategy,
    removal_order,
)
from .scene import SceneSnapshot, designate_target, remove_record, update_scene
from .simenv import (
    DetectionNoise,
    GraspNoise,
    GroundTruthScene,
    NoHypothesisError,
    attempt_grasp,
    infer_occluders,
    remove_object,
    simulate_detections,
    simulate_grasp_observations,
)

DEFAULT_START_ELEVATION = math.radians(45.0)
GRASP_REGION_SLACK = 0.05
EXPLORE_AZIMUTH_STEP = 0.15  # radians per tick while sweeping blind


@dataclass(frozen=True)
class LoopConfig:
    """All knobs of the per-tick loop in one place."""

    tick_hz: float = 10.0
    max_ticks: int = 300
    relation_cfg: RelationConfig = field(default_factory=RelationConfig)
    fusion_cfg: FusionConfig = field(default_factory=FusionConfig)
    detection_noise: DetectionNoise = field(default_factory=DetectionNoise)
    grasp_noise: GraspNoise = field(default_factory=GraspNoise)
    step: float | None = None
    max_steps: int = 2000
    eps_stag: float = 1e-3
    disturb_prob: float = 0.0
    abort_limit: int = 4
    collision_margin: float = 0.005

    def __post_init__(self):
        if self.tick_hz <= 0:
            raise ValueError("tick_hz must be positive")
        if self.max_ticks < 1:
            raise ValueError("max_ticks must be >= 1")
        if self.step is not None and self.step <= 0:
            raise ValueError("step must be positive when given")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.eps_stag <= 0:
            raise ValueError("eps_stag must be positive")
        if not 0.0 <= self.disturb_prob <= 1.0:
            raise ValueError("disturb_prob must lie in [0, 1]")
        if self.abort_limit < 1:
            raise ValueError("abort_limit must be >= 1")
        if self.collision_margin < 0:
            raise ValueError("collision_margin must be >= 0")


@dataclass(frozen=True)
class Event:
    tick: int
    kind: str
    label: str = ""
    value: float = 0.0
    flag: bool = False


@dataclass(frozen=True, eq=False)
class TrajectoryPoint:
    tick: int
    pose: CameraPose
    speed: float
    beta: float


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    final_success: bool
    grasp_attempts: int
    grasps_succeeded: int
    grasps_attempted: int
    ticks_used: int
    trajectory: tuple[TrajectoryPoint, ...]
    events: tuple[Event, ...]
    grasps: tuple = ()  # (grasp id, fused grasp) pairs at episode end

    def __post_init__(self):
        if self.grasps_succeeded > self.grasps_attempted:
            raise ValueError("grasps_succeeded cannot exceed grasps_attempted")


@dataclass(frozen=True, eq=False)
class SuiteMetrics:
    """Aggregate over a batch of episodes.

    afsr: fraction of episodes that grasped the target.
    aga: mean grasp attempts, averaged over successful episodes only
         (None when nothing succeeded).
    agsr: overall grasp success rate across every attempt (None when no
          grasp was ever attempted).
    """

    results: tuple[EpisodeResult, ...]
    afsr: float
    aga: float | None
    agsr: float | None


def derive_view_sphere(scene: GroundTruthScene) -> ViewSphere:
    """Camera sphere enclosing the arrangement: centered on the mean
    object footprint at table height, radius scaled to the spread."""
    centers = np.array([o.box.center for o in scene.objects])
    center = np.array(
        [centers[:, 0].mean(), centers[:, 1].mean(), scene.table_height]
    )
    reach = 0.0
    for obj in scene.objects:
        reach = max(
            reach,
            float(np.max(np.linalg.norm(obj.box.corners() - center, axis=1))),
        )
    return ViewSphere(center=center, radius=max(0.6, 2.5 * reach))


def _child_seed(seed: int, tick: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, tick, stream]).generate_state(1)[0])


def _start_position(sphere: ViewSphere) -> np.ndarray:
    offset = np.array(
        [math.cos(DEFAULT_START_ELEVATION), 0.0, math.sin(DEFAULT_START_ELEVATION)]
    )
    return sphere.center + sphere.radius * offset


def _rotate_azimuth(x: np.ndarray, sphere: ViewSphere, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rel = x - sphere.center
    rotated = np.array(
        [c * rel[0] - s * rel[1], s * rel[0] + c * rel[1], rel[2]]
    )
    return sphere.center + rotated


class _Episode:
    """Mutable state of one run; run() drives it to completion."""

    def __init__(
        self,
        scene: GroundTruthScene,
        cfg: LoopConfig,
        seed: int,
        sphere: ViewSphere | None,
        region_hint: OrientedBox | None = None,
    ):
        self.scene = scene
        self.cfg = cfg
        self.seed = seed
        self.sphere = sphere if sphere is not None else derive_view_sphere(scene)
        self.snapshot = SceneSnapshot()
        self.engine = FusionEngine(cfg.fusion_cfg)
        self.x = _start_position(self.sphere)
        self.step = cfg.step if cfg.step is not None else 0.02 * self.sphere.radius
        self.history: list[SceneSnapshot] = []
        self.last_region: OrientedBox | None = region_hint
        self.forced_focus: str | None = None
        self.failures = {"grasp": 0, "disturbance": 0, "collision": 0}
        self.events: list[Event] = []
        self.trajectory: list[TrajectoryPoint] = []
        self.attempted = 0
        self.succeeded = 0
        self.nbv_steps = 0
        self.rng_exec = np.random.default_rng(np.random.SeedSequence([seed, 9001]))
        self.done = False
        self.success = False
        self.ticks_used = 0

    # -- helpers ---------------------------------------------------------

    def emit(self, tick, kind, label="", value=0.0, flag=False):
        self.events.append(Event(tick=tick, kind=kind, label=label, value=value, flag=flag))

    def fail(self, tick, counter: str):
        if self.done:
            return
        self.failures[counter] += 1
        if self.failures[counter] >= self.cfg.abort_limit:
            self.emit(tick, "abort", label=counter)
            self.done = True

    def attempt_removal(self, tick: int, record_id: int) -> None:
        """Observe, fuse, and (on an Execute verdict) grasp one object;
        successful occluder grasps take it off the table, a successful
        target grasp ends the episode."""
        record = self.snapshot.get(record_id)
        label = record.label
        if label not in self.scene.labels():
            # hallucinated detection: no such object to grasp
            self.snapshot = remove_record(self.snapshot, record_id)
            self.emit(tick, "ghost_discarded", label=label)
            return
        obs = simulate_grasp_observations(
            self.scene,
            self.pose,
            [label],
            self.cfg.grasp_noise,
            _child_seed(self.seed, tick, 1),
            k_bins=self.cfg.fusion_cfg.k_bins,
            tick=tick,
        )
        self.engine.ingest(obs, tick=tick)
        verdict = self.engine.evaluate_termination(
            field_speed=0.0,
            eps_stag=self.cfg.eps_stag,
            within=record.box.expanded(GRASP_REGION_SLACK),
        )
        if verdict.decision is TerminationDecision.EXECUTE:
            self.execute_grasp(tick, label, verdict.grasp_id)
        elif verdict.decision is TerminationDecision.REPRIORITIZE:
            self.reprioritize(tick)

    def execute_grasp(self, tick: int, label: str, grasp_id: int) -> None:
        quality = self.engine.grasps()[grasp_id].quality
        is_target = label == self.scene.target_label
        self.attempted += 1

        grasped_box = self.scene.get(label).box
        margin = self.cfg.collision_margin
        swept = grasped_box.expanded(margin)
        collision = False
        for other in self.scene.objects:
            if other.label == label:
                continue
            if not boxes_intersect(swept, other.box):
                continue
            # an object sitting wholly inside the grasped one (an open
            # container being lifted off its content) is not a collision
            if all(swept.contains(c) for c in other.box.corners()):
                continue
            collision = True
            break
        if collision:
            self.emit(tick, "collision", label=label)
            self.emit(tick, "grasp_attempt", label=label, value=quality, flag=False)
            self.fail(tick, "collision")
            self.fail(tick, "grasp")
            return

        success = attempt_grasp(quality, self.rng_exec)
        disturbed = (
            self.cfg.disturb_prob > 0
            and self.rng_exec.random() < self.cfg.disturb_prob
        )
        self.emit(tick, "grasp_attempt", label=label, value=quality, flag=success)
        if disturbed:
            self.emit(tick, "disturbance", label=label)
        if success:
            self.succeeded += 1
            if is_target:
                self.emit(tick, "target_grasped", label=label)
                self.success = True
                self.done = True
            else:
                self.scene = remove_object(self.scene, label)
                record = next(
                    (r for r in self.snapshot.objects if r.label == label), None
                )
                if record is not None:
                    self.snapshot = remove_record(self.snapshot, record.id)
                if self.forced_focus == label:
                    self.forced_focus = None
                self.emit(tick, "object_removed", label=label)
        else:
            self.fail(tick, "grasp")
        # a disturbance on the grasp that retrieved the target does not
        # retroactively fail the episode; fail() ignores finished runs
        if disturbed:
            self.fail(tick, "disturbance")

    def reprioritize(self, tick: int) -> None:
        graph = compute_relations(self.snapshot, self.cfg.relation_cfg)
        order = removal_order(self.snapshot, graph)
        if not order:
            return
        label = self.snapshot.get(order[0]).label
        if label != self.forced_focus:
            self.forced_focus = label
            self.emit(tick, "reprioritize", label=label)

    def nbv_tick(self, tick: int, target_box: OrientedBox, occluder_ids) -> None:
        """One velocity-field step toward a better view, then try the
        target with the field speed as the stagnation signal."""
        boxes = [self.snapshot.get(i).box for i in occluder_ids]
        speed = 0.0
        beta = 0.0
        try:
            sample = truncate_downward(
                field_multi(
                    self.x,
                    self.sphere,
                    target_box.center,
                    OccluderPoints.from_boxes(boxes),
                ),
                self.x,
                self.sphere,
            )
            speed, beta = sample.speed, sample.beta
            if speed >= self.cfg.eps_stag and self.nbv_steps < self.cfg.max_steps:
                self.x = self.sphere.project(self.x + self.step * sample.velocity)
                self.nbv_steps += 1
            elif self.nbv_steps >= self.cfg.max_steps:
                speed = 0.0  # budget spent: hold the pose, report stagnation
        except (PoleSingularityError, DegenerateGeometryError):
            speed = 0.0
        self.tick_speed, self.tick_beta = speed, beta
        self.observe_target(tick, target_box, field_speed=speed)

    def observe_target(self, tick: int, target_box: OrientedBox, field_speed: float):
        label = self.scene.target_label
        obs = simulate_grasp_observations(
            self.scene,
            self.pose,
            [label],
            self.cfg.grasp_noise,
            _child_seed(self.seed, tick, 1),
            k_bins=self.cfg.fusion_cfg.k_bins,
            tick=tick,
        )
        self.engine.ingest(obs, tick=tick)
        verdict = self.engine.evaluate_termination(
            field_speed=field_speed,
            eps_stag=self.cfg.eps_stag,
            within=target_box.expanded(GRASP_REGION_SLACK),
        )
        if verdict.decision is TerminationDecision.EXECUTE:
            self.execute_grasp(tick, label, verdict.grasp_id)
        elif verdict.decision is TerminationDecision.REPRIORITIZE:
            self.reprioritize(tick)

    # -- the loop --------------------------------------------------------

    def run(self) -> EpisodeResult:
        for tick in range(self.cfg.max_ticks):
            self.ticks_used = tick + 1
            self.tick_speed = 0.0
            self.tick_beta = 0.0
            self.pose = CameraPose.look_at(self.x, self.sphere.center)

            detections = simulate_detections(
                self.scene,
                self.pose,
                self.cfg.detection_noise,
                _child_seed(self.seed, tick, 0),
                tick=tick,
            )
            self.snapshot = update_scene(self.snapshot, detections)
            self.snapshot = designate_target(self.snapshot, self.scene.target_label)
            self.history.append(self.snapshot)
            target_rec = self.snapshot.target()
            if target_rec is not None:
                self.last_region = target_rec.box

            forced_rec = None
            if self.forced_focus is not None:
                forced_rec = next(
                    (r for r in self.snapshot.objects if r.label == self.forced_focus),
                    None,
                )
                if forced_rec is None:
                    self.forced_focus = None

            if forced_rec is not None:
                self.attempt_removal(tick, forced_rec.id)
            elif target_rec is None:
                try:
                    ranked = infer_occluders(
                        self.snapshot, self.history, self.last_region, self.pose
                    )
                except NoHypothesisError:
                    ranked = []
                if ranked:
                    self.emit(tick, "occluder_inferred", label=ranked[0])
                    record = next(
                        r for r in self.snapshot.objects if r.label == ranked[0]
                    )
                    self.attempt_removal(tick, record.id)
                else:
                    # nothing known yet: sweep the sphere for a first sighting
                    self.x = _rotate_azimuth(self.x, self.sphere, EXPLORE_AZIMUTH_STEP)
            else:
                graph = compute_relations(self.snapshot, self.cfg.relation_cfg)
                decision = decide_strategy(self.snapshot, graph, self.cfg.relation_cfg)
                if decision.action is StrategyAction.REMOVE_OCCLUDER:
                    self.attempt_removal(tick, decision.occluder_ids[0])
                elif decision.action is StrategyAction.TRIGGER_NBV:
                    self.nbv_tick(tick, target_rec.box, decision.occluder_ids)
                else:
                    self.observe_target(tick, target_rec.box, field_speed=0.0)

            self.trajectory.append(
                TrajectoryPoint(
                    tick=tick,
                    pose=self.pose,
                    speed=self.tick_speed,
                    beta=self.tick_beta,
                )
            )
            if self.done:
                break

        return EpisodeResult(
            final_success=self.success,
            grasp_attempts=self.attempted,
            grasps_succeeded=self.succeeded,
            grasps_attempted=self.attempted,
            ticks_used=self.ticks_used,
            trajectory=tuple(self.trajectory),
            events=tuple(self.events),
            grasps=tuple(sorted(self.engine.grasps().items())),
        )


def run_episode(
    scene: GroundTruthScene,
    cfg: LoopConfig,
    seed: int,
    sphere: ViewSphere | None = None,
    region_hint: OrientedBox | None = None,
) -> EpisodeResult:
    """Drive one episode to completion; deterministic given the inputs.

    region_hint seeds occluder inference with the prompt-level idea of
    where the target should be, for targets hidden from the very first
    view.
    """
    return _Episode(scene, cfg, seed, sphere, region_hint).run()


def aggregate(results: list[EpisodeResult]) -> SuiteMetrics:
    """Suite metrics over finished episodes (see SuiteMetrics)."""
    if not results:
        raise ValueError("no episodes to aggregate")
    wins = [r for r in results if r.final_success]
    afsr = len(wins) / len(results)
    aga = (
        sum(r.grasp_attempts for r in wins) / len(wins) if wins else None
    )
    attempted = sum(r.grasps_attempted for r in results)
    succeeded = sum(r.grasps_succeeded for r in results)
    agsr = succeeded / attempted if attempted > 0 else None
    return SuiteMetrics(results=tuple(results), afsr=afsr, aga=aga, agsr=agsr)


def run_suite(
    scenes: list[GroundTruthScene],
    cfg: LoopConfig,
    seeds: list[int],
    spheres: list[ViewSphere | None] | None = None,
    region_hints: list[OrientedBox | None] | None = None,
) -> SuiteMetrics:
    """Run every scene against every seed and aggregate."""
    if not scenes:
        raise ValueError("scene list must be non-empty")
    if not seeds:
        raise ValueError("seed list must be non-empty")
    if spheres is None:
        spheres = [None] * len(scenes)
    if len(spheres) != len(scenes):
        raise ValueError("spheres must pair with scenes")
    if region_hints is None:
        region_hints = [None] * len(scenes)
    if len(region_hints) != len(scenes):
        raise ValueError("region_hints must pair with scenes")
    results = []
    for scene, sphere, hint in zip(scenes, spheres, region_hints):
        for seed in seeds:
            results.append(run_episode(scene, cfg, seed, sphere, hint))
    return aggregate(results)
