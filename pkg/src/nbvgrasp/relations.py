"""Rule-based spatial reasoning over oriented boxes.

Pairwise relations:
  Proximity(i, j)  -- the boxes intersect after growing every half
                      extent by a clearance margin (symmetric).
  Below(i, j)      -- box i sits under box j: j's bottom clears i's top
                      by more than a gap threshold and their xy
                      footprints overlap.
  High/Low(i, j)   -- box i's top rises above / falls under box j's top
                      by more than a height threshold.

The grasp strategy reads the relations around the designated target:
anything the target is below must be removed first; tall close-by
neighbors trigger a viewpoint change; low neighbors are ignored;
otherwise the target is grasped directly.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass

import numpy as np

from .scene import SceneSnapshot
from .geom import OrientedBox

DEFAULT_PROXIMITY_EXPANSION = 0.02
DEFAULT_GAMMA_BELOW = 0.01
DEFAULT_GAMMA_HL = 0.03


class NoTargetError(Exception):
    """Strategy decision requested without a designated target."""


class Relation(enum.Enum):
    PROXIMITY = "proximity"
    BELOW = "below"
    HIGH = "high"
    LOW = "low"


@dataclass(frozen=True)
class RelationConfig:
    proximity_expansion: float = DEFAULT_PROXIMITY_EXPANSION
    gamma_below: float = DEFAULT_GAMMA_BELOW
    gamma_hl: float = DEFAULT_GAMMA_HL

    def __post_init__(self):
        for name in ("proximity_expansion", "gamma_below", "gamma_hl"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True, eq=False)
class RelationGraph:
    """Relations per ordered id pair (absent pair = no relations)."""

    relations: dict

    def of(self, i: int, j: int) -> frozenset:
        return self.relations.get((i, j), frozenset())

    def has(self, i: int, j: int, rel: Relation) -> bool:
        return rel in self.of(i, j)

    def proximity(self, i: int, j: int) -> bool:
        return self.has(i, j, Relation.PROXIMITY)

    def below(self, i: int, j: int) -> bool:
        return self.has(i, j, Relation.BELOW)

    def high(self, i: int, j: int) -> bool:
        return self.has(i, j, Relation.HIGH)

    def low(self, i: int, j: int) -> bool:
        return self.has(i, j, Relation.LOW)


def boxes_intersect(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test for two oriented boxes (touching counts)."""
    axes = [a.rotation[:, k] for k in range(3)] + [b.rotation[:, k] for k in range(3)]
    for i in range(3):
        for j in range(3):
            cross = np.cross(a.rotation[:, i], b.rotation[:, j])
            n = float(np.linalg.norm(cross))
            if n > 1e-12:
                axes.append(cross / n)
    d = b.center - a.center
    for axis in axes:
        ra = float(np.abs(axis @ a.rotation) @ a.half_extents)
        rb = float(np.abs(axis @ b.rotation) @ b.half_extents)
        if abs(float(d @ axis)) > ra + rb:
            return False
    return True


def _hull2d(points: np.ndarray) -> np.ndarray:
    """Convex hull (monotone chain), counter-clockwise, no repeats."""
    pts = np.unique(np.round(points, 12), axis=0)
    if pts.shape[0] <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                u = out[-1] - out[-2]
                v = p - out[-2]
                if u[0] * v[1] - u[1] * v[0] > 0:
                    break
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if hull.shape[0] < 3:  # all points collinear
        ends = pts[[0, -1]]
        return ends
    return hull


def _poly_axes(hull: np.ndarray) -> list[np.ndarray]:
    axes = []
    n = hull.shape[0]
    if n == 2:
        e = hull[1] - hull[0]
        ln = float(np.linalg.norm(e))
        if ln > 0:
            axes.append(np.array([-e[1], e[0]]) / ln)
            axes.append(e / ln)
        return axes
    for k in range(n):
        e = hull[(k + 1) % n] - hull[k]
        ln = float(np.linalg.norm(e))
        if ln > 1e-15:
            axes.append(np.array([-e[1], e[0]]) / ln)
    return axes


def xy_hulls_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Do the convex hulls of the boxes' xy-projected corners overlap?"""
    ha = _hull2d(a.corners()[:, :2])
    hb = _hull2d(b.corners()[:, :2])
    for axis in _poly_axes(ha) + _poly_axes(hb):
        pa = ha @ axis
        pb = hb @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


def compute_relations(snapshot: SceneSnapshot, cfg: RelationConfig) -> RelationGraph:
    """Evaluate all pairwise relations over the snapshot's records."""
    rels: dict[tuple[int, int], frozenset] = {}
    records = snapshot.objects
    for a in records:
        for b in records:
            if a.id == b.id:
                continue
            found = set()
            if boxes_intersect(
                a.box.expanded(cfg.proximity_expansion),
                b.box.expanded(cfg.proximity_expansion),
            ):
                found.add(Relation.PROXIMITY)
            if b.box.min_z() - a.box.max_z() > cfg.gamma_below and xy_hulls_overlap(
                a.box, b.box
            ):
                found.add(Relation.BELOW)
            dz = a.box.max_z() - b.box.max_z()
            if dz > cfg.gamma_hl:
                found.add(Relation.HIGH)
            elif dz < -cfg.gamma_hl:
                found.add(Relation.LOW)
            if found:
                rels[(a.id, b.id)] = frozenset(found)
    return RelationGraph(rels)


class StrategyAction(enum.Enum):
    GRASP_TARGET = "grasp_target"
    REMOVE_OCCLUDER = "remove_occluder"
    TRIGGER_NBV = "trigger_nbv"


@dataclass(frozen=True)
class StrategyDecision:
    action: StrategyAction
    occluder_ids: tuple = ()
    rationale: str = ""


def decide_strategy(
    snapshot: SceneSnapshot, graph: RelationGraph, cfg: RelationConfig
) -> StrategyDecision:
    """Pick the next move for the designated target.

    Priority: anything the target is below gets removed first (the
    nearest cover by vertical gap, ties to the lowest id); otherwise
    tall neighbors within proximity trigger a viewpoint change; low
    neighbors never count as occluders; with nothing in the way the
    target is grasped.

    Raises:
        NoTargetError: snapshot has no designated target.
    """
    if snapshot.target_id is None:
        raise NoTargetError("no designated target in snapshot")
    target = snapshot.target()
    covers = [o for o in snapshot.non_targets() if graph.below(target.id, o.id)]
    if covers:
        best = min(
            covers,
            key=lambda o: (o.box.min_z() - target.box.max_z(), o.id),
        )
        return StrategyDecision(
            StrategyAction.REMOVE_OCCLUDER, occluder_ids=(best.id,), rationale="i"
        )
    tall = sorted(
        o.id
        for o in snapshot.non_targets()
        if graph.proximity(o.id, target.id) and graph.high(o.id, target.id)
    )
    if tall:
        return StrategyDecision(
            StrategyAction.TRIGGER_NBV, occluder_ids=tuple(tall), rationale="iv"
        )
    return StrategyDecision(StrategyAction.GRASP_TARGET, rationale="ii")


def removal_order(snapshot: SceneSnapshot, graph: RelationGraph) -> list[int]:
    """Order the non-target objects for removal, top of each stack first.

    Topological over the below-relation; among simultaneously free
    objects the taller one (larger top z) goes first, then the lower id.
    If the below-relation is cyclic (degenerate geometry) the whole
    order falls back to descending top height.
    """
    nodes = [o.id for o in snapshot.non_targets()]
    max_z = {o.id: o.box.max_z() for o in snapshot.non_targets()}
    above = {
        a: {b for b in nodes if b != a and graph.below(a, b)} for a in nodes
    }
    heap = [(-max_z[n], n) for n in nodes if not above[n]]
    heapq.heapify(heap)
    order: list[int] = []
    remaining = set(nodes)
    while heap:
        _, n = heapq.heappop(heap)
        if n not in remaining:
            continue
        order.append(n)
        remaining.discard(n)
        for m in remaining:
            if n in above[m]:
                above[m].discard(n)
                if not above[m]:
                    heapq.heappush(heap, (-max_z[m], m))
    if remaining:  # cycle: fall back to plain height order
        return sorted(nodes, key=lambda n: (-max_z[n], n))
    return order
