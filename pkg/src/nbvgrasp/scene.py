"""Historical object list maintained across viewpoints.

Detections arriving from successive views are folded into a persistent
list of object records: a detection that matches an existing record by
label and center proximity refines that record (box refit over both
corner sets, newest non-empty attributes win); anything else becomes a
new record.  Records are never dropped by updates, so objects seen from
earlier viewpoints survive occlusion in later ones.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geom import OrientedBox, fit_oriented_box

TAU_MATCH = 0.05  # center-distance gate for detection/record matching, meters


class AmbiguousTargetError(Exception):
    """More than one record carries the requested target label."""


@dataclass(frozen=True)
class ObjectDescription:
    """Structured description: class label plus color / pattern /
    spatial-relation attribute strings (empty string = unknown)."""

    label: str
    color: str = ""
    pattern: str = ""
    spatial_relation: str = ""

    def __post_init__(self):
        if not self.label:
            raise ValueError("label must be non-empty")


@dataclass(frozen=True, eq=False)
class ObjectRecord:
    """One persistent object hypothesis."""

    id: int
    description: ObjectDescription
    box: OrientedBox
    observation_count: int = 1
    last_seen_tick: int = 0
    is_target: bool = False

    def __post_init__(self):
        if self.observation_count < 1:
            raise ValueError("observation_count must be >= 1")

    @property
    def label(self) -> str:
        return self.description.label


@dataclass(frozen=True, eq=False)
class Detection:
    """One detector output from the current view."""

    description: ObjectDescription
    box: OrientedBox
    source_tick: int = 0


@dataclass(frozen=True, eq=False)
class SceneSnapshot:
    """Immutable view of the object list at one tick."""

    tick: int = 0
    objects: tuple = ()
    target_id: int | None = None

    def __post_init__(self):
        objs = tuple(self.objects)
        ids = [o.id for o in objs]
        if len(ids) != len(set(ids)):
            raise ValueError("record ids must be unique")
        if self.target_id is not None and self.target_id not in ids:
            raise ValueError(f"target_id {self.target_id} not among records")
        object.__setattr__(self, "objects", objs)

    def get(self, record_id: int) -> ObjectRecord:
        for obj in self.objects:
            if obj.id == record_id:
                return obj
        raise KeyError(f"no record with id {record_id}")

    def target(self) -> ObjectRecord | None:
        return None if self.target_id is None else self.get(self.target_id)

    def non_targets(self) -> list[ObjectRecord]:
        return [o for o in self.objects if o.id != self.target_id]


def _merge_attributes(old: ObjectDescription, new: ObjectDescription) -> ObjectDescription:
    return ObjectDescription(
        label=old.label,
        color=new.color or old.color,
        pattern=new.pattern or old.pattern,
        spatial_relation=new.spatial_relation or old.spatial_relation,
    )


def merge_records(existing: ObjectRecord, incoming: Detection) -> ObjectRecord:
    """Fold a matched detection into a record.

    The box is refit over the corners of both boxes so extent evidence
    accumulates across views; non-empty incoming attributes overwrite
    the stored ones (later views tend to be less occluded).
    """
    corners = np.vstack([existing.box.corners(), incoming.box.corners()])
    return replace(
        existing,
        box=fit_oriented_box(corners, degenerate="aabb"),
        description=_merge_attributes(existing.description, incoming.description),
        observation_count=existing.observation_count + 1,
        last_seen_tick=incoming.source_tick,
    )


def _absorb(keeper: ObjectRecord, other: ObjectRecord) -> ObjectRecord:
    """Collapse two records that ended up duplicating one object."""
    newer, older = (
        (keeper, other)
        if keeper.last_seen_tick >= other.last_seen_tick
        else (other, keeper)
    )
    corners = np.vstack([keeper.box.corners(), other.box.corners()])
    return replace(
        keeper,
        box=fit_oriented_box(corners, degenerate="aabb"),
        description=_merge_attributes(older.description, newer.description),
        observation_count=keeper.observation_count + other.observation_count,
        last_seen_tick=max(keeper.last_seen_tick, other.last_seen_tick),
        is_target=keeper.is_target or other.is_target,
    )


def _match(records: list[ObjectRecord], det: Detection, tau: float) -> int | None:
    """Index of the nearest same-label record within tau, or None."""
    best = None
    best_key = (tau, -1)
    for idx, rec in enumerate(records):
        if rec.label != det.description.label:
            continue
        dist = float(np.linalg.norm(rec.box.center - det.box.center))
        if dist < tau and (best is None or (dist, rec.id) < best_key):
            best = idx
            best_key = (dist, rec.id)
    return best


def update_scene(
    snapshot: SceneSnapshot, detections: list[Detection], tau_match: float = TAU_MATCH
) -> SceneSnapshot:
    """Integrate one view's detections into the object list.

    Each detection either merges into the nearest same-label record
    whose center lies within tau_match (ties on distance go to the
    lowest id) or is added as a new record.  A final sweep collapses any
    same-label records that ended up within tau_match of each other, so
    no duplicate survivors remain.
    """
    records = list(snapshot.objects)
    next_id = max((r.id for r in records), default=-1) + 1
    for det in detections:
        hit = _match(records, det, tau_match)
        if hit is None:
            records.append(
                ObjectRecord(
                    id=next_id,
                    description=det.description,
                    box=det.box,
                    observation_count=1,
                    last_seen_tick=det.source_tick,
                )
            )
            next_id += 1
        else:
            records[hit] = merge_records(records[hit], det)

    # duplicate sweep: lowest id absorbs, repeat until clean
    changed = True
    while changed:
        changed = False
        records.sort(key=lambda r: r.id)
        for i in range(len(records)):
            for j in range(i + 1, len(records)):
                a, b = records[i], records[j]
                if a.label != b.label:
                    continue
                if float(np.linalg.norm(a.box.center - b.box.center)) < tau_match:
                    records[i] = _absorb(a, b)
                    del records[j]
                    changed = True
                    break
            if changed:
                break

    target_id = snapshot.target_id
    if target_id is not None and not any(r.id == target_id for r in records):
        target_id = next((r.id for r in records if r.is_target), None)
    return SceneSnapshot(tick=snapshot.tick + 1, objects=tuple(records), target_id=target_id)


def designate_target(
    snapshot: SceneSnapshot, label: str, on_ambiguous: str = "resolve"
) -> SceneSnapshot:
    """Point the snapshot's target at the record carrying `label`.

    With several candidates the record seen most often wins (ties go to
    the lowest id); pass on_ambiguous="raise" to get AmbiguousTargetError
    instead.  Without any candidate the target is cleared, which routes
    the caller to occlusion reasoning.
    """
    candidates = [r for r in snapshot.objects if r.label == label]
    if not candidates:
        chosen = None
    elif len(candidates) == 1:
        chosen = candidates[0]
    else:
        if on_ambiguous == "raise":
            raise AmbiguousTargetError(
                f"{len(candidates)} records labelled {label!r}"
            )
        chosen = max(candidates, key=lambda r: (r.observation_count, -r.id))
    objects = tuple(
        replace(r, is_target=(chosen is not None and r.id == chosen.id))
        for r in snapshot.objects
    )
    return SceneSnapshot(
        tick=snapshot.tick,
        objects=objects,
        target_id=None if chosen is None else chosen.id,
    )


def remove_record(snapshot: SceneSnapshot, record_id: int) -> SceneSnapshot:
    """Drop a record (after its object was physically taken away)."""
    objects = tuple(o for o in snapshot.objects if o.id != record_id)
    target_id = snapshot.target_id if snapshot.target_id != record_id else None
    return SceneSnapshot(tick=snapshot.tick, objects=objects, target_id=target_id)
