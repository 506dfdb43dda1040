"""Tests for the persistent object list."""

import numpy as np
import pytest

from nbvgrasp.geom import OrientedBox
from nbvgrasp.scene import (
    AmbiguousTargetError,
    Detection,
    ObjectDescription,
    ObjectRecord,
    SceneSnapshot,
    designate_target,
    merge_records,
    remove_record,
    update_scene,
)


def make_box(center, half=(0.05, 0.05, 0.05), rotation=None):
    return OrientedBox(center, np.eye(3) if rotation is None else rotation, half)


def make_detection(label, center, tick=1, color="", pattern="", rel="", half=(0.05, 0.05, 0.05)):
    return Detection(
        description=ObjectDescription(label, color, pattern, rel),
        box=make_box(center, half),
        source_tick=tick,
    )


def make_record(rid, label, center, count=1, tick=0, color="", target=False):
    return ObjectRecord(
        id=rid,
        description=ObjectDescription(label, color),
        box=make_box(center),
        observation_count=count,
        last_seen_tick=tick,
        is_target=target,
    )


# ---------------------------------------------------------------- update_scene


def test_update_adds_to_empty_snapshot():
    snap = update_scene(SceneSnapshot(), [make_detection("red cup", [0, 0, 0])])
    assert snap.tick == 1
    assert len(snap.objects) == 1
    assert snap.objects[0].observation_count == 1
    assert snap.objects[0].label == "red cup"


def test_update_merges_nearby_same_label():
    snap = SceneSnapshot(objects=(make_record(0, "red cup", [0, 0, 0]),))
    out = update_scene(snap, [make_detection("red cup", [0.01, 0, 0])], tau_match=0.05)
    assert len(out.objects) == 1
    assert out.objects[0].observation_count == 2
    assert out.objects[0].last_seen_tick == 1


def test_update_adds_far_same_label():
    snap = SceneSnapshot(objects=(make_record(0, "red cup", [0, 0, 0]),))
    out = update_scene(snap, [make_detection("red cup", [1, 0, 0])], tau_match=0.05)
    assert len(out.objects) == 2
    # brute force: no surviving pair within the matching distance
    for i, a in enumerate(out.objects):
        for b in out.objects[i + 1 :]:
            close = np.linalg.norm(a.box.center - b.box.center) < 0.05
            assert not (a.label == b.label and close)


def test_update_does_not_merge_different_labels():
    snap = SceneSnapshot(objects=(make_record(0, "red cup", [0, 0, 0]),))
    out = update_scene(snap, [make_detection("blue cup", [0.01, 0, 0])])
    assert len(out.objects) == 2


def test_update_empty_detections_increments_tick():
    snap = SceneSnapshot(tick=4, objects=(make_record(0, "box", [0, 0, 0]),))
    out = update_scene(snap, [])
    assert out.tick == 5
    assert len(out.objects) == 1
    assert out.objects[0].observation_count == 1


def test_update_two_detections_same_spot_collapse():
    out = update_scene(
        SceneSnapshot(),
        [make_detection("cup", [0, 0, 0]), make_detection("cup", [0.002, 0, 0])],
    )
    assert len(out.objects) == 1
    assert out.objects[0].observation_count == 2


def test_update_matches_nearest_record_lowest_id_on_tie():
    snap = SceneSnapshot(
        objects=(
            make_record(0, "cup", [-0.04, 0, 0]),
            make_record(1, "cup", [0.04, 0, 0]),
        )
    )
    out = update_scene(snap, [make_detection("cup", [0.0, 0, 0])], tau_match=0.05)
    counts = {r.id: r.observation_count for r in out.objects}
    assert counts[0] == 2  # equidistant: lowest id wins
    assert counts[1] == 1


def test_update_preserves_unmatched_records():
    snap = SceneSnapshot(objects=(make_record(0, "plate", [0.4, 0, 0], count=3),))
    out = update_scene(snap, [make_detection("cup", [0, 0, 0])])
    plate = out.get(0)
    assert plate.observation_count == 3
    assert plate.label == "plate"


def test_update_is_add_monotone_random():
    rng = np.random.default_rng(71)
    labels = ["cup", "box", "can"]
    snap = SceneSnapshot()
    for tick in range(30):
        dets = [
            make_detection(
                labels[rng.integers(len(labels))], rng.uniform(-0.4, 0.4, 3), tick + 1
            )
            for _ in range(rng.integers(0, 5))
        ]
        out = update_scene(snap, dets)
        assert len(out.objects) >= len(snap.objects)
        snap = out


def test_update_no_duplicate_survivors_random():
    rng = np.random.default_rng(72)
    snap = SceneSnapshot()
    for tick in range(40):
        dets = [
            make_detection("cup", rng.uniform(-0.15, 0.15, 3), tick + 1)
            for _ in range(rng.integers(1, 4))
        ]
        snap = update_scene(snap, dets, tau_match=0.05)
        for i, a in enumerate(snap.objects):
            for b in snap.objects[i + 1 :]:
                if a.label == b.label:
                    assert np.linalg.norm(a.box.center - b.box.center) >= 0.05


def test_update_merge_order_insensitive_for_common_match():
    base = SceneSnapshot(objects=(make_record(0, "cup", [0, 0, 0], count=2),))
    offsets = [[0.004, 0, 0], [-0.003, 0.002, 0], [0, -0.004, 0.001]]
    dets = [make_detection("cup", off) for off in offsets]
    for perm in ([0, 1, 2], [2, 1, 0], [1, 2, 0]):
        out = update_scene(base, [dets[k] for k in perm])
        assert len(out.objects) == 1
        assert out.objects[0].observation_count == 2 + len(dets)


def test_update_keeps_target_through_absorption():
    snap = SceneSnapshot(
        objects=(
            make_record(0, "cup", [0.0, 0, 0]),
            make_record(5, "cup", [0.08, 0, 0], target=True),
        ),
        target_id=5,
    )
    # detection between the two pulls record 0 toward record 5 until the
    # duplicate sweep collapses them; the target flag must survive
    out = update_scene(snap, [make_detection("cup", [0.045, 0, 0])], tau_match=0.05)
    if len(out.objects) == 1:
        assert out.target_id == out.objects[0].id
        assert out.objects[0].is_target
    else:
        assert out.target_id == 5


# --------------------------------------------------------------- merge_records


def test_merge_identical_axis_aligned_boxes():
    rec = make_record(0, "cup", [0.1, 0.2, 0.05])
    out = merge_records(rec, make_detection("cup", [0.1, 0.2, 0.05]))
    assert out.observation_count == 2
    np.testing.assert_allclose(out.box.center, rec.box.center, atol=1e-9)
    np.testing.assert_allclose(out.box.half_extents, rec.box.half_extents, atol=1e-9)


def test_merge_identical_rotated_cuboids():
    th = np.deg2rad(25)
    Rz = np.array(
        [[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]]
    )
    box = OrientedBox([0.1, 0, 0.03], Rz, [0.06, 0.04, 0.02])
    rec = ObjectRecord(0, ObjectDescription("box"), box)
    det = Detection(ObjectDescription("box"), box, 1)
    out = merge_records(rec, det)
    np.testing.assert_allclose(out.box.center, box.center, atol=1e-9)
    np.testing.assert_allclose(
        np.sort(out.box.half_extents), np.sort(box.half_extents), atol=1e-9
    )


def test_merge_covers_both_corner_sets():
    rec = ObjectRecord(0, ObjectDescription("cup"), OrientedBox([0, 0, 0], np.eye(3), [0.5, 0.5, 0.5]))
    det = Detection(ObjectDescription("cup"), OrientedBox([0.1, 0, 0], np.eye(3), [0.5, 0.5, 0.5]), 1)
    out = merge_records(rec, det)
    for corner in np.vstack([rec.box.corners(), det.box.corners()]):
        assert out.box.contains(corner, slack=1e-9)
    assert out.observation_count == 2


def test_merge_attribute_overwrite_rules():
    rec = make_record(0, "cup", [0, 0, 0], color="red")
    out = merge_records(rec, make_detection("cup", [0, 0, 0], color=""))
    assert out.description.color == "red"  # empty incoming keeps existing
    out2 = merge_records(rec, make_detection("cup", [0, 0, 0], color="maroon", pattern="dots"))
    assert out2.description.color == "maroon"
    assert out2.description.pattern == "dots"


# ------------------------------------------------------------ designate_target


def test_designate_unique_label():
    snap = SceneSnapshot(
        objects=(make_record(0, "plate", [0.2, 0, 0]), make_record(1, "red cup", [0, 0, 0]))
    )
    out = designate_target(snap, "red cup")
    assert out.target_id == 1
    assert out.get(1).is_target
    assert not out.get(0).is_target


def test_designate_absent_label_clears_target():
    snap = designate_target(
        SceneSnapshot(objects=(make_record(0, "plate", [0, 0, 0], target=True),), target_id=0),
        "red cup",
    )
    assert snap.target_id is None
    assert not snap.get(0).is_target


def test_designate_ambiguous_resolved_by_count_then_id():
    snap = SceneSnapshot(
        objects=(
            make_record(0, "red cup", [0, 0, 0], count=1),
            make_record(1, "red cup", [0.3, 0, 0], count=3),
            make_record(2, "red cup", [0.6, 0, 0], count=3),
        )
    )
    out = designate_target(snap, "red cup")
    assert out.target_id == 1  # highest count, then lowest id


def test_designate_ambiguous_raises_when_asked():
    snap = SceneSnapshot(
        objects=(make_record(0, "cup", [0, 0, 0]), make_record(1, "cup", [0.5, 0, 0]))
    )
    with pytest.raises(AmbiguousTargetError):
        designate_target(snap, "cup", on_ambiguous="raise")


# ------------------------------------------------------------------- plumbing


def test_snapshot_validation():
    with pytest.raises(ValueError):
        SceneSnapshot(objects=(make_record(0, "a", [0, 0, 0]), make_record(0, "b", [1, 1, 1])))
    with pytest.raises(ValueError):
        SceneSnapshot(objects=(make_record(0, "a", [0, 0, 0]),), target_id=3)


def test_record_and_description_validation():
    with pytest.raises(ValueError):
        make_record(0, "cup", [0, 0, 0], count=0)
    with pytest.raises(ValueError):
        ObjectDescription("")


def test_snapshot_accessors():
    snap = SceneSnapshot(
        objects=(make_record(0, "a", [0, 0, 0]), make_record(1, "b", [1, 0, 0], target=True)),
        target_id=1,
    )
    assert snap.target().id == 1
    assert [r.id for r in snap.non_targets()] == [0]
    with pytest.raises(KeyError):
        snap.get(9)


def test_remove_record():
    snap = SceneSnapshot(
        objects=(make_record(0, "a", [0, 0, 0]), make_record(1, "b", [1, 0, 0])),
        target_id=1,
    )
    out = remove_record(snap, 0)
    assert [r.id for r in out.objects] == [1]
    assert out.target_id == 1
    out2 = remove_record(snap, 1)
    assert out2.target_id is None
