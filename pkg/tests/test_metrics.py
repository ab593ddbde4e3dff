import itertools

import numpy as np
import pytest

from centroid_codec.errors import InvariantError, SchemaError
from centroid_codec.metrics import average_precision, evaluate, interpolated_ap, mask_iou, oks
from centroid_codec.models import DecodedInstance, PersonAnnotation, SceneAnnotation


def _perfect(scene: SceneAnnotation, score: float = 0.9) -> list[DecodedInstance]:
    out = []
    for person in scene.persons:
        keypoints = person.keypoints.copy()
        keypoints[:, 2] = score
        out.append(DecodedInstance(keypoints, person.keypoints[:, 2] > 0, person.mask, (0.0, 0.0), score))
    return out


def _blank_like(person: PersonAnnotation, score: float) -> DecodedInstance:
    mask = np.zeros_like(person.mask)
    mask[0, 0] = True
    keypoints = np.zeros((17, 3))
    keypoints[:, :2] = person.keypoints[:, :2] + 500.0
    keypoints[:, 2] = score
    return DecodedInstance(keypoints, np.ones(17, dtype=bool), mask, (0.0, 0.0), score)


def test_oks_perfect_and_absent(two_person_scene, skeleton):
    person = two_person_scene.persons[0]
    assert oks(person.keypoints, person, person.area, skeleton) == pytest.approx(1.0)
    assert oks(person.keypoints, person, person.area, skeleton, np.zeros(17, dtype=bool)) == 0.0
    with pytest.raises(InvariantError):
        oks(person.keypoints, person, 0.0, skeleton)


def test_oks_ignores_unlabelled_slots(two_person_scene, skeleton):
    person = two_person_scene.persons[0]
    kps = person.keypoints.copy()
    kps[1:, 2] = 0
    partial = PersonAnnotation(kps, person.mask, 1)
    det = person.keypoints.copy()
    det[1:, :2] += 100.0
    assert oks(det, partial, person.area, skeleton) == pytest.approx(1.0)


def test_mask_iou():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    assert mask_iou(a, b) == 0.0
    a[:2] = True
    b[1:3] = True
    assert mask_iou(a, b) == pytest.approx(4 / 12)
    with pytest.raises(SchemaError):
        mask_iou(a, np.zeros((3, 3), dtype=bool))


def test_perfect_detections_score_one(two_person_scene):
    result = evaluate([_perfect(two_person_scene)], [two_person_scene])
    assert result.keypoint_ap.mean == pytest.approx(1.0)
    assert result.mask_ap.mean == pytest.approx(1.0)
    assert all(v == pytest.approx(1.0) for v in result.keypoint_ap.per_threshold.values())
    assert sorted(gid for _, gid, _ in result.matches["oks"][0]) == [1, 2]


def test_empty_detections_score_zero(two_person_scene):
    result = evaluate([[]], [two_person_scene])
    assert result.keypoint_ap.mean == 0.0
    assert result.mask_ap.mean == 0.0


def test_no_ground_truth_scores_zero():
    scene = SceneAnnotation(8, 8, ())
    assert average_precision([[]], [scene]).keypoint_ap.mean == 0.0


@pytest.mark.parametrize(
    "high_hits, low_hits",
    list(itertools.product([True, False], repeat=2)),
)
@pytest.mark.parametrize("high_first", [True, False])
def test_two_detections_one_gt_match_brute_force(two_person_scene, high_hits, low_hits, high_first):
    person = two_person_scene.persons[0]
    scene = SceneAnnotation(two_person_scene.width, two_person_scene.height, (person,))
    hit = _perfect(scene)[0]

    def make(hits, score):
        if hits:
            return DecodedInstance(hit.keypoints, hit.present, hit.mask, hit.anchor, score)
        return _blank_like(person, score)

    high, low = make(high_hits, 0.9), make(low_hits, 0.4)
    dets = [high, low] if high_first else [low, high]
    # brute force: first hit in score order is a true positive, everything else is false
    ranked = [high_hits, low_hits]
    if ranked[0]:
        expected = 1.0
    elif ranked[1]:
        expected = 0.5
    else:
        expected = 0.0
    for similarity in ("oks", "mask_iou"):
        result = average_precision([dets], [scene], similarity, thresholds=(0.5,))
        summary = result.keypoint_ap if similarity == "oks" else result.mask_ap
        assert summary.mean == pytest.approx(expected)


def test_interpolated_ap_envelope():
    # fp then tp: precision envelope is 0.5 everywhere
    ap, recall, _, _ = interpolated_ap(np.array([False, True]), np.array([0.9, 0.8]), 1)
    assert ap == pytest.approx(0.5)
    assert recall == 1.0


def test_area_range_ignores_small_ground_truth(two_person_scene):
    dets = _perfect(two_person_scene)[:1]
    full = average_precision([dets], [two_person_scene], "mask_iou").mask_ap.mean
    limited = average_precision(
        [dets], [two_person_scene], "mask_iou", area_range=(0.0, 10.0)
    ).mask_ap.mean
    assert full < 1.0
    assert limited == 0.0


def test_mismatched_lengths_and_unknown_similarity(two_person_scene):
    with pytest.raises(SchemaError):
        average_precision([[], []], [two_person_scene])
    with pytest.raises(SchemaError):
        average_precision([[]], [two_person_scene], "bbox")


def test_eval_result_serialises(two_person_scene):
    result = evaluate([_perfect(two_person_scene)], [two_person_scene], thresholds=(0.5, 0.75))
    doc = result.to_dict()
    assert doc["keypoint"]["ap"] == {"0.50": 1.0, "0.75": 1.0}
    assert {row["similarity"] for row in result.pr_rows()} == {"oks", "mask_iou"}
