import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from centroid_codec.config import DecodeConfig, EncodeConfig, SynthConfig
from centroid_codec.decoder import (
    STAGES,
    assemble_instances,
    cluster_instances,
    decode,
    home_clusters,
    keypoint_anchors,
    mask_distances,
    nms_peaks,
    peaks_in_plane,
    phi,
    vote_keypoints,
)
from centroid_codec.encoder import MASKCENTROID_CHANNELS, encode_scene
from centroid_codec.errors import PhiDomainError, SchemaError
from centroid_codec.metrics import mask_iou
from centroid_codec.models import Anchor, Cluster, FieldGrid, KeypointCandidate
from centroid_codec.synth import generate_scene


def _decode(fields, **overrides):
    return decode(fields.heatmaps, fields.keycentroid, fields.maskcentroid, cfg=DecodeConfig(**overrides))


def _by_first_x(instances):
    return sorted(instances, key=lambda inst: inst.mask.nonzero()[1].min())


# ---------- phi ----------
def test_phi_is_one_half_on_the_boundary():
    sigma = 7.3
    d = sigma * math.sqrt(2.0 * math.log(2.0))
    assert phi((d, 0.0), (0.0, 0.0), sigma) == pytest.approx(0.5, abs=1e-9)
    assert phi((3.0, 4.0), (3.0, 4.0), sigma) == 1.0


def test_phi_decreases_with_distance():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        sigma = rng.uniform(0.1, 50.0)
        near, far = np.sort(rng.uniform(0.0, 100.0, size=2))
        if far - near < 1e-6:
            continue
        assert phi((near, 0.0), (0.0, 0.0), sigma) >= phi((far, 0.0), (0.0, 0.0), sigma)
        if phi((far, 0.0), (0.0, 0.0), sigma) > 0:
            assert phi((near, 0.0), (0.0, 0.0), sigma) > phi((far, 0.0), (0.0, 0.0), sigma)


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_phi_rejects_non_positive_sigma(sigma):
    with pytest.raises(PhiDomainError):
        phi((0.0, 0.0), (1.0, 1.0), sigma)


# ---------- round trip ----------
def test_noiseless_round_trip_recovers_everything(two_person_scene):
    fields = encode_scene(two_person_scene)
    instances = _by_first_x(_decode(fields))
    assert len(instances) == 2
    for inst, person in zip(instances, two_person_scene.persons):
        assert np.array_equal(inst.mask, person.mask)
        assert inst.present.all()
        assert np.abs(inst.keypoints[:, :2] - person.keypoints[:, :2]).max() < 1e-3
        assert 0.99 < inst.score <= 1.0


def test_static_round_trip_on_separated_people(two_person_scene):
    encode_cfg = EncodeConfig(centroid_mode="static")
    fields = encode_scene(two_person_scene, cfg=encode_cfg)
    instances = _by_first_x(
        decode(fields.heatmaps, fields.keycentroid, fields.maskcentroid, cfg=DecodeConfig.matching(encode_cfg))
    )
    assert [inst.anchor for inst in instances] == [(29.5, 69.5), (119.5, 69.5)]
    for inst, person in zip(instances, two_person_scene.persons):
        assert np.array_equal(inst.mask, person.mask)


def test_heatmap_only_mode_loses_subpixel_accuracy(two_person_scene):
    fields = encode_scene(two_person_scene)
    instances = _by_first_x(_decode(fields, use_keycentroid=False))
    errors = [
        np.abs(inst.keypoints[inst.present, :2] - person.keypoints[inst.present, :2]).max()
        for inst, person in zip(instances, two_person_scene.persons)
        if inst.present.any()
    ]
    assert errors and max(errors) > 1.0


def test_empty_fields_decode_to_nothing(skeleton):
    h = FieldGrid.zeros(32, 32, [f"hm/{n}" for n in skeleton.keypoint_names])
    kc = FieldGrid.zeros(32, 32, [f"kc/{i}" for i in range(34)])
    mc = FieldGrid.zeros(32, 32, MASKCENTROID_CHANNELS)
    assert decode(h, kc, mc) == []


def test_timings_and_executor_do_not_change_results(two_person_scene):
    fields = encode_scene(two_person_scene)
    timings = {}
    plain = decode(fields.heatmaps, fields.keycentroid, fields.maskcentroid, timings=timings)
    assert set(timings) == set(STAGES)
    with ThreadPoolExecutor(max_workers=4) as pool:
        threaded = decode(fields.heatmaps, fields.keycentroid, fields.maskcentroid, executor=pool)
    assert len(plain) == len(threaded)
    assert all(a.same_as(b) for a, b in zip(plain, threaded))


def test_mismatched_shapes_are_schema_errors(two_person_scene):
    fields = encode_scene(two_person_scene)
    small = FieldGrid(fields.maskcentroid.channels, fields.maskcentroid.data[:, :10, :10])
    with pytest.raises(SchemaError):
        decode(fields.heatmaps, fields.keycentroid, small)
    with pytest.raises(SchemaError):
        vote_keypoints(fields.heatmaps, fields.keycentroid.select(fields.keycentroid.channels[:4]), DecodeConfig())


# ---------- stages ----------
def test_votes_concentrate_on_keypoints(two_person_scene):
    fields = encode_scene(two_person_scene)
    votes = vote_keypoints(fields.heatmaps, fields.keycentroid, DecodeConfig())
    nose = votes.data[0]
    # every disk pixel votes exactly onto its keypoint
    assert nose[25, 15] + nose[25, 105] == pytest.approx(votes.voter_mass[0])
    candidates = [c for c in nms_peaks(votes, DecodeConfig()) if c.slot == 0]
    assert sorted((c.x, c.y) for c in candidates) == [(15.0, 25.0), (105.0, 25.0)]


def test_cluster_instances_accepts_point_score_pairs(two_person_scene):
    fields = encode_scene(two_person_scene)
    clusters = cluster_instances(fields.maskcentroid, [((39.0, 65.0), 0.9)], DecodeConfig())
    assert len(clusters) == 1
    assert np.array_equal(clusters[0].mask, two_person_scene.persons[0].mask)
    assert clusters[0].score == pytest.approx(1.0)


def test_small_clusters_are_discarded(two_person_scene):
    fields = encode_scene(two_person_scene)
    clusters = cluster_instances(
        fields.maskcentroid, [Anchor(39.0, 65.0, 0.9)], DecodeConfig(min_instance_pixels=5000)
    )
    assert clusters == []


def test_max_instances_stops_clustering(two_person_scene):
    fields = encode_scene(two_person_scene)
    anchors = [Anchor(39.0, 65.0, 0.9), Anchor(129.0, 65.0, 0.8)]
    assert len(cluster_instances(fields.maskcentroid, anchors, DecodeConfig(max_instances=1))) == 1


def test_phi_grows_with_sigma_at_fixed_distance():
    values = [phi((5.0, 0.0), (0.0, 0.0), sigma) for sigma in np.linspace(0.5, 40.0, 80)]
    assert all(a < b for a, b in zip(values, values[1:]))


# ---------- votes ----------
def _one_slot_fields(heat, dx, dy):
    h = FieldGrid(("hm/nose",), heat[None].astype(np.float32))
    kc = FieldGrid(("kc/nose/dx", "kc/nose/dy"), np.stack((dx, dy)).astype(np.float32))
    return h, kc


def test_two_half_voters_make_one_unit_of_mass():
    cfg = DecodeConfig()
    heat = np.zeros((10, 10))
    heat[2, 2] = heat[6, 6] = 0.5
    dx, dy = np.zeros((10, 10)), np.zeros((10, 10))
    dx[2, 2] = dy[2, 2] = 3.0 / cfg.offset_scale
    dx[6, 6] = dy[6, 6] = -1.0 / cfg.offset_scale
    votes = vote_keypoints(*_one_slot_fields(heat, dx, dy), cfg)
    assert votes.data[0][5, 5] == pytest.approx(1.0)
    assert votes.data[0].sum() == pytest.approx(1.0)
    [candidate] = peaks_in_plane(votes.data[0], cfg, 0)
    assert (candidate.x, candidate.y, candidate.score) == pytest.approx((5.0, 5.0, 0.5))


def test_votes_pushed_off_the_canvas_are_clamped_not_lost():
    rng = np.random.default_rng(12)
    heat = rng.uniform(0.0, 1.0, size=(24, 24))
    dx, dy = rng.uniform(-3.0, 3.0, size=(2, 24, 24))
    votes = vote_keypoints(*_one_slot_fields(heat, dx, dy), DecodeConfig())
    voters = heat.astype(np.float32)
    assert votes.voter_mass[0] == pytest.approx(float(voters[voters >= 0.01].sum()), rel=1e-6)
    assert votes.data[0].sum() == pytest.approx(votes.voter_mass[0], rel=1e-5)


# ---------- peaks ----------
@pytest.mark.parametrize(
    "peaks, expected",
    [
        ({(20, 20): 5.0, (20, 25): 3.0}, [(20.0, 20.0)]),
        ({(30, 20): 4.0, (20, 25): 4.0}, [(25.0, 20.0)]),
        ({(20, 30): 4.0, (20, 24): 4.0}, [(24.0, 20.0)]),
        ({(20, 20): 5.0, (20, 60): 3.0}, [(20.0, 20.0), (60.0, 20.0)]),
    ],
)
def test_peak_suppression_order(peaks, expected):
    plane = np.zeros((64, 64))
    for (row, col), mass in peaks.items():
        plane[row, col] = mass
    candidates = peaks_in_plane(plane, DecodeConfig(nms_radius=16.0), 0)
    assert [(c.x, c.y) for c in candidates] == expected


def test_background_maxima_need_a_full_voter():
    plane = np.zeros((32, 32))
    plane[10:13, 10:13] = 0.05
    plane[11, 11] = 0.1
    assert peaks_in_plane(plane, DecodeConfig(), 0) == []
    [candidate] = peaks_in_plane(plane, DecodeConfig(min_peak_mass=0.0), 0)
    assert (candidate.x, candidate.y) == pytest.approx((11.0, 11.0))
    assert candidate.mass == pytest.approx(0.5)


@pytest.mark.parametrize("factor", [0.1, 0.37, 1.0])
def test_scaling_the_heatmap_keeps_candidate_ranking(factor):
    rng = np.random.default_rng(4)
    heat = rng.uniform(0.1, 1.0, size=(48, 48))
    dx, dy = rng.uniform(-0.5, 0.5, size=(2, 48, 48))
    cfg = DecodeConfig(min_peak_mass=0.0, candidate_score_threshold=1e-6)

    def ranked(scale):
        votes = vote_keypoints(*_one_slot_fields(heat * scale, dx, dy), cfg)
        return np.array([(c.x, c.y) for c in nms_peaks(votes, cfg)])

    reference, scaled = ranked(1.0), ranked(factor)
    assert len(reference) > 1
    assert scaled.shape == reference.shape
    np.testing.assert_allclose(scaled, reference, atol=1e-4)


# ---------- anchors and clusters ----------
def test_torso_anchors_come_before_confident_limbs(skeleton):
    candidates = [
        KeypointCandidate(skeleton.index("left_wrist"), 100.0, 100.0, 0.99),
        KeypointCandidate(skeleton.index("right_hip"), 50.0, 50.0, 0.95),
        KeypointCandidate(skeleton.index("right_hip"), 15.0, 10.0, 0.97),
        KeypointCandidate(skeleton.index("left_hip"), 10.0, 10.0, 0.8),
    ]
    anchors = keypoint_anchors(candidates, skeleton, DecodeConfig())
    assert [(a.x, a.y) for a in anchors] == [(10.0, 10.0), (50.0, 50.0), (100.0, 100.0)]
    assert [a.slot for a in anchors] == [
        skeleton.index("left_hip"),
        skeleton.index("right_hip"),
        skeleton.index("left_wrist"),
    ]


def _spread_person():
    """A block whose left half embeds at (14, 30) and right half at (26, 30)."""
    mc = FieldGrid.zeros(64, 64, MASKCENTROID_CHANNELS)
    rows, cols = np.mgrid[10:50, 10:30]
    target_x = np.where(cols < 20, 14.0, 26.0)
    mc.data[0, 10:50, 10:30] = target_x - cols
    mc.data[1, 10:50, 10:30] = 30.0 - rows
    mc.data[3, 10:50, 10:30] = 16.0
    block = np.zeros((64, 64), dtype=bool)
    block[10:50, 10:30] = True
    return mc, block


def test_refinement_pulls_in_the_rest_of_an_off_centre_person():
    mc, block = _spread_person()
    [cluster] = cluster_instances(mc, [Anchor(40.0, 30.0, 0.9)], DecodeConfig())
    assert np.array_equal(cluster.mask, block)
    assert cluster.anchor == (40.0, 30.0)
    assert cluster.score == pytest.approx(math.exp(-36.0 / 512.0))


def test_without_refinement_only_the_near_half_joins():
    mc, block = _spread_person()
    [cluster] = cluster_instances(mc, [Anchor(40.0, 30.0, 0.9)], DecodeConfig(anchor_refinement=0))
    assert cluster.mask.sum() == 400
    assert cluster.mask[:, 20:30].sum() == 400
    assert cluster.score == pytest.approx(math.exp(-196.0 / 512.0))


# ---------- grouping ----------
def test_mask_distances_and_homes():
    masks = [np.zeros((40, 40), dtype=bool), np.zeros((40, 40), dtype=bool)]
    masks[0][5:15, 5:15] = True
    masks[1][5:15, 15:30] = True
    points = [(10.0, 10.0), (20.0, 10.0), (35.0, 35.0)]
    owner, dist = mask_distances(points, masks, DecodeConfig(disk_radius=32.0))
    assert owner.tolist() == [0, 1, -1]
    assert dist[0, 0] == 0.0
    assert dist[1, 0] == pytest.approx(6.0)
    assert dist[2, 1] == pytest.approx(math.sqrt(21.0**2 + 6.0**2))
    # off every mask and farther than R/4 from both
    assert home_clusters(owner, dist, 8.0).tolist() == [0, 1, -1]


def test_no_candidates_means_no_distances():
    owner, dist = mask_distances([], [np.zeros((4, 4), dtype=bool)], DecodeConfig())
    assert owner.shape == (0,)
    assert dist.shape == (0, 1)


def _box(top, bottom, left, right, size=64):
    mask = np.zeros((size, size), dtype=bool)
    mask[top:bottom, left:right] = True
    return mask


def test_each_instance_keeps_its_best_home_candidate(skeleton):
    nose, hip = skeleton.index("nose"), skeleton.index("left_hip")
    clusters = [
        Cluster(_box(10, 50, 10, 50), (30.0, 30.0), 0.8, None),
        Cluster(_box(54, 64, 54, 64), (58.0, 58.0), 0.6, None),
    ]
    candidates = [
        KeypointCandidate(nose, 20.0, 20.0, 0.8),
        # just below the mask, within R/4
        KeypointCandidate(nose, 20.0, 56.0, 0.9),
        KeypointCandidate(hip, 30.0, 30.0, 0.4),
        KeypointCandidate(hip, 35.0, 40.0, 0.7),
        # near no mask
        KeypointCandidate(skeleton.index("left_eye"), 5.0, 60.0, 0.9),
    ]
    first, second = assemble_instances(candidates, clusters, skeleton, DecodeConfig())
    assert tuple(first.keypoints[nose]) == (20.0, 56.0, 0.9)
    assert tuple(first.keypoints[hip]) == (35.0, 40.0, 0.7)
    assert first.present.sum() == 2
    assert first.score == pytest.approx(0.8)
    assert not second.present.any()
    assert second.score == 0.6
    assert np.array_equal(second.mask, clusters[1].mask)


def test_a_lone_weak_candidate_is_not_lent_to_a_neighbour(skeleton):
    clusters = [
        Cluster(_box(5, 56, 10, 30), (20.0, 30.0), 0.9, None),
        Cluster(_box(5, 56, 40, 60), (50.0, 30.0), 0.7, None),
    ]
    candidates = [KeypointCandidate(0, 25.0, 20.0, 0.9), KeypointCandidate(0, 28.0, 40.0, 0.4)]
    a, b = assemble_instances(candidates, clusters, skeleton, DecodeConfig())
    assert tuple(a.keypoints[0]) == (25.0, 20.0, 0.9)
    assert not b.present[0]
    assert b.score == 0.7


def test_hidden_keypoint_goes_to_the_nearer_empty_instance(skeleton):
    clusters = [
        Cluster(_box(5, 56, 10, 30), (20.0, 30.0), 0.9, None),
        Cluster(_box(5, 56, 40, 60), (50.0, 30.0), 0.7, None),
    ]
    candidates = [KeypointCandidate(0, 25.0, 20.0, 0.9), KeypointCandidate(0, 28.0, 40.0, 0.95)]
    a, b = assemble_instances(candidates, clusters, skeleton, DecodeConfig())
    assert tuple(a.keypoints[0]) == (25.0, 20.0, 0.9)
    assert tuple(b.keypoints[0]) == (28.0, 40.0, 0.95)


def test_assemble_without_clusters(skeleton):
    assert assemble_instances([KeypointCandidate(0, 1.0, 1.0, 0.9)], [], skeleton, DecodeConfig()) == []


def test_three_overlapping_people_decode_to_three_instances():
    cfg = SynthConfig(persons_min=3, persons_max=3, overlap_target=0.3, rng_seed=17)
    scenes = (generate_scene(cfg, index) for index in range(40))
    scene = next((s for s in scenes if any((p.keypoints[:, 2] == 1).any() for p in s.persons)), None)
    assert scene is not None, "no scene with a hidden keypoint"
    instances = _decode(encode_scene(scene))
    assert len(instances) == 3
    for person in scene.persons:
        best = max(instances, key=lambda inst: mask_iou(inst.mask, person.mask))
        assert mask_iou(best.mask, person.mask) > 0.99
        labelled = person.keypoints[:, 2] > 0
        assert best.present[labelled].all()
        assert np.abs(best.keypoints[labelled, :2] - person.keypoints[labelled, :2]).max() <= 1.0
