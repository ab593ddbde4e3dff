import matplotlib.image as mpimg
import numpy as np
import pytest

from centroid_codec.errors import SchemaError
from centroid_codec.models import DecodedInstance
from centroid_codec.overlay import PALETTE, WHITE, overlay_image, render_overlay

GOLDEN = "two_person_overlay.png"


def _instance(mask: np.ndarray) -> DecodedInstance:
    return DecodedInstance(np.zeros((17, 3)), np.zeros(17, dtype=bool), mask, (-100.0, -100.0), 0.9)


def test_empty_detections_render_blank(tmp_path):
    path = render_overlay([], (20, 30), tmp_path / "blank.png")
    pixels = mpimg.imread(path)
    assert pixels.shape[:2] == (20, 30)
    assert not pixels[..., :3].any()


def test_instances_get_distinct_palette_colours():
    a = np.zeros((10, 10), dtype=bool)
    b = np.zeros((10, 10), dtype=bool)
    a[:5] = True
    b[5:] = True
    image = overlay_image([_instance(a), _instance(b)], (10, 10))
    assert (image[0, 0] == PALETTE[0] // 2).all()
    assert (image[9, 9] == PALETTE[1] // 2).all()
    assert not (PALETTE[0] == PALETTE[1]).all()


def test_scene_overlay_marks_keypoints_and_anchor(two_person_scene, skeleton):
    image = overlay_image(two_person_scene, (two_person_scene.height, two_person_scene.width))
    # nose of person 1
    assert (image[25, 15] == PALETTE[0]).all()
    hip = two_person_scene.persons[0].keypoints[skeleton.index("left_hip")]
    assert (image[int(hip[1]), int(hip[0])] == WHITE).all()
    assert (image[0, 0] == 0).all()


def test_mask_canvas_mismatch():
    with pytest.raises(SchemaError):
        overlay_image([_instance(np.ones((4, 4), dtype=bool))], (5, 5))


def test_render_is_byte_stable(tmp_path, two_person_scene):
    first = render_overlay(two_person_scene, (160, 160), tmp_path / "a.png").read_bytes()
    second = render_overlay(two_person_scene, (160, 160), tmp_path / "b.png").read_bytes()
    assert first == second


def test_render_matches_golden(tmp_path, two_person_scene, pins):
    out = render_overlay(two_person_scene, (160, 160), tmp_path / "o.png")
    golden = pins.file(GOLDEN, out)
    assert np.array_equal(mpimg.imread(out), mpimg.imread(golden))
