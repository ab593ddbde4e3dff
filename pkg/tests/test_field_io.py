import io

import numpy as np
import pytest

from centroid_codec.errors import (
    FieldFormatError,
    FieldLengthError,
    FieldWriteError,
    InvariantError,
    MaskError,
    SchemaError,
)
from centroid_codec.field_io import (
    MAGIC,
    decode_rle,
    encode_rle,
    field_grid_bytes,
    load_detections,
    read_annotations,
    read_detections,
    read_encoded,
    read_field_grid,
    save_detections,
    write_annotations,
    write_detections,
    write_encoded,
    write_field_grid,
)
from centroid_codec.encoder import encode_scene
from centroid_codec.models import DecodedInstance, FieldGrid


def _bytes(grid: FieldGrid) -> bytes:
    sink = io.BytesIO()
    write_field_grid(grid, sink)
    return sink.getvalue()


def test_random_grids_survive_write_read_bit_exactly():
    rng = np.random.default_rng(11)
    for index in range(1000):
        c, h, w = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9)
        data = rng.normal(0.0, 1e3, size=(c, h, w)).astype(np.float32)
        names = tuple(f"ch{index}/{k}" for k in range(c))
        grid = FieldGrid(names, data)
        assert read_field_grid(io.BytesIO(_bytes(grid))) == grid


def test_header_layout_is_little_endian():
    grid = FieldGrid(("a",), np.array([[[1.0, 2.0]]], dtype=np.float32))
    raw = _bytes(grid)
    assert raw[:4] == MAGIC
    assert raw[4:16] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert raw[16:18] == (1).to_bytes(2, "little")
    assert raw[18:19] == b"a"
    assert np.frombuffer(raw[19:], dtype="<f4").tolist() == [1.0, 2.0]


def test_float64_grid_is_narrowed_on_write():
    grid = FieldGrid(("x",), np.full((1, 2, 2), 0.1, dtype=np.float64))
    back = read_field_grid(io.BytesIO(_bytes(grid)))
    assert back.data.dtype == np.float32
    assert back == grid


@pytest.mark.parametrize("value", [1e300, -1e300, 4e38])
def test_values_beyond_float32_are_rejected_before_writing(value):
    grid = FieldGrid(("a",), np.full((1, 1, 2), value, dtype=np.float64))
    sink = io.BytesIO()
    with pytest.raises(InvariantError):
        write_field_grid(grid, sink)
    assert sink.getvalue() == b""


def test_largest_float32_still_round_trips():
    top = float(np.finfo(np.float32).max)
    grid = FieldGrid(("a",), np.array([[[top, -top]]], dtype=np.float64))
    assert read_field_grid(io.BytesIO(_bytes(grid))) == grid


def test_bad_magic_is_rejected():
    raw = b"NOPE" + _bytes(FieldGrid.zeros(2, 2, ["a"]))[4:]
    with pytest.raises(FieldFormatError):
        read_field_grid(io.BytesIO(raw))


@pytest.mark.parametrize("cut", [6, 17, 20, 30])
def test_truncated_file_is_rejected(cut):
    raw = _bytes(FieldGrid.zeros(2, 2, ["a", "b"]))
    with pytest.raises(FieldLengthError):
        read_field_grid(io.BytesIO(raw[:cut]))


def test_trailing_bytes_are_rejected():
    raw = _bytes(FieldGrid.zeros(2, 2, ["a"])) + b"\x00"
    with pytest.raises(FieldLengthError):
        read_field_grid(io.BytesIO(raw))


def test_failing_sink_reports_bytes_written():
    class Sink:
        def __init__(self):
            self.calls = 0

        def write(self, chunk):
            self.calls += 1
            if self.calls > 1:
                raise OSError("disk full")
            return len(chunk)

    with pytest.raises(FieldWriteError) as info:
        write_field_grid(FieldGrid.zeros(4, 4, ["a"]), Sink())
    assert info.value.bytes_written == 16


def test_empty_channel_name_and_duplicates_are_schema_errors():
    with pytest.raises(SchemaError):
        FieldGrid(("",), np.zeros((1, 2, 2)))
    with pytest.raises(SchemaError):
        FieldGrid(("a", "a"), np.zeros((2, 2, 2)))


def test_field_grid_bytes_splits_header_names_payload():
    parts = field_grid_bytes(FieldGrid.zeros(3, 3, ["a", "bc"]))
    assert len(parts) == 4
    assert len(parts[-1]) == 2 * 3 * 3 * 4


# ---------- RLE ----------
def test_rle_starts_with_zero_run():
    mask = np.array([[True, True, False], [False, True, True]])
    assert encode_rle(mask) == [0, 2, 2, 2]
    assert np.array_equal(decode_rle([0, 2, 2, 2], 2, 3), mask)


def test_rle_sum_mismatch_is_mask_error():
    with pytest.raises(MaskError):
        decode_rle([1, 2], 2, 3)
    with pytest.raises(MaskError):
        decode_rle([7, -1], 2, 3)


# ---------- annotations and detections ----------
def test_annotation_json_round_trip(two_person_scene):
    text = write_annotations(two_person_scene)
    assert read_annotations(text) == two_person_scene
    assert write_annotations(read_annotations(text)) == text


def test_annotation_keypoint_count_mismatch(two_person_scene):
    text = write_annotations(two_person_scene).replace('"keypoints": [[15.0, 25.0, 2],', '"keypoints": [', 1)
    with pytest.raises(SchemaError):
        read_annotations(text)


def test_annotation_garbage_is_schema_error():
    with pytest.raises(SchemaError):
        read_annotations("{not json")
    with pytest.raises(SchemaError):
        read_annotations('{"width": 4}')


@pytest.mark.parametrize(
    "doc, error",
    [
        ('{"width": 4, "height": 4, "persons": 5}', SchemaError),
        ('{"width": 4, "height": 4, "persons": [5]}', SchemaError),
        ('{"width": 4, "height": 4, "persons": [{"instance_id": 1, "keypoints": 5, "mask_rle": [16]}]}', SchemaError),
        ('[1, 2]', SchemaError),
    ],
)
def test_malformed_annotation_documents(doc, error):
    with pytest.raises(error):
        read_annotations(doc)


def test_mask_rle_that_is_not_a_run_list(two_person_scene):
    text = write_annotations(two_person_scene)
    start = text.index('"mask_rle": [')
    end = text.index("]", start)
    with pytest.raises(MaskError):
        read_annotations(text[:start] + '"mask_rle": "abc"' + text[end + 1:])


def test_detections_without_canvas_take_the_scene_canvas():
    text = '{"instances": [{"score": 0.5, "anchor": [1, 1], "keypoints": [], "mask_rle": [3, 2, 7]}]}'
    height, width, instances = read_detections(text, canvas=(3, 4))
    assert (height, width) == (3, 4)
    assert instances[0].mask.sum() == 2
    with pytest.raises(SchemaError):
        read_detections(text)
    with pytest.raises(SchemaError):
        read_detections('{"width": 2, "height": 2, "instances": {}}')


def test_detections_round_trip(tmp_path):
    mask = np.zeros((5, 6), dtype=bool)
    mask[1:3, 2:5] = True
    keypoints = np.zeros((17, 3))
    keypoints[0] = (2.5, 1.5, 0.9)
    present = np.zeros(17, dtype=bool)
    present[0] = True
    inst = DecodedInstance(keypoints, present, mask, (3.0, 2.0), 0.9, anchor_slot=0)
    path = tmp_path / "det.json"
    save_detections([inst], 5, 6, path)
    height, width, back = load_detections(path)
    assert (height, width) == (5, 6)
    assert len(back) == 1 and back[0].same_as(inst)
    assert back[0].anchor_slot == 0


def test_empty_detections():
    height, width, instances = read_detections(write_detections([], 4, 7))
    assert (height, width, instances) == (4, 7, [])


def test_encoded_fields_directory_round_trip(tmp_path, two_person_scene):
    fields = encode_scene(two_person_scene)
    write_encoded(fields, tmp_path / "f")
    back = read_encoded(tmp_path / "f")
    assert back.heatmaps == fields.heatmaps
    assert back.keycentroid == fields.keycentroid
    assert back.maskcentroid == fields.maskcentroid


def test_stack_concatenates_channels():
    a = FieldGrid.zeros(2, 3, ["a"])
    b = FieldGrid(("b", "c"), np.ones((2, 2, 3)))
    stacked = FieldGrid.stack([a, b])
    assert stacked.channels == ("a", "b", "c")
    assert stacked.channel("c").sum() == 6.0
    with pytest.raises(SchemaError):
        FieldGrid.stack([a, FieldGrid.zeros(3, 3, ["d"])])
    with pytest.raises(SchemaError):
        FieldGrid.stack([a, a])
