"""Readers and writers for field files, annotations and detections."""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    FieldFormatError,
    FieldLengthError,
    FieldWriteError,
    InvariantError,
    MaskError,
    SchemaError,
)
from .models import (
    DecodedInstance,
    EncodedFields,
    FieldGrid,
    PersonAnnotation,
    SceneAnnotation,
    SkeletonSpec,
)

LOGGER = logging.getLogger(__name__)

MAGIC = b"VCF1"
_HEADER = struct.Struct("<4sIII")
_NAME_LEN = struct.Struct("<H")
_CHUNK = 1 << 20

FIELD_FILES = {
    "heatmaps": "heatmaps.vcf",
    "keycentroid": "keycentroid.vcf",
    "maskcentroid": "maskcentroid.vcf",
}


# ---------- VCF1 ----------
def field_grid_bytes(grid: FieldGrid) -> list[bytes]:
    """Header, names and little-endian float32 payload of ``grid`` as byte chunks.

    Raises InvariantError when a value only fits the source dtype, so a
    written file always reads back.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        payload = np.ascontiguousarray(grid.data, dtype="<f4")
    if not np.isfinite(payload).all():
        raise InvariantError("grid values overflow float32")
    parts = [_HEADER.pack(MAGIC, grid.height, grid.width, len(grid.channels))]
    for name in grid.channels:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise SchemaError(f"channel name too long for the header: {name[:32]}...")
        parts.append(_NAME_LEN.pack(len(raw)) + raw)
    parts.append(payload.tobytes())
    return parts


def write_field_grid(grid: FieldGrid, destination: BinaryIO) -> int:
    """Write ``grid`` as VCF1 and return the number of bytes emitted."""
    written = 0
    for part in field_grid_bytes(grid):
        view = memoryview(part)
        for start in range(0, len(view), _CHUNK):
            chunk = view[start:start + _CHUNK]
            try:
                count = destination.write(chunk)
            except OSError as exc:
                raise FieldWriteError(f"field write failed: {exc}", written) from exc
            count = len(chunk) if count is None else count
            written += count
            if count != len(chunk):
                raise FieldWriteError("field sink accepted a short write", written)
    return written


def read_field_grid(source: BinaryIO) -> FieldGrid:
    magic = source.read(4)
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    header = magic + _read_exact(source, _HEADER.size - 4, "header")
    _, height, width, count = _HEADER.unpack(header)
    names = []
    for index in range(count):
        (length,) = _NAME_LEN.unpack(_read_exact(source, _NAME_LEN.size, f"name length {index}"))
        raw = _read_exact(source, length, f"channel name {index}")
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FieldFormatError(f"channel name {index} is not UTF-8") from exc
    expected = height * width * count * 4
    payload = _read_exact(source, expected, "payload")
    if source.read(1):
        raise FieldLengthError(f"trailing bytes after a {height}x{width}x{count} payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(count, height, width)
    return FieldGrid(tuple(names), data)


def save_field_grid(grid: FieldGrid, path: str | Path) -> int:
    with open(path, "wb") as handle:
        return write_field_grid(grid, handle)


def load_field_grid(path: str | Path) -> FieldGrid:
    with open(path, "rb") as handle:
        return read_field_grid(handle)


def _read_exact(source: BinaryIO, size: int, what: str) -> bytes:
    data = source.read(size)
    if len(data) != size:
        raise FieldLengthError(f"truncated {what}: expected {size} bytes, found {len(data)}")
    return data


def write_encoded(fields: EncodedFields, directory: str | Path) -> dict[str, Path]:
    """Write the three VCF1 files into ``directory``; returns their paths by field."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, filename in FIELD_FILES.items():
        path = out / filename
        save_field_grid(getattr(fields, key), path)
        paths[key] = path
    LOGGER.debug("wrote field files to %s", out)
    return paths


def read_encoded(directory: str | Path) -> EncodedFields:
    """Load the three VCF1 files written by ``write_encoded``."""
    base = Path(directory)
    grids = {key: load_field_grid(base / filename) for key, filename in FIELD_FILES.items()}
    return EncodedFields(**grids)


# ---------- run-length masks ----------
def encode_rle(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, first run counting zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_rle(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    """Inverse of ``encode_rle``; the runs must cover the canvas exactly."""
    try:
        runs = np.asarray(counts, dtype=np.int64)
    except (TypeError, ValueError) as exc:
        raise MaskError(f"mask_rle is not a list of run lengths: {exc}") from exc
    if runs.ndim != 1:
        raise MaskError("mask_rle must be a flat list of run lengths")
    if (runs < 0).any():
        raise MaskError("mask_rle holds a negative run length")
    total = int(runs.sum())
    if total != height * width:
        raise MaskError(f"mask_rle covers {total} pixels, canvas has {height * width}")
    values = np.arange(runs.size) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


# ---------- annotations ----------
def scene_to_dict(scene: SceneAnnotation) -> dict[str, Any]:
    return {
        "width": scene.width,
        "height": scene.height,
        "persons": [
            {
                "instance_id": person.instance_id,
                "keypoints": [[float(x), float(y), int(v)] for x, y, v in person.keypoints],
                "mask_rle": encode_rle(person.mask),
            }
            for person in scene.persons
        ],
    }


def write_annotations(scene: SceneAnnotation) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True)


def read_annotations(source: str | bytes, skeleton: Optional[SkeletonSpec] = None) -> SceneAnnotation:
    """Parse annotation JSON; every malformed document raises SchemaError or MaskError."""
    skeleton = skeleton or SkeletonSpec.coco()
    doc = _parse_json(source, "annotation")
    try:
        width = int(doc["width"])
        height = int(doc["height"])
        raw_persons = doc["persons"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"annotation JSON lacks width/height/persons: {exc}") from exc
    if not isinstance(raw_persons, list):
        raise SchemaError(f"annotation persons must be a list, got {type(raw_persons).__name__}")
    persons = []
    for index, raw in enumerate(raw_persons):
        try:
            keypoints = np.asarray(raw["keypoints"], dtype=np.float64)
            counts = raw["mask_rle"]
            instance_id = int(raw["instance_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"person {index} is malformed: {exc}") from exc
        if keypoints.ndim != 2 or keypoints.shape[0] != skeleton.size:
            raise SchemaError(
                f"person {instance_id} keypoints have shape {keypoints.shape}, skeleton has {skeleton.size}"
            )
        mask = decode_rle(counts, height, width)
        persons.append(PersonAnnotation(keypoints, mask, instance_id))
    return SceneAnnotation(width, height, tuple(persons)).validate(skeleton)


def save_annotations(scene: SceneAnnotation, path: str | Path) -> None:
    Path(path).write_text(write_annotations(scene), encoding="utf-8")


def load_annotations(path: str | Path, skeleton: Optional[SkeletonSpec] = None) -> SceneAnnotation:
    return read_annotations(Path(path).read_text(encoding="utf-8"), skeleton)


# ---------- detections ----------
def write_detections(instances: Iterable[DecodedInstance], height: int, width: int) -> str:
    """Detections JSON; absent keypoints are written as zeros."""
    rows = []
    for inst in instances:
        keypoints = [
            [float(x), float(y), float(s)] if present else [0.0, 0.0, 0.0]
            for (x, y, s), present in zip(inst.keypoints, inst.present)
        ]
        row = {
            "score": float(inst.score),
            "anchor": [float(inst.anchor[0]), float(inst.anchor[1])],
            "keypoints": keypoints,
            "mask_rle": encode_rle(inst.mask),
        }
        if inst.anchor_slot is not None:
            row["anchor_slot"] = int(inst.anchor_slot)
        rows.append(row)
    return json.dumps({"width": width, "height": height, "instances": rows}, sort_keys=True)


def read_detections(
    source: str | bytes, canvas: Optional[tuple[int, int]] = None
) -> tuple[int, int, list[DecodedInstance]]:
    """Parse detections JSON into ``(height, width, instances)``.

    ``width``/``height`` are optional in the document; when absent the
    ``(height, width)`` passed as ``canvas`` sizes the masks.
    """
    doc = _parse_json(source, "detections")
    try:
        raw_instances = doc["instances"]
        if "height" in doc or "width" in doc or canvas is None:
            height, width = int(doc["height"]), int(doc["width"])
        else:
            height, width = canvas
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"detections JSON lacks width/height/instances: {exc}") from exc
    if not isinstance(raw_instances, list):
        raise SchemaError(f"detections instances must be a list, got {type(raw_instances).__name__}")
    instances = []
    for index, raw in enumerate(raw_instances):
        try:
            keypoints = np.asarray(raw["keypoints"], dtype=np.float64).reshape(-1, 3)
            anchor = (float(raw["anchor"][0]), float(raw["anchor"][1]))
            score = float(raw["score"])
            counts = raw["mask_rle"]
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise SchemaError(f"detection {index} is malformed: {exc}") from exc
        instances.append(
            DecodedInstance(
                keypoints=keypoints,
                present=keypoints[:, 2] > 0,
                mask=decode_rle(counts, height, width),
                anchor=anchor,
                score=score,
                anchor_slot=raw.get("anchor_slot"),
            )
        )
    return height, width, instances


def save_detections(instances: Iterable[DecodedInstance], height: int, width: int, path: str | Path) -> None:
    Path(path).write_text(write_detections(instances, height, width), encoding="utf-8")


def load_detections(
    path: str | Path, canvas: Optional[tuple[int, int]] = None
) -> tuple[int, int, list[DecodedInstance]]:
    return read_detections(Path(path).read_text(encoding="utf-8"), canvas)


def _parse_json(source: str | bytes, what: str) -> Any:
    try:
        return json.loads(source)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{what} is not valid JSON: {exc}") from exc
