"""Ground-truth field encoding: disk heatmaps, KeyCentroid and MaskCentroid."""
from __future__ import annotations

import logging
import math
from typing import Optional

import numpy as np

from .config import EncodeConfig
from .errors import AnchorUnavailableError
from .models import EncodedFields, FieldGrid, PersonAnnotation, SceneAnnotation, SkeletonSpec

LOGGER = logging.getLogger(__name__)

MC_OFF_X = "mc/off_x"
MC_OFF_Y = "mc/off_y"
MC_SEED = "mc/seed"
MC_SIGMA = "mc/sigma"
MC_IID = "mc/iid"
MASKCENTROID_CHANNELS = (MC_OFF_X, MC_OFF_Y, MC_SEED, MC_SIGMA, MC_IID)


def heatmap_channels(skeleton: SkeletonSpec) -> tuple[str, ...]:
    return tuple(f"hm/{name}" for name in skeleton.keypoint_names)


def keycentroid_channels(skeleton: SkeletonSpec) -> tuple[str, ...]:
    """Channel names ``kc/<name>/dx`` and ``kc/<name>/dy`` per slot."""
    names = []
    for name in skeleton.keypoint_names:
        names.extend((f"kc/{name}/dx", f"kc/{name}/dy"))
    return tuple(names)


def weight_channels(skeleton: SkeletonSpec) -> tuple[str, ...]:
    return tuple(f"kw/{name}" for name in skeleton.keypoint_names)


def instance_sigma(pixel_count: int, disk_radius: float) -> float:
    """Half the equivalent-circle radius, floored at R/2."""
    return max(disk_radius / 2.0, 0.5 * math.sqrt(pixel_count / math.pi))


def lattice_point(x: float, y: float, height: int, width: int) -> tuple[int, int]:
    """Nearest pixel (row, col) to (x, y), halves rounding up, clamped to the canvas."""
    col = min(max(int(math.floor(x + 0.5)), 0), width - 1)
    row = min(max(int(math.floor(y + 0.5)), 0), height - 1)
    return row, col


# ---------- disk ownership ----------
def slot_ownership(
    scene: SceneAnnotation, slot: int, radius: float
) -> tuple[np.ndarray, np.ndarray, list[PersonAnnotation]]:
    """Which labelled keypoint of ``slot`` owns each pixel.

    Returns an owner index plane (-1 outside every disk), the squared
    distance to the owner and the persons indexed by the owner plane. The
    nearest keypoint wins; ties go to the lower instance id.
    """
    height, width = scene.height, scene.width
    owner = np.full((height, width), -1, dtype=np.int64)
    best = np.full((height, width), np.inf)
    persons = sorted(
        (p for p in scene.persons if p.keypoints[slot, 2] > 0), key=lambda p: p.instance_id
    )
    r2 = radius * radius
    for index, person in enumerate(persons):
        qx, qy = person.keypoints[slot, 0], person.keypoints[slot, 1]
        x0, x1 = max(0, math.floor(qx - radius)), min(width - 1, math.ceil(qx + radius))
        y0, y1 = max(0, math.floor(qy - radius)), min(height - 1, math.ceil(qy + radius))
        if x0 > x1 or y0 > y1:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        d2 = (xs - qx) ** 2 + (ys - qy) ** 2
        window = best[y0:y1 + 1, x0:x1 + 1]
        take = (d2 <= r2) & (d2 < window)
        window[take] = d2[take]
        owner[y0:y1 + 1, x0:x1 + 1][take] = index
    return owner, best, persons


# ---------- heatmaps and KeyCentroid ----------
def encode_heatmaps(scene: SceneAnnotation, skeleton: SkeletonSpec, cfg: EncodeConfig) -> FieldGrid:
    """One binary disk plane per slot: 1 within R of a labelled keypoint, else 0."""
    scene.validate(skeleton)
    data = np.zeros((skeleton.size, scene.height, scene.width), dtype=np.float32)
    for slot in range(skeleton.size):
        owner, _, _ = slot_ownership(scene, slot, cfg.disk_radius)
        data[slot] = owner >= 0
    return FieldGrid(heatmap_channels(skeleton), data)


def encode_keycentroid(scene: SceneAnnotation, skeleton: SkeletonSpec, cfg: EncodeConfig) -> FieldGrid:
    """Per-slot (dx, dy) from each disk pixel to the keypoint that owns it, divided by R when normalising."""
    scene.validate(skeleton)
    data = np.zeros((2 * skeleton.size, scene.height, scene.width), dtype=np.float32)
    ys, xs = np.mgrid[0:scene.height, 0:scene.width]
    scale = cfg.offset_scale
    for slot in range(skeleton.size):
        owner, _, persons = slot_ownership(scene, slot, cfg.disk_radius)
        if not persons:
            continue
        inside = owner >= 0
        targets = np.array([p.keypoints[slot, :2] for p in persons])
        picked = targets[owner[inside]]
        data[2 * slot][inside] = (picked[:, 0] - xs[inside]) / scale
        data[2 * slot + 1][inside] = (picked[:, 1] - ys[inside]) / scale
    return FieldGrid(keycentroid_channels(skeleton), data)


def _gaussian_denominator(cfg: EncodeConfig) -> float:
    radius = cfg.disk_radius
    return radius * radius if cfg.gaussian_denominator_mode == "R_squared" else radius


def gaussian_response(
    keypoint: tuple[float, float], canvas: tuple[int, int], cfg: EncodeConfig
) -> FieldGrid:
    """Single-channel exp(-d^2 / D) around ``keypoint`` on an (H, W) canvas."""
    height, width = canvas
    ys, xs = np.mgrid[0:height, 0:width]
    d2 = (xs - keypoint[0]) ** 2 + (ys - keypoint[1]) ** 2
    return FieldGrid(("gaussian",), np.exp(-d2 / _gaussian_denominator(cfg))[None])


def keycentroid_weights(scene: SceneAnnotation, skeleton: SkeletonSpec, cfg: EncodeConfig) -> FieldGrid:
    """Per-slot Gaussian response of the owning keypoint, zero off the disks."""
    scene.validate(skeleton)
    data = np.zeros((skeleton.size, scene.height, scene.width), dtype=np.float64)
    denominator = _gaussian_denominator(cfg)
    for slot in range(skeleton.size):
        owner, d2, _ = slot_ownership(scene, slot, cfg.disk_radius)
        inside = owner >= 0
        data[slot][inside] = np.exp(-d2[inside] / denominator)
    return FieldGrid(weight_channels(skeleton), data)


# ---------- MaskCentroid ----------
def select_anchor_keypoint(person: PersonAnnotation, skeleton: SkeletonSpec) -> int:
    """First anchor-priority slot with v=2, else the first with v=1."""
    vis = person.visibility
    for wanted in (2, 1):
        for index in skeleton.anchor_priority:
            if vis[index] == wanted:
                return index
    raise AnchorUnavailableError(f"person {person.instance_id} has no labelled anchor keypoint")


def instance_centre(
    person: PersonAnnotation,
    pixels: np.ndarray,
    skeleton: SkeletonSpec,
    mode: str,
) -> tuple[tuple[float, float], Optional[str]]:
    """Centre C_k for a person and a warning when the anchor falls back."""
    rows, cols = np.nonzero(pixels)
    static = (float(cols.mean()), float(rows.mean()))
    if mode == "static":
        return static, None
    try:
        slot = select_anchor_keypoint(person, skeleton)
    except AnchorUnavailableError as exc:
        return static, f"{exc}; using the mask centroid"
    x, y = person.keypoints[slot, :2]
    return (float(x), float(y)), None


def encode_maskcentroid(
    scene: SceneAnnotation, skeleton: SkeletonSpec, cfg: EncodeConfig
) -> tuple[FieldGrid, list[str]]:
    """MaskCentroid planes (off_x, off_y, seed, sigma, iid) and any anchor-fallback warnings.

    Offsets are in pixels and point from each person pixel to its centre:
    the mask centroid in static mode, the anchor keypoint in dynamic mode.
    """
    scene.validate(skeleton)
    height, width = scene.height, scene.width
    data = np.zeros((len(MASKCENTROID_CHANNELS), height, width), dtype=np.float32)
    ys, xs = np.mgrid[0:height, 0:width]
    labels = scene.label_map()
    warnings: list[str] = []
    for person in sorted(scene.persons, key=lambda p: p.instance_id):
        pixels = labels == person.instance_id
        count = int(pixels.sum())
        if count == 0:
            warnings.append(f"person {person.instance_id} is fully covered by lower ids; not encoded")
            continue
        (cx, cy), note = instance_centre(person, pixels, skeleton, cfg.centroid_mode)
        if note:
            warnings.append(note)
        data[0][pixels] = cx - xs[pixels]
        data[1][pixels] = cy - ys[pixels]
        row, col = lattice_point(cx, cy, height, width)
        data[2][row, col] = 1.0
        data[3][pixels] = instance_sigma(count, cfg.disk_radius)
        data[4][pixels] = person.instance_id
    for note in warnings:
        LOGGER.warning(note)
    return FieldGrid(MASKCENTROID_CHANNELS, data), warnings


def encode_scene(
    scene: SceneAnnotation,
    skeleton: Optional[SkeletonSpec] = None,
    cfg: Optional[EncodeConfig] = None,
) -> EncodedFields:
    """All three field stacks for ``scene``."""
    skeleton = skeleton or SkeletonSpec.coco()
    cfg = (cfg or EncodeConfig()).resolved()
    maskcentroid, warnings = encode_maskcentroid(scene, skeleton, cfg)
    return EncodedFields(
        heatmaps=encode_heatmaps(scene, skeleton, cfg),
        keycentroid=encode_keycentroid(scene, skeleton, cfg),
        maskcentroid=maskcentroid,
        warnings=tuple(warnings),
    )
