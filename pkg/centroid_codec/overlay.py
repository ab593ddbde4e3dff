"""Mask and pose overlay images for eyeballing scenes and detections."""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.image as mpimg  # noqa: E402
import numpy as np  # noqa: E402

from .encoder import select_anchor_keypoint  # noqa: E402
from .errors import AnchorUnavailableError, SchemaError  # noqa: E402
from .models import DecodedInstance, SceneAnnotation, SkeletonSpec  # noqa: E402

LOGGER = logging.getLogger(__name__)

PALETTE = np.round(np.array(matplotlib.colormaps["tab10"].colors) * 255).astype(np.uint8)
WHITE = np.array([255, 255, 255], dtype=np.uint8)

Drawable = Union[SceneAnnotation, Sequence[DecodedInstance]]


def _layers(source: Drawable, skeleton: SkeletonSpec):
    """(mask, xy, shown, anchor) per instance in drawing order."""
    if isinstance(source, SceneAnnotation):
        for person in source.persons:
            try:
                slot = select_anchor_keypoint(person, skeleton)
                anchor = tuple(person.keypoints[slot, :2])
            except AnchorUnavailableError:
                anchor = None
            yield person.mask, person.keypoints[:, :2], person.keypoints[:, 2] > 0, anchor
    else:
        for inst in source:
            yield inst.mask, inst.keypoints[:, :2], inst.present, inst.anchor


def _put(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, colour: np.ndarray) -> None:
    height, width = image.shape[:2]
    ok = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    image[rows[ok], cols[ok]] = colour


def _line(image: np.ndarray, a: np.ndarray, b: np.ndarray, colour: np.ndarray) -> None:
    steps = int(math.ceil(float(np.hypot(*(b - a))))) + 1
    t = np.linspace(0.0, 1.0, steps)
    xs = np.floor(a[0] + t * (b[0] - a[0]) + 0.5).astype(np.int64)
    ys = np.floor(a[1] + t * (b[1] - a[1]) + 0.5).astype(np.int64)
    _put(image, ys, xs, colour)


def _dot(image: np.ndarray, centre: np.ndarray, colour: np.ndarray, radius: int = 2) -> None:
    dr, dc = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = dr * dr + dc * dc <= radius * radius
    cx, cy = (int(math.floor(v + 0.5)) for v in centre)
    _put(image, cy + dr[disk], cx + dc[disk], colour)


def _cross(image: np.ndarray, centre: Sequence[float], arm: int = 3) -> None:
    cx, cy = (int(math.floor(v + 0.5)) for v in centre)
    offsets = np.arange(-arm, arm + 1)
    _put(image, np.full(offsets.size, cy), cx + offsets, WHITE)
    _put(image, cy + offsets, np.full(offsets.size, cx), WHITE)


def overlay_image(
    source: Drawable, canvas: tuple[int, int], skeleton: Optional[SkeletonSpec] = None
) -> np.ndarray:
    """(H, W, 3) uint8 raster on a black background."""
    skeleton = skeleton or SkeletonSpec.coco()
    height, width = canvas
    image = np.zeros((height, width, 3), dtype=np.uint8)
    layers = list(_layers(source, skeleton))
    for index, (mask, _, _, _) in enumerate(layers):
        if mask.shape != (height, width):
            raise SchemaError(f"instance {index} mask is {mask.shape}, canvas is {(height, width)}")
        image[mask] = PALETTE[index % len(PALETTE)] // 2
    for index, (_, xy, shown, anchor) in enumerate(layers):
        colour = PALETTE[index % len(PALETTE)]
        for a, b in skeleton.limbs:
            if shown[a] and shown[b]:
                _line(image, xy[a], xy[b], colour)
        for slot in np.flatnonzero(shown):
            _dot(image, xy[slot], colour)
        if anchor is not None:
            _cross(image, anchor)
    return image


def render_overlay(
    source: Drawable,
    canvas: tuple[int, int],
    path: str | Path,
    skeleton: Optional[SkeletonSpec] = None,
) -> Path:
    """Write ``overlay_image`` as a PNG whose bytes depend only on the pixels."""
    image = overlay_image(source, canvas, skeleton)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software chunk, so the bytes only depend on the pixels
    mpimg.imsave(path, image, format="png", metadata={"Software": None})
    LOGGER.info("wrote overlay %s", path)
    return path
