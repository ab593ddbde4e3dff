"""Domain types shared by the encoder, decoder, losses and metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvariantError, SchemaError

COCO_KEYPOINTS: tuple[str, ...] = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

# Published COCO per-keypoint sigmas doubled, as used by the OKS kernel.
COCO_OKS_FALLOFF: tuple[float, ...] = (
    0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144,
    0.124, 0.124, 0.214, 0.214, 0.174, 0.174, 0.178, 0.178,
)

COCO_LIMBS: tuple[tuple[str, str], ...] = (
    ("left_ankle", "left_knee"),
    ("left_knee", "left_hip"),
    ("right_ankle", "right_knee"),
    ("right_knee", "right_hip"),
    ("left_hip", "right_hip"),
    ("left_shoulder", "left_hip"),
    ("right_shoulder", "right_hip"),
    ("left_shoulder", "right_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("right_shoulder", "right_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_elbow", "right_wrist"),
    ("left_eye", "right_eye"),
    ("nose", "left_eye"),
    ("nose", "right_eye"),
    ("left_eye", "left_ear"),
    ("right_eye", "right_ear"),
)

_ANCHOR_HEAD = ("left_hip", "right_hip", "left_shoulder", "right_shoulder", "nose")

_FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


# --------------------------------------------------------------------------
# Field grids
# --------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FieldGrid:
    """Named-channel float planes shaped (channels, height, width).

    float32 is the stored precision; float64 grids are accepted as working
    precision and are narrowed when written.
    """

    channels: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        channels = tuple(str(name) for name in self.channels)
        data = np.asarray(self.data)
        if data.dtype not in _FLOAT_TYPES:
            data = data.astype(np.float32)
        if data.ndim != 3:
            raise InvariantError(f"grid data must be 3-D (C, H, W), got shape {data.shape}")
        if data.shape[0] != len(channels):
            raise SchemaError(
                f"grid has {data.shape[0]} planes but {len(channels)} channel names"
            )
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise InvariantError(f"grid dimensions must be positive, got {data.shape[1:]}")
        if any(not name for name in channels):
            raise SchemaError("channel names must be non-empty")
        if len(set(channels)) != len(channels):
            dupes = sorted({name for name in channels if channels.count(name) > 1})
            raise SchemaError(f"duplicate channel names: {dupes}")
        if not np.isfinite(data).all():
            raise InvariantError("grid contains NaN or Inf values")
        data = np.array(data, copy=True, order="C")
        data.setflags(write=False)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError as exc:
            raise SchemaError(f"grid has no channel named {name!r}") from exc

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.index(name)]

    def select(self, names: Sequence[str]) -> "FieldGrid":
        picks = [self.index(name) for name in names]
        return FieldGrid(tuple(names), self.data[picks])

    def with_data(self, data: np.ndarray) -> "FieldGrid":
        return FieldGrid(self.channels, data)

    @classmethod
    def zeros(cls, height: int, width: int, channels: Iterable[str]) -> "FieldGrid":
        names = tuple(channels)
        return cls(names, np.zeros((len(names), height, width), dtype=np.float32))

    @classmethod
    def stack(cls, grids: Sequence["FieldGrid"]) -> "FieldGrid":
        """Concatenate channels of same-sized grids in order."""
        if not grids:
            raise SchemaError("nothing to stack")
        shapes = {grid.shape for grid in grids}
        if len(shapes) != 1:
            raise SchemaError(f"cannot stack grids of different sizes: {sorted(shapes)}")
        names = tuple(name for grid in grids for name in grid.channels)
        return cls(names, np.concatenate([grid.data for grid in grids], axis=0))

    def __eq__(self, other: object) -> bool:
        """Bit-exact comparison of names, shape and float32 payload."""
        if not isinstance(other, FieldGrid):
            return NotImplemented
        if self.channels != other.channels or self.data.shape != other.data.shape:
            return False
        left = self.data.astype(np.float32).view(np.uint32)
        right = other.data.astype(np.float32).view(np.uint32)
        return bool(np.array_equal(left, right))

    __hash__ = None  # type: ignore[assignment]


# --------------------------------------------------------------------------
# Skeleton
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class SkeletonSpec:
    """Ordered keypoint slots with their OKS falloff and anchor priority."""

    keypoint_names: tuple[str, ...]
    oks_falloff: tuple[float, ...]
    anchor_priority: tuple[int, ...]
    limbs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if len(self.keypoint_names) != len(self.oks_falloff):
            raise SchemaError(
                f"{len(self.keypoint_names)} keypoint names but "
                f"{len(self.oks_falloff)} falloff constants"
            )
        if len(set(self.anchor_priority)) != len(self.anchor_priority):
            raise SchemaError("anchor_priority repeats a keypoint index")
        size = len(self.keypoint_names)
        bad = [i for i in self.anchor_priority if not 0 <= i < size]
        if bad:
            raise SchemaError(f"anchor_priority indices out of range: {bad}")
        if any(k <= 0 for k in self.oks_falloff):
            raise SchemaError("oks_falloff constants must be positive")

    @property
    def size(self) -> int:
        return len(self.keypoint_names)

    def index(self, name: str) -> int:
        return self.keypoint_names.index(name)

    @classmethod
    def coco(cls) -> "SkeletonSpec":
        names = COCO_KEYPOINTS
        head = [names.index(name) for name in _ANCHOR_HEAD]
        rest = [i for i in range(len(names)) if i not in head]
        limbs = tuple((names.index(a), names.index(b)) for a, b in COCO_LIMBS)
        return cls(names, COCO_OKS_FALLOFF, tuple(head + rest), limbs)


# --------------------------------------------------------------------------
# Annotations
# --------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class PersonAnnotation:
    """Ground truth for one person: keypoint rows (x, y, v) and a bitmap."""

    keypoints: np.ndarray
    mask: np.ndarray
    instance_id: int

    def __post_init__(self) -> None:
        keypoints = np.array(self.keypoints, dtype=np.float64, copy=True)
        if keypoints.ndim != 2 or keypoints.shape[1] != 3:
            raise SchemaError(f"keypoints must be rows of (x, y, v), got shape {keypoints.shape}")
        if not np.isfinite(keypoints).all():
            raise InvariantError("keypoints contain NaN or Inf")
        vis = keypoints[:, 2]
        if not np.isin(vis, (0, 1, 2)).all():
            raise SchemaError("keypoint visibility must be 0, 1 or 2")
        mask = np.array(self.mask, dtype=bool, copy=True)
        if mask.ndim != 2:
            raise SchemaError(f"mask must be 2-D, got shape {mask.shape}")
        if (vis > 0).any() and not mask.any():
            raise SchemaError(f"person {self.instance_id} has labelled keypoints but an empty mask")
        keypoints.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "keypoints", keypoints)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "instance_id", int(self.instance_id))

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def visibility(self) -> np.ndarray:
        return self.keypoints[:, 2].astype(np.int64)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PersonAnnotation):
            return NotImplemented
        return (
            self.instance_id == other.instance_id
            and np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.mask, other.mask)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class SceneAnnotation:
    """A canvas and the persons annotated on it."""

    width: int
    height: int
    persons: tuple[PersonAnnotation, ...] = ()

    def __post_init__(self) -> None:
        persons = tuple(self.persons)
        if self.width < 1 or self.height < 1:
            raise InvariantError(f"canvas must be positive, got {self.width}x{self.height}")
        for person in persons:
            if person.mask.shape != (self.height, self.width):
                raise SchemaError(
                    f"person {person.instance_id} mask is {person.mask.shape}, "
                    f"canvas is {(self.height, self.width)}"
                )
            labelled = person.keypoints[person.keypoints[:, 2] > 0]
            inside = (
                (labelled[:, 0] >= 0)
                & (labelled[:, 0] <= self.width - 1)
                & (labelled[:, 1] >= 0)
                & (labelled[:, 1] <= self.height - 1)
            )
            if not inside.all():
                raise SchemaError(f"person {person.instance_id} has labelled keypoints off the canvas")
        ids = [p.instance_id for p in persons]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate instance ids: {ids}")
        if any(i < 1 for i in ids):
            raise SchemaError("instance ids must be >= 1")
        object.__setattr__(self, "persons", persons)

    def validate(self, skeleton: SkeletonSpec) -> "SceneAnnotation":
        for person in self.persons:
            if person.keypoints.shape[0] != skeleton.size:
                raise SchemaError(
                    f"person {person.instance_id} has {person.keypoints.shape[0]} keypoints, "
                    f"skeleton has {skeleton.size}"
                )
        return self

    def label_map(self) -> np.ndarray:
        """Instance id per pixel; overlaps go to the lower instance id."""
        labels = np.zeros((self.height, self.width), dtype=np.int64)
        for person in sorted(self.persons, key=lambda p: p.instance_id, reverse=True):
            labels[person.mask] = person.instance_id
        return labels

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneAnnotation):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and len(self.persons) == len(other.persons)
            and all(a == b for a, b in zip(self.persons, other.persons))
        )

    __hash__ = None  # type: ignore[assignment]


# --------------------------------------------------------------------------
# Encoder and decoder products
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class EncodedFields:
    heatmaps: FieldGrid
    keycentroid: FieldGrid
    maskcentroid: FieldGrid
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class KeypointCandidate:
    slot: int
    x: float
    y: float
    score: float
    mass: float = 0.0


@dataclass(frozen=True)
class Anchor:
    x: float
    y: float
    score: float
    slot: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Cluster:
    mask: np.ndarray
    anchor: tuple[float, float]
    score: float
    anchor_slot: Optional[int] = None


@dataclass(frozen=True, eq=False)
class DecodedInstance:
    """One recovered person.

    ``keypoints`` rows are (x, y, score); absent slots hold zeros and are
    flagged False in ``present``.
    """

    keypoints: np.ndarray
    present: np.ndarray
    mask: np.ndarray
    anchor: tuple[float, float]
    score: float
    anchor_slot: Optional[int] = None

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def same_as(self, other: "DecodedInstance") -> bool:
        return (
            np.array_equal(self.keypoints, other.keypoints)
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.mask, other.mask)
            and self.anchor == other.anchor
            and self.score == other.score
        )
