"""Deterministic synthetic multi-person scenes for exercising the codec.

Figures are capsule-rasterised stick people built from a hip-centred
17-joint template. Every random draw comes from a Philox generator keyed by
(seed, scene, attempt, person) so figures can be sampled in any order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from matplotlib.path import Path
from scipy import ndimage

from .config import DEFAULT_CANVAS, DecodeConfig, EncodeConfig, SynthConfig
from .decoder import assign_slot, grouping_context, home_clusters, mask_distances
from .encoder import instance_sigma, lattice_point
from .errors import ConfigError, SynthError
from .models import COCO_KEYPOINTS, EncodedFields, PersonAnnotation, SceneAnnotation, SkeletonSpec

LOGGER = logging.getLogger(__name__)

MIN_MASK_PIXELS = 256
_KP = {name: i for i, name in enumerate(COCO_KEYPOINTS)}

# Upright pose, pixels at scale 1, hip centre at the origin, y down.
STANDING_POSE = {
    "nose": (0, -100),
    "left_eye": (4, -104),
    "right_eye": (-4, -104),
    "left_ear": (8, -101),
    "right_ear": (-8, -101),
    "left_shoulder": (16, -78),
    "right_shoulder": (-16, -78),
    "left_elbow": (22, -48),
    "right_elbow": (-22, -48),
    "left_wrist": (25, -20),
    "right_wrist": (-25, -20),
    "left_hip": (10, 0),
    "right_hip": (-10, 0),
    "left_knee": (12, 38),
    "right_knee": (-12, 38),
    "left_ankle": (13, 76),
    "right_ankle": (-13, 76),
}

# Arms and legs swung to one side; the mask centroid lands beside the torso.
REACH_POSE = {
    **STANDING_POSE,
    "left_elbow": (46, -82),
    "left_wrist": (74, -86),
    "right_elbow": (20, -50),
    "right_wrist": (50, -40),
    "left_knee": (42, 20),
    "left_ankle": (76, 30),
    "right_knee": (24, 40),
    "right_ankle": (58, 62),
}

TORSO = ("left_shoulder", "right_shoulder", "right_hip", "left_hip")
LIMBS = (
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
)
HEAD = ("nose", "left_eye", "right_eye", "left_ear", "right_ear")

# (pivot, joints rotated about it) applied in order
_ARTICULATION = (
    ("left_shoulder", ("left_elbow", "left_wrist")),
    ("left_elbow", ("left_wrist",)),
    ("right_shoulder", ("right_elbow", "right_wrist")),
    ("right_elbow", ("right_wrist",)),
    ("left_hip", ("left_knee", "left_ankle")),
    ("left_knee", ("left_ankle",)),
    ("right_hip", ("right_knee", "right_ankle")),
    ("right_knee", ("right_ankle",)),
    ("neck", HEAD),
)


@dataclass(frozen=True, eq=False)
class Figure:
    joints: np.ndarray  # (17, 2) canvas x, y
    limb_width: float
    head_radius: float

    def rasterize(self, height: int, width: int) -> np.ndarray:
        mask = np.zeros((height, width), dtype=bool)
        pad = max(self.head_radius, self.limb_width) + 2.0
        x0 = max(int(math.floor(self.joints[:, 0].min() - pad)), 0)
        x1 = min(int(math.ceil(self.joints[:, 0].max() + pad)), width - 1)
        y0 = max(int(math.floor(self.joints[:, 1].min() - pad)), 0)
        y1 = min(int(math.ceil(self.joints[:, 1].max() + pad)), height - 1)
        if x0 > x1 or y0 > y1:
            return mask
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        torso = Path(self.joints[[_KP[name] for name in TORSO]])
        local = torso.contains_points(np.column_stack((xs.ravel(), ys.ravel()))).reshape(xs.shape)
        w2 = self.limb_width ** 2
        for a, b in LIMBS:
            local |= _segment_d2(xs, ys, self.joints[_KP[a]], self.joints[_KP[b]]) <= w2
        neck = self.joints[[_KP["left_shoulder"], _KP["right_shoulder"]]].mean(axis=0)
        local |= _segment_d2(xs, ys, neck, self.joints[_KP["nose"]]) <= w2
        nose = self.joints[_KP["nose"]]
        local |= (xs - nose[0]) ** 2 + (ys - nose[1]) ** 2 <= self.head_radius ** 2
        mask[y0:y1 + 1, x0:x1 + 1] = local
        return mask

    def limb_point(self, limb: int, t: float) -> np.ndarray:
        a, b = LIMBS[limb]
        return self.joints[_KP[a]] + t * (self.joints[_KP[b]] - self.joints[_KP[a]])

    def shifted(self, dx: float, dy: float) -> "Figure":
        return Figure(self.joints + (dx, dy), self.limb_width, self.head_radius)


def _segment_d2(xs: np.ndarray, ys: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    length2 = max(float(ab @ ab), 1e-12)
    t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / length2, 0.0, 1.0)
    return (xs - a[0] - t * ab[0]) ** 2 + (ys - a[1] - t * ab[1]) ** 2


def _rotate(points: np.ndarray, pivot: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rel = points - pivot
    return pivot + rel @ np.array([[c, s], [-s, c]])


def person_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox stream keyed by the seed and a tuple of counters."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def sample_figure(
    rng: np.random.Generator,
    cfg: SynthConfig,
    pose: Optional[dict] = None,
    centre: Optional[tuple[float, float]] = None,
) -> Figure:
    """Articulate, scale, rotate and place one template figure."""
    pose = pose or STANDING_POSE
    ratio = min(cfg.width, cfg.height) / DEFAULT_CANVAS
    scale = rng.uniform(cfg.scale_min, cfg.scale_max) * ratio
    limb_width = rng.uniform(cfg.limb_width_min, cfg.limb_width_max)
    theta = rng.uniform(-cfg.rotation_max, cfg.rotation_max)
    jitter = rng.uniform(-cfg.limb_jitter, cfg.limb_jitter, size=len(_ARTICULATION))
    if centre is None:
        centre = (
            rng.uniform(0.1 * cfg.width, 0.9 * cfg.width),
            rng.uniform(0.25 * cfg.height, 0.8 * cfg.height),
        )
    joints = np.array([pose[name] for name in COCO_KEYPOINTS], dtype=np.float64)
    for (pivot, moved), angle in zip(_ARTICULATION, jitter):
        if pivot == "neck":
            anchor = joints[[_KP["left_shoulder"], _KP["right_shoulder"]]].mean(axis=0)
        else:
            anchor = joints[_KP[pivot]]
        picks = [_KP[name] for name in moved]
        joints[picks] = _rotate(joints[picks], anchor, angle)
    joints = _rotate(joints * scale, np.zeros(2), theta) + centre
    head_radius = max(2.0 * limb_width, 10.0 * scale)
    return Figure(joints, limb_width, head_radius)


# --------------------------------------------------------------------------
# Scene assembly and checks
# --------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class _Layout:
    figures: tuple[Figure, ...]
    amodal: tuple[np.ndarray, ...]
    visible: tuple[np.ndarray, ...]
    keypoints: tuple[np.ndarray, ...]  # (17, 3) rows of x, y, v

    def scene(self, width: int, height: int) -> SceneAnnotation:
        persons = tuple(
            PersonAnnotation(kps, vis, index + 1)
            for index, (kps, vis) in enumerate(zip(self.keypoints, self.visible))
        )
        return SceneAnnotation(width, height, persons)


def _compose(figures: Sequence[Figure], height: int, width: int) -> _Layout:
    """Later figures occlude earlier ones."""
    amodal = [fig.rasterize(height, width) for fig in figures]
    visible, keypoints = [], []
    cover = np.zeros((height, width), dtype=bool)
    for index in range(len(figures) - 1, -1, -1):
        visible.append(amodal[index] & ~cover)
        rows = np.zeros((len(COCO_KEYPOINTS), 3))
        for slot, (x, y) in enumerate(figures[index].joints):
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                continue
            r, c = lattice_point(x, y, height, width)
            rows[slot] = (x, y, 1 if cover[r, c] else 2)
        keypoints.append(rows)
        cover |= amodal[index]
    return _Layout(tuple(figures), tuple(amodal), tuple(visible[::-1]), tuple(keypoints[::-1]))


def _dynamic_anchor(keypoints: np.ndarray, skeleton: SkeletonSpec) -> Optional[int]:
    for wanted in (2, 1):
        for slot in skeleton.anchor_priority:
            if keypoints[slot, 2] == wanted:
                return slot
    return None


def _separation_problem(
    keypoints: Sequence[np.ndarray],
    pixel_counts: Sequence[int],
    cfg: SynthConfig,
    skeleton: SkeletonSpec,
) -> Optional[str]:
    """Pairwise keypoint spacing the decoder needs to tell persons apart."""
    margin = math.sqrt(2.0 * math.log(2.0))
    for i, kp_i in enumerate(keypoints):
        for j, kp_j in enumerate(keypoints):
            if i == j:
                continue
            both = (kp_i[:, 2] > 0) & (kp_j[:, 2] > 0)
            gaps = np.hypot(*(kp_i[both, :2] - kp_j[both, :2]).T)
            if i < j and (gaps < cfg.min_keypoint_separation).any():
                return f"same-slot keypoints of persons {i + 1} and {j + 1} too close"
            anchor = _dynamic_anchor(kp_j, skeleton)
            if anchor is None:
                return f"person {j + 1} has no anchor"
            limit = instance_sigma(pixel_counts[j], cfg.disk_radius) * margin + 2.0
            mine = [s for s in skeleton.anchor_priority if kp_i[s, 2] > 0]
            if mine and (np.hypot(*(kp_i[mine, :2] - kp_j[anchor, :2]).T) <= limit).any():
                return f"anchor of person {j + 1} is within reach of person {i + 1}"
    return None


def grouping_is_identifiable(
    keypoints: Sequence[np.ndarray], masks: Sequence[np.ndarray], cfg: DecodeConfig
) -> bool:
    """True when the decoder's grouping returns every slot's keypoints to their own masks.

    The result must not depend on candidate scores, and every loan to an
    instance must beat its rivals by at least a pixel, so subpixel decode
    error cannot flip it.
    """
    cfg = cfg.resolved()
    context = grouping_context(masks, cfg.grouping_reach)
    for slot in range(keypoints[0].shape[0]):
        owners = [k for k, kps in enumerate(keypoints) if kps[slot, 2] > 0]
        if not owners:
            continue
        points = [tuple(keypoints[k][slot, :2]) for k in owners]
        assigned = assign_slot(points, [1.0] * len(points), masks, cfg, context)
        if assigned.tolist() != owners:
            return False
        on_mask, dist = mask_distances(points, masks, cfg, context)
        home = home_clusters(on_mask, dist, cfg.grouping_tolerance)
        homeless = np.bincount(home[home >= 0], minlength=len(masks)) == 0
        for p, taker in enumerate(owners):
            if home[p] == taker:
                continue
            slack = dist[p, taker] + 1.0
            rivals = [q for q in range(len(points)) if q != p and on_mask[q] >= 0 and dist[q, taker] < slack]
            detours = [b for b in np.flatnonzero(homeless) if b != taker and dist[p, b] < slack]
            if rivals or detours:
                return False
    return True


def _layout_problem(layout: _Layout, cfg: SynthConfig, skeleton: SkeletonSpec) -> Optional[str]:
    counts = [int(v.sum()) for v in layout.visible]
    for index, (amodal, count, kps) in enumerate(zip(layout.amodal, counts, layout.keypoints)):
        if count < MIN_MASK_PIXELS or count < cfg.min_visible_fraction * amodal.sum():
            return f"person {index + 1} is too hidden ({count} visible pixels)"
        if not (kps[:, 2] == 2).any():
            return f"person {index + 1} has no visible keypoint"
        hidden = np.flatnonzero(kps[:, 2] == 1)
        if hidden.size:
            dist = ndimage.distance_transform_edt(~layout.visible[index])
            for slot in hidden:
                r, c = lattice_point(kps[slot, 0], kps[slot, 1], *dist.shape)
                if dist[r, c] > cfg.max_occluded_distance:
                    return f"occluded keypoint {slot} of person {index + 1} is far from its mask"
    problem = _separation_problem(layout.keypoints, counts, cfg, skeleton)
    if problem:
        return problem
    decode_cfg = DecodeConfig(disk_radius=cfg.disk_radius)
    if not grouping_is_identifiable(layout.keypoints, layout.visible, decode_cfg):
        return "keypoint grouping is ambiguous"
    return None


def _pairwise_iou_ok(mask: np.ndarray, others: Sequence[np.ndarray], limit: float) -> bool:
    for other in others:
        union = np.logical_or(mask, other).sum()
        if union and np.logical_and(mask, other).sum() / union > limit:
            return False
    return True


def generate_scene(cfg: SynthConfig, scene_index: int = 0) -> SceneAnnotation:
    """Sample one scene; figures are placed one by one, then the layout is checked."""
    cfg = cfg.resolved()
    skeleton = SkeletonSpec.coco()
    count = int(person_rng(cfg.rng_seed, scene_index, 0xC0).integers(cfg.persons_min, cfg.persons_max + 1))
    rejections = 0
    layout_try = 0
    while rejections < cfg.max_attempts:
        figures: list[Figure] = []
        masks: list[np.ndarray] = []
        draw = 0
        while len(figures) < count and rejections < cfg.max_attempts:
            rng = person_rng(cfg.rng_seed, scene_index, layout_try, len(figures), draw)
            draw += 1
            figure = sample_figure(rng, cfg)
            mask = figure.rasterize(cfg.height, cfg.width)
            if mask.sum() < MIN_MASK_PIXELS or not _pairwise_iou_ok(mask, masks, cfg.overlap_target):
                rejections += 1
                continue
            figures.append(figure)
            masks.append(mask)
        if len(figures) < count:
            break
        layout = _compose(figures, cfg.height, cfg.width)
        problem = _layout_problem(layout, cfg, skeleton)
        if problem is None:
            LOGGER.debug("scene %d accepted after %d rejections", scene_index, rejections)
            return layout.scene(cfg.width, cfg.height)
        LOGGER.debug("scene %d layout %d rejected: %s", scene_index, layout_try, problem)
        rejections += 1
        layout_try += 1
    raise SynthError(
        f"gave up after {cfg.max_attempts} rejections placing {count} persons on "
        f"{cfg.width}x{cfg.height}; try a larger canvas or a higher overlap_target"
    )


def generate_corpus(cfg: SynthConfig, count: int) -> list[SceneAnnotation]:
    """Scenes 0..count-1 of the seed in ``cfg``."""
    return [generate_scene(cfg, index) for index in range(count)]


# --------------------------------------------------------------------------
# Occlusion suite
# --------------------------------------------------------------------------
def centroid_displacement(scene: SceneAnnotation) -> tuple[list[bool], list[bool]]:
    """Per person: centroid off its own mask or on another's, and on another's."""
    displaced, captured = [], []
    labels = scene.label_map()
    for person in scene.persons:
        rows, cols = np.nonzero(labels == person.instance_id)
        r, c = lattice_point(cols.mean(), rows.mean(), scene.height, scene.width)
        owner = labels[r, c]
        on_other = owner not in (0, person.instance_id)
        captured.append(bool(on_other))
        displaced.append(bool(on_other or owner != person.instance_id))
    return displaced, captured


def _occlusion_scene(cfg: SynthConfig, scene_index: int, skeleton: SkeletonSpec) -> SceneAnnotation:
    low, high = max(2, cfg.persons_min), max(2, cfg.persons_max)
    for attempt in range(cfg.max_attempts):
        rng = person_rng(cfg.rng_seed, scene_index, attempt, 0xACE)
        count = int(rng.integers(low, high + 1))
        centre = (
            rng.uniform(0.3 * cfg.width, 0.7 * cfg.width),
            rng.uniform(0.35 * cfg.height, 0.65 * cfg.height),
        )
        figures = [sample_figure(person_rng(cfg.rng_seed, scene_index, attempt, 0), cfg, REACH_POSE, centre)]
        for index in range(1, count):
            prev = figures[-1].rasterize(cfg.height, cfg.width)
            if not prev.any():
                break
            rows, cols = np.nonzero(prev)
            target = np.array((cols.mean(), rows.mean()))
            person = person_rng(cfg.rng_seed, scene_index, attempt, index)
            figure = sample_figure(person, cfg, REACH_POSE, (0.0, 0.0))
            point = figure.limb_point(int(person.integers(len(LIMBS))), person.uniform(0.4, 1.0))
            figures.append(figure.shifted(*(target - point)))
        if len(figures) < count:
            continue
        layout = _compose(figures, cfg.height, cfg.width)
        problem = _layout_problem_suite(layout, cfg, skeleton)
        if problem:
            LOGGER.debug("occlusion scene %d attempt %d rejected: %s", scene_index, attempt, problem)
            continue
        scene = layout.scene(cfg.width, cfg.height)
        displaced, captured = centroid_displacement(scene)
        if sum(displaced) >= 0.8 * len(displaced) and any(captured):
            return scene
    raise SynthError(
        f"no entangled layout found for occlusion scene {scene_index} in {cfg.max_attempts} attempts"
    )


def _layout_problem_suite(layout: _Layout, cfg: SynthConfig, skeleton: SkeletonSpec) -> Optional[str]:
    counts = [int(v.sum()) for v in layout.visible]
    for index, (count, kps) in enumerate(zip(counts, layout.keypoints)):
        if count < MIN_MASK_PIXELS:
            return f"person {index + 1} is too hidden"
        if not any(kps[s, 2] == 2 for s in skeleton.anchor_priority):
            return f"person {index + 1} shows no anchor keypoint"
    return _separation_problem(layout.keypoints, counts, cfg, skeleton)


def make_occlusion_suite(cfg: SynthConfig, count: int) -> list[SceneAnnotation]:
    """Scenes whose mask centroids mostly miss their own person."""
    if count < 1:
        raise ConfigError(f"occlusion suite needs count >= 1, got {count}")
    cfg = cfg.resolved()
    skeleton = SkeletonSpec.coco()
    return [_occlusion_scene(cfg, index, skeleton) for index in range(count)]


# --------------------------------------------------------------------------
# Field noise
# --------------------------------------------------------------------------
def perturb_fields(
    fields: EncodedFields,
    noise_sigma: float,
    rng_seed: int,
    cfg: Optional[EncodeConfig] = None,
) -> EncodedFields:
    """Gaussian noise standing in for network prediction error.

    Heatmaps are clamped to [0, 1]; offsets get noise in normalised units
    (scaled by R where they are stored in pixels). Seed, sigma and instance
    channels are left alone.
    """
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if noise_sigma == 0:
        return fields
    cfg = (cfg or EncodeConfig()).resolved()
    radius = cfg.disk_radius

    def noise(stream: int, shape: tuple[int, ...], scale: float) -> np.ndarray:
        return person_rng(rng_seed, 0xF1E1D, stream).normal(0.0, noise_sigma * scale, size=shape)

    heat = fields.heatmaps.data.astype(np.float64)
    heat = np.clip(heat + noise(0, heat.shape, 1.0), 0.0, 1.0)
    kc = fields.keycentroid.data.astype(np.float64)
    kc_scale = 1.0 if cfg.offset_normalization else radius
    kc = kc + noise(1, kc.shape, kc_scale)
    mc = fields.maskcentroid.data.astype(np.float64).copy()
    for stream, name in ((2, "mc/off_x"), (3, "mc/off_y")):
        index = fields.maskcentroid.index(name)
        mc[index] = mc[index] + noise(stream, mc[index].shape, radius)
    return EncodedFields(
        heatmaps=fields.heatmaps.with_data(heat.astype(np.float32)),
        keycentroid=fields.keycentroid.with_data(kc.astype(np.float32)),
        maskcentroid=fields.maskcentroid.with_data(mc.astype(np.float32)),
        warnings=fields.warnings,
    )
