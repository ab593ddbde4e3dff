"""Decode predicted fields back into keypoints and instance masks.

The pipeline runs in four stages: Hough voting of the heatmaps along the
KeyCentroid offsets, peak extraction with greedy suppression, greedy
clustering of MaskCentroid embeddings around anchors, and assignment of
keypoint candidates to the clusters.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .config import DecodeConfig
from .encoder import MC_OFF_X, MC_OFF_Y, MC_SEED, MC_SIGMA, lattice_point
from .errors import InvariantError, PhiDomainError, SchemaError
from .models import (
    Anchor,
    Cluster,
    DecodedInstance,
    FieldGrid,
    KeypointCandidate,
    SkeletonSpec,
)

LOGGER = logging.getLogger(__name__)

STAGES = ("vote", "nms", "cluster", "assemble")

# 3x3 neighbourhood offsets (row, col)
_NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]


@dataclass(frozen=True, eq=False)
class VoteMap:
    """Per-slot accumulated vote mass, shaped (slots, H, W)."""

    data: np.ndarray
    voter_mass: np.ndarray

    @property
    def slots(self) -> int:
        return int(self.data.shape[0])


# ---------- voting ----------
def _vote_slot(
    heat: np.ndarray, dx: Optional[np.ndarray], dy: Optional[np.ndarray], cfg: DecodeConfig
) -> tuple[np.ndarray, float]:
    height, width = heat.shape
    rows, cols = np.nonzero(heat >= cfg.heatmap_threshold)
    weights = heat[rows, cols].astype(np.float64)
    if dx is None:
        plane = np.zeros((height, width))
        plane[rows, cols] = weights
        return plane, float(weights.sum())
    scale = cfg.offset_scale
    tx = np.clip(cols + scale * dx[rows, cols].astype(np.float64), 0.0, width - 1)
    ty = np.clip(rows + scale * dy[rows, cols].astype(np.float64), 0.0, height - 1)
    x0 = np.floor(tx).astype(np.int64)
    y0 = np.floor(ty).astype(np.int64)
    fx = tx - x0
    fy = ty - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    index = np.concatenate((y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1))
    mass = np.concatenate(
        (
            weights * (1 - fx) * (1 - fy),
            weights * fx * (1 - fy),
            weights * (1 - fx) * fy,
            weights * fx * fy,
        )
    )
    plane = np.bincount(index, weights=mass, minlength=height * width).reshape(height, width)
    return plane, float(weights.sum())


def vote_keypoints(
    heatmaps: FieldGrid,
    keycentroid: FieldGrid,
    cfg: DecodeConfig,
    executor: Optional[Executor] = None,
) -> VoteMap:
    """Splat each confident pixel's probability at the keypoint it points to."""
    cfg = cfg.resolved()
    slots = len(heatmaps.channels)
    if len(keycentroid.channels) != 2 * slots:
        raise SchemaError(
            f"keycentroid has {len(keycentroid.channels)} channels, expected {2 * slots}"
        )
    if keycentroid.shape != heatmaps.shape:
        raise SchemaError(f"field shapes differ: {heatmaps.shape} vs {keycentroid.shape}")

    def one(slot: int) -> tuple[np.ndarray, float]:
        if not cfg.use_keycentroid:
            return _vote_slot(heatmaps.data[slot], None, None, cfg)
        return _vote_slot(
            heatmaps.data[slot], keycentroid.data[2 * slot], keycentroid.data[2 * slot + 1], cfg
        )

    if executor is None:
        results = [one(slot) for slot in range(slots)]
    else:
        results = list(executor.map(one, range(slots)))
    data = np.zeros((slots,) + heatmaps.shape)
    for slot, (plane, _) in enumerate(results):
        data[slot] = plane
    voter_mass = np.array([mass for _, mass in results])
    return VoteMap(data, voter_mass)


# ---------- peaks ----------
def _disk_stamp(radius: float) -> np.ndarray:
    reach = int(math.floor(radius))
    dr, dc = np.mgrid[-reach:reach + 1, -reach:reach + 1]
    return dr * dr + dc * dc <= radius * radius


def _local_peaks(plane: np.ndarray, threshold: float, min_mass: float) -> tuple[np.ndarray, ...]:
    """Rows, cols, neighbourhood mass and subpixel x, y of 3x3 maxima."""
    height, width = plane.shape
    rows, cols = np.nonzero(plane > 0)
    if rows.size == 0:
        empty = np.zeros(0)
        return rows, cols, empty, empty, empty
    peak_pad = np.pad(plane, 1, constant_values=-1.0)
    mass_pad = np.pad(plane, 1, constant_values=0.0)
    centre = plane[rows, cols]
    is_peak = np.ones(rows.size, dtype=bool)
    mass = np.zeros(rows.size)
    sum_x = np.zeros(rows.size)
    sum_y = np.zeros(rows.size)
    for dr, dc in _NEIGHBOURS:
        neighbour = mass_pad[rows + 1 + dr, cols + 1 + dc]
        if (dr, dc) != (0, 0):
            is_peak &= centre >= peak_pad[rows + 1 + dr, cols + 1 + dc]
        mass += neighbour
        sum_x += neighbour * dc
        sum_y += neighbour * dr
    score = mass / (1.0 + mass)
    keep = is_peak & (score >= threshold) & (mass >= min_mass)
    rows, cols, mass = rows[keep], cols[keep], mass[keep]
    x = cols + sum_x[keep] / mass
    y = rows + sum_y[keep] / mass
    x = np.clip(x, 0, width - 1)
    y = np.clip(y, 0, height - 1)
    return rows, cols, mass, x, y


def peaks_in_plane(plane: np.ndarray, cfg: DecodeConfig, slot: int) -> list[KeypointCandidate]:
    """Greedy suppression of 3x3 maxima, highest neighbourhood mass first.

    Ties go to the smaller row, then the smaller column. Maxima whose
    neighbourhood holds less than ``min_peak_mass`` are background noise
    and never become candidates.
    """
    cfg = cfg.resolved()
    rows, cols, mass, xs, ys = _local_peaks(plane, cfg.candidate_score_threshold, cfg.min_peak_mass)
    if rows.size == 0:
        return []
    order = np.lexsort((cols, rows, -mass))
    stamp = _disk_stamp(cfg.nms_radius)
    reach = stamp.shape[0] // 2
    height, width = plane.shape
    suppressed = np.zeros((height + 2 * reach, width + 2 * reach), dtype=bool)
    out = []
    for i in order:
        r, c = int(rows[i]), int(cols[i])
        if suppressed[r + reach, c + reach]:
            continue
        window = suppressed[r:r + 2 * reach + 1, c:c + 2 * reach + 1]
        window |= stamp
        m = float(mass[i])
        out.append(KeypointCandidate(slot, float(xs[i]), float(ys[i]), min(m / (1.0 + m), 1.0), m))
    return out


def nms_peaks(votes: VoteMap, cfg: DecodeConfig) -> list[KeypointCandidate]:
    """Keypoint candidates of every slot, each slot in descending mass order."""
    candidates: list[KeypointCandidate] = []
    for slot in range(votes.slots):
        candidates.extend(peaks_in_plane(votes.data[slot], cfg, slot))
    return candidates


# ---------- anchors ----------
def _foreground(sigma: np.ndarray, off_x: np.ndarray, off_y: np.ndarray) -> np.ndarray:
    """Pixels carrying a sigma; falls back to nonzero offsets when no pixel does."""
    if (sigma > 0).any():
        return sigma > 0
    return (off_x != 0) | (off_y != 0)


def _dedupe(anchors: Sequence[Anchor], radius: float) -> list[Anchor]:
    """Drop anchors within ``radius`` of an earlier one; order is kept."""
    kept: list[Anchor] = []
    kept_xy = np.zeros((0, 2))
    for anchor in anchors:
        if kept:
            d2 = (kept_xy[:, 0] - anchor.x) ** 2 + (kept_xy[:, 1] - anchor.y) ** 2
            if (d2 <= radius * radius).any():
                continue
        kept.append(anchor)
        kept_xy = np.vstack((kept_xy, (anchor.x, anchor.y)))
    return kept


def keypoint_anchors(
    candidates: Sequence[KeypointCandidate], skeleton: SkeletonSpec, cfg: DecodeConfig
) -> list[Anchor]:
    """Dynamic anchors: candidates of anchor-priority slots.

    Ordered by the slot's rank in ``skeleton.anchor_priority``, then by
    descending score (ties: smaller y, then smaller x), so torso keypoints
    claim their person before limb keypoints can.
    """
    cfg = cfg.resolved()
    rank = {slot: i for i, slot in enumerate(skeleton.anchor_priority)}
    ranked = sorted(
        (c for c in candidates if c.slot in rank),
        key=lambda c: (rank[c.slot], -c.score, c.y, c.x),
    )
    return _dedupe([Anchor(c.x, c.y, c.score, c.slot) for c in ranked], cfg.nms_radius)


def seed_anchors(maskcentroid: FieldGrid, cfg: DecodeConfig) -> list[Anchor]:
    """Anchors at seed-map peaks, pointing where the seed pixel's embedding lands."""
    cfg = cfg.resolved()
    seed = np.clip(maskcentroid.channel(MC_SEED).astype(np.float64), 0.0, None)
    off_x = maskcentroid.channel(MC_OFF_X)
    off_y = maskcentroid.channel(MC_OFF_Y)
    sigma = maskcentroid.channel(MC_SIGMA)
    foreground = _foreground(sigma, off_x, off_y)
    anchors = []
    for peak in peaks_in_plane(seed, replace(cfg, min_peak_mass=0.0), slot=-1):
        row, col = lattice_point(peak.x, peak.y, *seed.shape)
        x, y = float(col), float(row)
        if foreground[row, col]:
            x += float(off_x[row, col])
            y += float(off_y[row, col])
        anchors.append(Anchor(x, y, peak.score, None))
    anchors.sort(key=lambda a: (-a.score, a.y, a.x))
    return _dedupe(anchors, cfg.nms_radius)


# ---------- clustering ----------
def phi(e: Sequence[float], centroid: Sequence[float], sigma: float) -> float:
    """Gaussian margin exp(-|e - C|^2 / (2 sigma^2))."""
    if not sigma > 0:
        raise PhiDomainError(f"sigma must be positive, got {sigma}")
    d2 = (e[0] - centroid[0]) ** 2 + (e[1] - centroid[1]) ** 2
    return math.exp(-d2 / (2.0 * sigma * sigma))


AnchorLike = Union[Anchor, tuple]


def _as_anchor(item: AnchorLike) -> Anchor:
    if isinstance(item, Anchor):
        return item
    point, score = item
    return Anchor(float(point[0]), float(point[1]), float(score), None)


def cluster_instances(
    maskcentroid: FieldGrid, anchors: Sequence[AnchorLike], cfg: DecodeConfig
) -> list[Cluster]:
    """Greedy clustering of embeddings e = m + v around anchors, in anchor order.

    A pixel joins the current anchor when phi(e, C, sigma) > phi_threshold.
    With ``anchor_refinement`` > 0 the centre C then moves to the mean
    embedding of the members and membership is re-evaluated, up to that many
    times or until it stops changing. The reported anchor stays the original
    point.
    """
    cfg = cfg.resolved()
    off_x = maskcentroid.channel(MC_OFF_X).astype(np.float64)
    off_y = maskcentroid.channel(MC_OFF_Y).astype(np.float64)
    sigma = maskcentroid.channel(MC_SIGMA).astype(np.float64)
    height, width = maskcentroid.shape
    rows, cols = np.nonzero(_foreground(sigma, off_x, off_y))
    ex = cols + off_x[rows, cols]
    ey = rows + off_y[rows, cols]
    own_sigma = sigma[rows, cols]
    free = np.ones(rows.size, dtype=bool)
    # phi > t  <=>  d^2 < 2 sigma^2 ln(1/t)
    cut = 2.0 * math.log(1.0 / cfg.phi_threshold)
    clusters: list[Cluster] = []
    for item in anchors:
        if len(clusters) >= cfg.max_instances:
            break
        anchor = _as_anchor(item)
        r, c = lattice_point(anchor.x, anchor.y, height, width)
        anchor_sigma = sigma[r, c] if sigma[r, c] > 0 else cfg.fallback_sigma
        if cfg.sigma_source == "anchor":
            s = np.full(rows.size, anchor_sigma)
        else:
            s = np.where(own_sigma > 0, own_sigma, anchor_sigma)
        limit = cut * s * s
        d2 = (ex - anchor.x) ** 2 + (ey - anchor.y) ** 2
        members = free & (d2 < limit)
        for _ in range(cfg.anchor_refinement):
            if not members.any():
                break
            d2 = (ex - ex[members].mean()) ** 2 + (ey - ey[members].mean()) ** 2
            moved = free & (d2 < limit)
            if np.array_equal(moved, members):
                break
            members = moved
        if int(members.sum()) < cfg.min_instance_pixels:
            continue
        free &= ~members
        mask = np.zeros((height, width), dtype=bool)
        mask[rows[members], cols[members]] = True
        mean_phi = float(np.exp(-d2[members] / (2.0 * s[members] ** 2)).mean())
        clusters.append(Cluster(mask, (anchor.x, anchor.y), mean_phi, anchor.slot))
    return clusters


# ---------- assembly ----------
@dataclass(frozen=True, eq=False)
class GroupingContext:
    """Owner plane and cropped distance maps for a fixed set of masks."""

    owner: np.ndarray
    distances: tuple[tuple[np.ndarray, int, int], ...]


def grouping_context(masks: Sequence[np.ndarray], reach: float) -> GroupingContext:
    """Owner plane plus distance maps cropped to each mask's box padded by ``reach``."""
    height, width = masks[0].shape
    owner = np.full((height, width), -1, dtype=np.int64)
    distances = []
    pad = int(math.ceil(reach)) + 1
    for index, mask in enumerate(masks):
        owner[mask] = index
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            distances.append((np.zeros((0, 0)), 0, 0))
            continue
        r0, r1 = max(rows.min() - pad, 0), min(rows.max() + pad + 1, height)
        c0, c1 = max(cols.min() - pad, 0), min(cols.max() + pad + 1, width)
        crop = mask[r0:r1, c0:c1]
        distances.append((ndimage.distance_transform_edt(~crop), int(r0), int(c0)))
    return GroupingContext(owner, tuple(distances))


def mask_distances(
    points: Sequence[tuple[float, float]],
    masks: Sequence[np.ndarray],
    cfg: DecodeConfig,
    context: Optional[GroupingContext] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask under each point (-1 for none) and its distance to every mask.

    Distances are measured from the point's lattice cell and are ``inf``
    beyond ``grouping_reach`` of a mask's bounding box.
    """
    cfg = cfg.resolved()
    n, k = len(points), len(masks)
    if n == 0 or k == 0:
        return np.full(n, -1, dtype=np.int64), np.full((n, k), np.inf)
    context = context or grouping_context(masks, cfg.grouping_reach)
    height, width = context.owner.shape
    cells = np.array([lattice_point(x, y, height, width) for x, y in points], dtype=np.int64)
    cell_r, cell_c = cells[:, 0], cells[:, 1]
    dist = np.full((n, k), np.inf)
    for index, (crop, r0, c0) in enumerate(context.distances):
        rr, cc = cell_r - r0, cell_c - c0
        inside = (rr >= 0) & (rr < crop.shape[0]) & (cc >= 0) & (cc < crop.shape[1])
        dist[inside, index] = crop[rr[inside], cc[inside]]
    return context.owner[cell_r, cell_c], dist


def home_clusters(owner: np.ndarray, dist: np.ndarray, tolerance: float) -> np.ndarray:
    """The mask containing each point, else the nearest within ``tolerance``, else -1."""
    home = owner.copy()
    if dist.shape[1] == 0:
        return home
    nearest = np.argmin(dist, axis=1)
    near_enough = dist[np.arange(dist.shape[0]), nearest] <= tolerance
    outside = home == -1
    home[outside & near_enough] = nearest[outside & near_enough]
    return home


def assign_slot(
    points: Sequence[tuple[float, float]],
    scores: Sequence[float],
    masks: Sequence[np.ndarray],
    cfg: DecodeConfig,
    context: Optional[GroupingContext] = None,
) -> np.ndarray:
    """Instance index for each candidate of one slot, -1 when dropped.

    Every candidate belongs to its home mask: the one containing it, else
    the nearest mask within ``grouping_tolerance``. Candidates without a
    home are dropped. Each instance keeps its highest-score home candidate
    (ties: smaller y, then smaller x).

    Before that, an instance with no home candidate may take one whose home
    holds at least two candidates scoring ``grouping_reach_score`` or more:
    the candidate must lie on its home mask and within ``grouping_reach`` of
    the taker. These loans go nearest first. This is how a keypoint hidden
    under another person reaches its own instance.
    """
    cfg = cfg.resolved()
    n, k = len(points), len(masks)
    assigned = np.full(n, -1, dtype=np.int64)
    if n == 0 or k == 0:
        return assigned
    owner, dist = mask_distances(points, masks, cfg, context)
    home = home_clusters(owner, dist, cfg.grouping_tolerance)
    score = np.asarray(scores, dtype=np.float64)
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)

    confident = score >= cfg.grouping_reach_score
    spare = np.bincount(home[(home >= 0) & confident], minlength=k)
    empty = np.bincount(home[home >= 0], minlength=k) == 0
    loans = [
        (dist[p, b], -score[p], ys[p], xs[p], b, p)
        for p in np.flatnonzero(confident & (owner >= 0))
        for b in np.flatnonzero(empty)
        if dist[p, b] <= cfg.grouping_reach
    ]
    for *_, b, p in sorted(loans):
        if not empty[b] or assigned[p] != -1 or spare[home[p]] < 2:
            continue
        assigned[p] = b
        empty[b] = False
        spare[home[p]] -= 1

    filled = np.zeros(k, dtype=bool)
    for p in np.lexsort((xs, ys, -score)):
        h = home[p]
        if assigned[p] != -1 or h < 0 or filled[h]:
            continue
        assigned[p] = h
        filled[h] = True
    return assigned


def assemble_instances(
    candidates: Sequence[KeypointCandidate],
    clusters: Sequence[Cluster],
    skeleton: SkeletonSpec,
    cfg: DecodeConfig,
) -> list[DecodedInstance]:
    """Group keypoint candidates onto clusters slot by slot (see ``assign_slot``).

    Instance score is the mean score of its assigned keypoints; an instance
    with none keeps its mask and scores the cluster's mean phi.
    """
    cfg = cfg.resolved()
    count = len(clusters)
    if count == 0:
        return []
    keypoints = np.zeros((count, skeleton.size, 3))
    present = np.zeros((count, skeleton.size), dtype=bool)
    masks = [cluster.mask for cluster in clusters]
    context = grouping_context(masks, cfg.grouping_reach)
    for slot in range(skeleton.size):
        mine = [c for c in candidates if c.slot == slot]
        if not mine:
            continue
        assigned = assign_slot([(c.x, c.y) for c in mine], [c.score for c in mine], masks, cfg, context)
        for candidate, k in zip(mine, assigned):
            if k >= 0:
                keypoints[k, slot] = (candidate.x, candidate.y, candidate.score)
                present[k, slot] = True
    instances = []
    for k, cluster in enumerate(clusters):
        if present[k].any():
            score = float(keypoints[k, present[k], 2].mean())
        else:
            score = cluster.score
        instances.append(
            DecodedInstance(
                keypoints=keypoints[k],
                present=present[k],
                mask=cluster.mask,
                anchor=cluster.anchor,
                score=float(np.clip(score, 0.0, 1.0)),
                anchor_slot=cluster.anchor_slot,
            )
        )
    return instances


# ---------- pipeline ----------
def check_fields(
    heatmaps: FieldGrid, keycentroid: FieldGrid, maskcentroid: FieldGrid, skeleton: SkeletonSpec
) -> None:
    """Raise SchemaError unless the three stacks share a canvas and carry the expected channels."""
    shapes = {heatmaps.shape, keycentroid.shape, maskcentroid.shape}
    if len(shapes) != 1:
        raise SchemaError(
            f"field shapes differ: heatmaps {heatmaps.shape}, keycentroid {keycentroid.shape}, "
            f"maskcentroid {maskcentroid.shape}"
        )
    if len(heatmaps.channels) != skeleton.size:
        raise SchemaError(
            f"heatmaps have {len(heatmaps.channels)} channels, skeleton has {skeleton.size}"
        )
    for name in (MC_OFF_X, MC_OFF_Y, MC_SIGMA, MC_SEED):
        maskcentroid.index(name)


def decode(
    heatmaps: FieldGrid,
    keycentroid: FieldGrid,
    maskcentroid: FieldGrid,
    skeleton: Optional[SkeletonSpec] = None,
    cfg: Optional[DecodeConfig] = None,
    executor: Optional[Executor] = None,
    timings: Optional[dict[str, float]] = None,
) -> list[DecodedInstance]:
    """Vote, pick peaks, cluster around anchors and assemble instances.

    When ``timings`` is given it receives the seconds spent in each of
    ``STAGES``. Raises InvariantError if two output masks overlap.
    """
    skeleton = skeleton or SkeletonSpec.coco()
    cfg = (cfg or DecodeConfig()).resolved()
    check_fields(heatmaps, keycentroid, maskcentroid, skeleton)
    clock = time.perf_counter
    stamps = [clock()]

    votes = vote_keypoints(heatmaps, keycentroid, cfg, executor)
    stamps.append(clock())
    candidates = nms_peaks(votes, cfg)
    stamps.append(clock())
    if cfg.centroid_mode == "dynamic":
        anchors = keypoint_anchors(candidates, skeleton, cfg)
    else:
        anchors = seed_anchors(maskcentroid, cfg)
    clusters = cluster_instances(maskcentroid, anchors, cfg)
    stamps.append(clock())
    instances = assemble_instances(candidates, clusters, skeleton, cfg)
    stamps.append(clock())

    if instances:
        coverage = np.sum([inst.mask for inst in instances], axis=0)
        if coverage.max() > 1:
            raise InvariantError("decoded instance masks overlap")
    if timings is not None:
        for stage, start, end in zip(STAGES, stamps, stamps[1:]):
            timings[stage] = end - start
    LOGGER.debug(
        "decode: %d candidates, %d anchors, %d clusters, %d instances",
        len(candidates),
        len(anchors),
        len(clusters),
        len(instances),
    )
    return instances
