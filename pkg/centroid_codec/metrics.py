"""COCO-style keypoint and mask evaluation at desk scale."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvariantError, SchemaError
from .models import DecodedInstance, PersonAnnotation, SceneAnnotation, SkeletonSpec

LOGGER = logging.getLogger(__name__)

DEFAULT_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SIMILARITIES = ("oks", "mask_iou")


def oks(
    det: np.ndarray,
    gt: PersonAnnotation,
    area: float,
    skeleton: SkeletonSpec,
    present: Optional[np.ndarray] = None,
) -> float:
    """Object keypoint similarity over the gt's labelled slots.

    ``det`` rows start with (x, y); slots flagged absent in ``present``
    score zero.
    """
    if not area > 0:
        raise InvariantError(f"OKS area must be positive, got {area}")
    det = np.asarray(det, dtype=np.float64)
    if det.shape[0] != skeleton.size or gt.keypoints.shape[0] != skeleton.size:
        raise SchemaError("detection, ground truth and skeleton disagree on keypoint count")
    labelled = gt.keypoints[:, 2] > 0
    if not labelled.any():
        return 0.0
    if present is None:
        present = np.ones(skeleton.size, dtype=bool)
    k = np.asarray(skeleton.oks_falloff)
    d2 = np.sum((det[:, :2] - gt.keypoints[:, :2]) ** 2, axis=1)
    per_slot = np.where(present, np.exp(-d2 / (2.0 * area * k * k)), 0.0)
    return float(per_slot[labelled].sum() / labelled.sum())


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise SchemaError(f"mask canvases differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class APSummary:
    per_threshold: dict[float, float]
    mean: float
    recall: dict[float, float]
    pr_points: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ap": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "map": self.mean,
            "recall": {f"{t:.2f}": v for t, v in self.recall.items()},
        }


@dataclass
class EvalResult:
    keypoint_ap: Optional[APSummary] = None
    mask_ap: Optional[APSummary] = None
    # per similarity, per image: (detection index, gt instance id, similarity)
    matches: dict[str, list[list[tuple[int, int, float]]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {}
        if self.keypoint_ap is not None:
            out["keypoint"] = self.keypoint_ap.to_dict()
        if self.mask_ap is not None:
            out["mask"] = self.mask_ap.to_dict()
        out["matches"] = {
            name: [[list(m) for m in image] for image in per_image]
            for name, per_image in self.matches.items()
        }
        return out

    def pr_rows(self) -> list[dict]:
        rows = []
        for name, summary in (("oks", self.keypoint_ap), ("mask_iou", self.mask_ap)):
            if summary is not None:
                rows.extend({"similarity": name, **row} for row in summary.pr_points)
        return rows


# --- helpers ---
def _similarity_matrix(
    dets: Sequence[DecodedInstance],
    scene: SceneAnnotation,
    similarity: str,
    skeleton: SkeletonSpec,
) -> np.ndarray:
    sims = np.zeros((len(dets), len(scene.persons)))
    for g, person in enumerate(scene.persons):
        area = max(float(person.area), 1.0)
        for d, det in enumerate(dets):
            if similarity == "oks":
                sims[d, g] = oks(det.keypoints, person, area, skeleton, det.present)
            else:
                sims[d, g] = mask_iou(det.mask, person.mask)
    return sims


def _match_image(
    scores: np.ndarray,
    sims: np.ndarray,
    gt_ignore: np.ndarray,
    det_outside: np.ndarray,
    threshold: float,
) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int, float]]]:
    """Greedy matching in descending score; returns tp, ignore flags and pairs."""
    order = np.argsort(-scores, kind="mergesort")
    taken = np.zeros(sims.shape[1], dtype=bool)
    tp = np.zeros(scores.size, dtype=bool)
    ignore = np.zeros(scores.size, dtype=bool)
    pairs = []
    for d in order:
        best = -1
        for pool in (~gt_ignore, gt_ignore):
            usable = pool & ~taken & (sims[d] >= threshold)
            if usable.any():
                # argmax returns the lowest index among ties
                best = int(np.argmax(np.where(usable, sims[d], -1.0)))
                break
        if best < 0:
            ignore[d] = det_outside[d]
            continue
        taken[best] = True
        if gt_ignore[best]:
            ignore[d] = True
        else:
            tp[d] = True
        pairs.append((int(d), best, float(sims[d, best])))
    return tp, ignore, pairs


def interpolated_ap(tp: np.ndarray, scores: np.ndarray, gt_count: int) -> tuple[float, float, np.ndarray, np.ndarray]:
    """101-point interpolated AP; returns AP, final recall, recall and precision curves."""
    if gt_count == 0:
        return 0.0, 0.0, np.zeros(0), np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    hits = tp[order].astype(np.float64)
    tps = np.cumsum(hits)
    fps = np.cumsum(1.0 - hits)
    recall = tps / gt_count
    precision = tps / np.maximum(tps + fps, np.spacing(1))
    if recall.size == 0:
        return 0.0, 0.0, recall, precision
    envelope = precision.copy()
    for i in range(envelope.size - 1, 0, -1):
        envelope[i - 1] = max(envelope[i - 1], envelope[i])
    sampled = np.zeros(RECALL_POINTS.size)
    index = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = index < envelope.size
    sampled[valid] = envelope[index[valid]]
    return float(sampled.mean()), float(recall[-1]), recall, precision


def average_precision(
    detections: Sequence[Sequence[DecodedInstance]],
    gts: Sequence[SceneAnnotation],
    similarity: str = "oks",
    thresholds: Optional[Sequence[float]] = None,
    skeleton: Optional[SkeletonSpec] = None,
    area_range: Optional[tuple[float, float]] = None,
) -> EvalResult:
    """COCO-style AP under one similarity (``oks`` or ``mask_iou``) at every threshold.

    Detections are matched greedily in descending score order; gts outside
    ``area_range`` are ignored rather than counted as misses.
    """
    if similarity not in SIMILARITIES:
        raise SchemaError(f"similarity must be one of {SIMILARITIES}, got {similarity!r}")
    if len(detections) != len(gts):
        raise SchemaError(f"{len(detections)} detection lists for {len(gts)} scenes")
    skeleton = skeleton or SkeletonSpec.coco()
    thresholds = tuple(thresholds or DEFAULT_THRESHOLDS)
    lo, hi = area_range if area_range is not None else (-np.inf, np.inf)

    images = []
    for dets, scene in zip(detections, gts):
        dets = list(dets)
        areas = np.array([p.area for p in scene.persons], dtype=np.float64)
        det_areas = np.array([d.area for d in dets], dtype=np.float64)
        images.append(
            (
                np.array([d.score for d in dets], dtype=np.float64),
                _similarity_matrix(dets, scene, similarity, skeleton),
                (areas < lo) | (areas > hi),
                (det_areas < lo) | (det_areas > hi),
                [p.instance_id for p in scene.persons],
            )
        )
    gt_count = int(sum((~img[2]).sum() for img in images))

    per_threshold: dict[float, float] = {}
    recall_at: dict[float, float] = {}
    pr_points: list[dict] = []
    matches: list[list[tuple[int, int, float]]] = []
    for t_index, t in enumerate(thresholds):
        all_tp, all_scores = [], []
        for scores, sims, gt_ignore, det_outside, ids in images:
            tp, ignore, pairs = _match_image(scores, sims, gt_ignore, det_outside, t)
            all_tp.append(tp[~ignore])
            all_scores.append(scores[~ignore])
            if t_index == 0:
                matches.append([(d, ids[g], s) for d, g, s in pairs])
        tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
        scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
        ap, final_recall, recall, precision = interpolated_ap(tp, scores, gt_count)
        per_threshold[t] = ap
        recall_at[t] = final_recall
        pr_points.extend(
            {"threshold": t, "rank": i, "recall": float(r), "precision": float(p)}
            for i, (r, p) in enumerate(zip(recall, precision))
        )
    mean = float(np.mean(list(per_threshold.values()))) if per_threshold else 0.0
    summary = APSummary(per_threshold, mean, recall_at, pr_points)
    LOGGER.info("%s mAP %.4f over %d gts", similarity, mean, gt_count)
    if similarity == "oks":
        return EvalResult(keypoint_ap=summary, matches={"oks": matches})
    return EvalResult(mask_ap=summary, matches={"mask_iou": matches})


def evaluate(
    detections: Sequence[Sequence[DecodedInstance]],
    gts: Sequence[SceneAnnotation],
    thresholds: Optional[Sequence[float]] = None,
    skeleton: Optional[SkeletonSpec] = None,
    area_range: Optional[tuple[float, float]] = None,
) -> EvalResult:
    """Keypoint and mask AP together."""
    keypoint = average_precision(detections, gts, "oks", thresholds, skeleton, area_range)
    mask = average_precision(detections, gts, "mask_iou", thresholds, skeleton, area_range)
    return EvalResult(
        keypoint_ap=keypoint.keypoint_ap,
        mask_ap=mask.mask_ap,
        matches={**keypoint.matches, **mask.matches},
    )
