"""Training losses over field grids, with analytic gradients."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .config import EncodeConfig
from .encoder import MC_OFF_X, MC_OFF_Y, MC_SIGMA, encode_scene, keycentroid_weights, select_anchor_keypoint
from .errors import AnchorUnavailableError, ConfigError, InvariantError, PhiDomainError, SchemaError, UndefinedLossError
from .models import EncodedFields, FieldGrid, SceneAnnotation, SkeletonSpec

LOGGER = logging.getLogger(__name__)

EPSILON = 1e-7
WEIGHT_FLOOR = 1e-6
DEFAULT_WEIGHTS = (4.0, 1.0, 1.0)


@dataclass(frozen=True)
class LossReport:
    value: float
    heatmap: float
    keycentroid: float
    maskcentroid: float
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS

    @classmethod
    def combine(cls, terms: Sequence[float], weights: Sequence[float] = DEFAULT_WEIGHTS) -> "LossReport":
        weights = _check_weights(weights)
        h, k, m = (float(t) for t in terms)
        value = weights[0] * h + weights[1] * k + weights[2] * m
        return cls(value, h, k, m, weights)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "terms": {"heatmap": self.heatmap, "keycentroid": self.keycentroid, "maskcentroid": self.maskcentroid},
            "weights": list(self.weights),
        }


def _check_weights(weights: Sequence[float]) -> tuple[float, float, float]:
    values = tuple(float(w) for w in weights)
    if len(values) != 3 or any(w < 0 for w in values) or not any(values):
        raise ConfigError(f"loss weights must be three non-negative numbers, not all zero: {weights}")
    return values  # type: ignore[return-value]


def _same_shape(a: FieldGrid, b: FieldGrid, what: str) -> None:
    if a.data.shape != b.data.shape:
        raise SchemaError(f"{what}: shapes differ, {a.data.shape} vs {b.data.shape}")


# ---------- heatmap ----------
def heatmap_loss(pred: FieldGrid, target: FieldGrid) -> float:
    """Mean binary cross-entropy over every pixel and channel."""
    _same_shape(pred, target, "heatmap_loss")
    p = np.clip(pred.data.astype(np.float64), EPSILON, 1.0 - EPSILON)
    y = target.data.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def heatmap_loss_grad(pred: FieldGrid, target: FieldGrid) -> FieldGrid:
    """Gradient of ``heatmap_loss``; zero where the prediction was clamped."""
    _same_shape(pred, target, "heatmap_loss_grad")
    raw = pred.data.astype(np.float64)
    p = np.clip(raw, EPSILON, 1.0 - EPSILON)
    y = target.data.astype(np.float64)
    grad = (-y / p + (1.0 - y) / (1.0 - p)) / raw.size
    grad[(raw < EPSILON) | (raw > 1.0 - EPSILON)] = 0.0
    return FieldGrid(pred.channels, grad)


# ---------- KeyCentroid ----------
def _keycentroid_terms(pred: FieldGrid, target: FieldGrid, weight: FieldGrid):
    _same_shape(pred, target, "keycentroid_loss")
    slots = len(weight.channels)
    if len(pred.channels) != 2 * slots or weight.shape != pred.shape:
        raise SchemaError(
            f"keycentroid_loss: {len(pred.channels)} offset channels need {len(pred.channels) // 2} "
            f"weight planes of {pred.shape}, got {slots} of {weight.shape}"
        )
    w = weight.data.astype(np.float64)
    if (w < 0).any():
        raise InvariantError("keycentroid weights must be non-negative")
    active = w > WEIGHT_FLOOR
    total = float(w[active].sum())
    if total <= 0:
        raise UndefinedLossError("keycentroid loss has no weighted pixels")
    diff = (pred.data.astype(np.float64) - target.data.astype(np.float64)).reshape(
        (slots, 2) + pred.shape
    )
    return w * active, diff, total


def keycentroid_loss(pred: FieldGrid, target: FieldGrid, weight: FieldGrid) -> float:
    """Weighted L2 of offset errors, restricted to pixels inside keypoint disks."""
    w, diff, total = _keycentroid_terms(pred, target, weight)
    return float(np.sum(w * np.sum(diff * diff, axis=1)) / total)


def keycentroid_loss_grad(pred: FieldGrid, target: FieldGrid, weight: FieldGrid) -> FieldGrid:
    """Gradient of ``keycentroid_loss`` with respect to the predicted offsets."""
    w, diff, total = _keycentroid_terms(pred, target, weight)
    grad = 2.0 * w[:, None] * diff / total
    return FieldGrid(pred.channels, grad.reshape(pred.data.shape))


# ---------- MaskCentroid ----------
@dataclass(frozen=True, eq=False)
class _InstanceTerm:
    pixels: np.ndarray
    ring: np.ndarray
    centre: Optional[tuple[float, float]]


def _instance_terms(
    scene: SceneAnnotation, skeleton: SkeletonSpec, cfg: EncodeConfig
) -> list[_InstanceTerm]:
    height, width = scene.height, scene.width
    labels = scene.label_map()
    background = labels == 0
    reach = 2.0 * cfg.disk_radius
    pad = int(math.ceil(reach)) + 1
    terms = []
    for person in sorted(scene.persons, key=lambda p: p.instance_id):
        pixels = labels == person.instance_id
        count = int(pixels.sum())
        if count == 0:
            continue
        rows, cols = np.nonzero(pixels)
        r0, r1 = max(rows.min() - pad, 0), min(rows.max() + pad + 1, height)
        c0, c1 = max(cols.min() - pad, 0), min(cols.max() + pad + 1, width)
        dist = ndimage.distance_transform_edt(~pixels[r0:r1, c0:c1])
        near = background[r0:r1, c0:c1] & (dist <= reach)
        ring_r, ring_c = np.nonzero(near)
        ring_d = dist[ring_r, ring_c]
        ring_flat = (ring_r + r0) * width + (ring_c + c0)
        order = np.lexsort((ring_flat, ring_d))[:count]
        centre = None
        if cfg.centroid_mode == "dynamic":
            try:
                slot = select_anchor_keypoint(person, skeleton)
                centre = (float(person.keypoints[slot, 0]), float(person.keypoints[slot, 1]))
            except AnchorUnavailableError:
                centre = None
        terms.append(_InstanceTerm(np.flatnonzero(pixels), np.sort(ring_flat[order]), centre))
    return terms


def _maskcentroid_pass(
    pred_offsets: FieldGrid,
    pred_sigma: FieldGrid,
    scene: SceneAnnotation,
    cfg: EncodeConfig,
    skeleton: SkeletonSpec,
    with_grad: bool,
):
    canvas = (scene.height, scene.width)
    if pred_offsets.shape != canvas or pred_sigma.shape != canvas:
        raise SchemaError(
            f"maskcentroid grids are {pred_offsets.shape}/{pred_sigma.shape}, canvas is {canvas}"
        )
    terms = _instance_terms(scene, skeleton, cfg)
    if not terms:
        raise UndefinedLossError("maskcentroid loss needs at least one non-empty instance")
    ys, xs = np.divmod(np.arange(scene.height * scene.width), scene.width)
    ex = xs + pred_offsets.channel(MC_OFF_X).astype(np.float64).ravel()
    ey = ys + pred_offsets.channel(MC_OFF_Y).astype(np.float64).ravel()
    sig = pred_sigma.channel(MC_SIGMA).astype(np.float64).ravel()
    count = len(terms)
    grad_x = np.zeros_like(ex)
    grad_y = np.zeros_like(ey)
    grad_s = np.zeros_like(sig)
    total = 0.0
    for term in terms:
        inside = term.pixels
        evaluated = np.concatenate((inside, term.ring))
        y = np.concatenate((np.ones(inside.size), np.zeros(term.ring.size)))
        static = term.centre is None
        if static:
            cx, cy = float(ex[inside].mean()), float(ey[inside].mean())
        else:
            cx, cy = term.centre
        s = float(sig[inside].mean())
        if not s > 0:
            raise PhiDomainError(f"mean predicted sigma must be positive, got {s}")
        dx = ex[evaluated] - cx
        dy = ey[evaluated] - cy
        d2 = dx * dx + dy * dy
        phi = np.exp(-d2 / (2.0 * s * s))
        p = np.clip(phi, EPSILON, 1.0 - EPSILON)
        total += float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
        if not with_grad:
            continue
        dbdphi = -y / p + (1.0 - y) / (1.0 - p)
        dbdphi[(phi < EPSILON) | (phi > 1.0 - EPSILON)] = 0.0
        g = dbdphi / (count * evaluated.size)
        ax = g * phi * (-dx / (s * s))
        ay = g * phi * (-dy / (s * s))
        grad_x[evaluated] += ax
        grad_y[evaluated] += ay
        if static:
            grad_x[inside] -= ax.sum() / inside.size
            grad_y[inside] -= ay.sum() / inside.size
        grad_s[inside] += float(np.sum(g * phi * d2 / s**3)) / inside.size
    return total / count, (grad_x, grad_y, grad_s)


def maskcentroid_loss(
    pred_offsets: FieldGrid,
    pred_sigma: FieldGrid,
    scene: SceneAnnotation,
    cfg: Optional[EncodeConfig] = None,
    skeleton: Optional[SkeletonSpec] = None,
) -> float:
    """BCE between the Gaussian margin of predicted embeddings and membership.

    Each instance is scored over its own pixels plus an equal number of the
    nearest background pixels within 2R; the result averages instances.
    """
    cfg = (cfg or EncodeConfig()).resolved()
    value, _ = _maskcentroid_pass(
        pred_offsets, pred_sigma, scene, cfg, skeleton or SkeletonSpec.coco(), with_grad=False
    )
    return value


def maskcentroid_loss_grad(
    pred_offsets: FieldGrid,
    pred_sigma: FieldGrid,
    scene: SceneAnnotation,
    cfg: Optional[EncodeConfig] = None,
    skeleton: Optional[SkeletonSpec] = None,
) -> tuple[FieldGrid, FieldGrid]:
    """Gradients with respect to the offset grid and the sigma grid.

    When both arguments are the same grid, add the two results.
    """
    cfg = (cfg or EncodeConfig()).resolved()
    _, (gx, gy, gs) = _maskcentroid_pass(
        pred_offsets, pred_sigma, scene, cfg, skeleton or SkeletonSpec.coco(), with_grad=True
    )
    shape = pred_offsets.shape
    off = np.zeros(pred_offsets.data.shape)
    off[pred_offsets.index(MC_OFF_X)] = gx.reshape(shape)
    off[pred_offsets.index(MC_OFF_Y)] = gy.reshape(shape)
    sig = np.zeros(pred_sigma.data.shape)
    sig[pred_sigma.index(MC_SIGMA)] = gs.reshape(shape)
    return FieldGrid(pred_offsets.channels, off), FieldGrid(pred_sigma.channels, sig)


# ---------- combined ----------
def combined_loss(
    preds: EncodedFields,
    scene: SceneAnnotation,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
    targets: Optional[EncodedFields] = None,
    skeleton: Optional[SkeletonSpec] = None,
    cfg: Optional[EncodeConfig] = None,
) -> LossReport:
    """Weighted sum of the three losses of ``preds`` against ``targets``.

    Targets are encoded from ``scene`` when not given; a zero weight skips
    its term.
    """
    weights = _check_weights(weights)
    skeleton = skeleton or SkeletonSpec.coco()
    cfg = (cfg or EncodeConfig()).resolved()
    targets = targets or encode_scene(scene, skeleton, cfg)
    terms = [0.0, 0.0, 0.0]
    if weights[0]:
        terms[0] = heatmap_loss(preds.heatmaps, targets.heatmaps)
    if weights[1]:
        weight = keycentroid_weights(scene, skeleton, cfg)
        terms[1] = keycentroid_loss(preds.keycentroid, targets.keycentroid, weight)
    if weights[2]:
        terms[2] = maskcentroid_loss(preds.maskcentroid, preds.maskcentroid, scene, cfg, skeleton)
    report = LossReport.combine(terms, weights)
    LOGGER.info("combined loss %.6g (terms %s)", report.value, terms)
    return report


# ---------- finite differences ----------
def numeric_gradient(loss_fn: Callable[[FieldGrid], float], grid: FieldGrid, step: float = 1e-4) -> FieldGrid:
    """Central differences (f(x+h) - f(x-h)) / 2h per element, in float64."""
    if not step > 0:
        raise ConfigError(f"step must be positive, got {step}")
    base = grid.data.astype(np.float64)
    work = base.copy()
    grad = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        original = base[index]
        work[index] = original + step
        upper = loss_fn(FieldGrid(grid.channels, work))
        work[index] = original - step
        lower = loss_fn(FieldGrid(grid.channels, work))
        work[index] = original
        grad[index] = (upper - lower) / (2.0 * step)
    return FieldGrid(grid.channels, grad)
