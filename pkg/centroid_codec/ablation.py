"""Built-in comparison studies run by ``ablate``."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .config import DecodeConfig, EncodeConfig, SynthConfig
from .decoder import decode
from .encoder import encode_scene
from .metrics import average_precision
from .models import DecodedInstance, SceneAnnotation
from .synth import generate_corpus, make_occlusion_suite, perturb_fields

LOGGER = logging.getLogger(__name__)

ProgressCallback = Callable[[float, Optional[str]], None]

# synthetic occlusion scenes need at least two persons to entangle
OCCLUSION_SCENES = SynthConfig(persons_min=2, persons_max=3, min_visible_fraction=0.3)


@dataclass
class AblationReport:
    study: str
    metric: str
    values: dict[str, float]
    baseline: str
    improved: str
    scenes: int
    extras: dict[str, float] = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.values[self.improved] - self.values[self.baseline]

    def rows(self) -> list[dict]:
        out = [
            {"study": self.study, "variant": variant, "metric": self.metric, "value": value}
            for variant, value in self.values.items()
        ]
        out.extend(
            {"study": self.study, "variant": name, "metric": "extra", "value": value}
            for name, value in self.extras.items()
        )
        out.append({"study": self.study, "variant": "gap", "metric": self.metric, "value": self.gap})
        return out

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "metric": self.metric,
            "values": self.values,
            "baseline": self.baseline,
            "improved": self.improved,
            "gap": self.gap,
            "scenes": self.scenes,
            "extras": self.extras,
        }


def _noise_seed(rng_seed: int, index: int) -> int:
    return (rng_seed + (index << 32)) % 2**64


def _decode_corpus(
    scenes: list[SceneAnnotation],
    encode_cfg: EncodeConfig,
    decode_cfgs: dict[str, DecodeConfig],
    noise_sigma: float,
    rng_seed: int,
    progress_cb: Optional[ProgressCallback],
    label: str,
) -> dict[str, list[list[DecodedInstance]]]:
    detections: dict[str, list[list[DecodedInstance]]] = {name: [] for name in decode_cfgs}
    for index, scene in enumerate(scenes):
        fields = encode_scene(scene, cfg=encode_cfg)
        fields = perturb_fields(fields, noise_sigma, _noise_seed(rng_seed, index), encode_cfg)
        for name, cfg in decode_cfgs.items():
            detections[name].append(decode(fields.heatmaps, fields.keycentroid, fields.maskcentroid, cfg=cfg))
        if progress_cb:
            progress_cb((index + 1) / len(scenes), f"{label}: decoded {index + 1} of {len(scenes)} scenes")
    return detections


def keycentroid_ablation(
    scene_cfg: SynthConfig,
    count: int = 100,
    noise_sigma: float = 0.05,
    encode_cfg: Optional[EncodeConfig] = None,
    decode_cfg: Optional[DecodeConfig] = None,
    progress_cb: Optional[ProgressCallback] = None,
) -> AblationReport:
    """Keypoint mAP on noisy fields, with and without KeyCentroid voting."""
    encode_cfg = (encode_cfg or EncodeConfig()).resolved()
    base = decode_cfg or DecodeConfig.matching(encode_cfg)
    scenes = generate_corpus(scene_cfg, count)
    variants = {
        "heatmap_only": replace(base, use_keycentroid=False),
        "keycentroid": replace(base, use_keycentroid=True),
    }
    detections = _decode_corpus(
        scenes, encode_cfg, variants, noise_sigma, scene_cfg.rng_seed, progress_cb, "keycentroid"
    )
    values = {
        name: average_precision(dets, scenes, "oks").keypoint_ap.mean for name, dets in detections.items()
    }
    report = AblationReport("keycentroid", "keypoint_map", values, "heatmap_only", "keycentroid", count)
    LOGGER.info("keycentroid ablation: %s (gap %+.4f)", values, report.gap)
    return report


def centroid_ablation(
    scene_cfg: SynthConfig = OCCLUSION_SCENES,
    count: int = 100,
    encode_cfg: Optional[EncodeConfig] = None,
    decode_cfg: Optional[DecodeConfig] = None,
    progress_cb: Optional[ProgressCallback] = None,
) -> AblationReport:
    """Mask mAP of static and dynamic centroids on the occlusion suite."""
    encode_base = (encode_cfg or EncodeConfig()).resolved()
    decode_base = decode_cfg or DecodeConfig.matching(encode_base)
    scenes = make_occlusion_suite(scene_cfg, count)
    values = {}
    for mode in ("static", "dynamic"):
        mode_encode = replace(encode_base, centroid_mode=mode)
        detections = _decode_corpus(
            scenes,
            mode_encode,
            {mode: replace(decode_base, centroid_mode=mode)},
            0.0,
            scene_cfg.rng_seed,
            progress_cb,
            f"centroid/{mode}",
        )
        values[mode] = average_precision(detections[mode], scenes, "mask_iou").mask_ap.mean
    report = AblationReport("centroid", "mask_map", values, "static", "dynamic", count)
    LOGGER.info("centroid ablation: %s (gap %+.4f)", values, report.gap)
    return report


def noise_robustness(
    scene_cfg: SynthConfig,
    count: int = 100,
    noise_sigma: float = 0.05,
    oks_threshold: float = 0.75,
    encode_cfg: Optional[EncodeConfig] = None,
    progress_cb: Optional[ProgressCallback] = None,
) -> AblationReport:
    """Keypoint recall at one OKS threshold, noiseless against noisy fields."""
    encode_cfg = (encode_cfg or EncodeConfig()).resolved()
    decode_cfg = DecodeConfig.matching(encode_cfg)
    scenes = generate_corpus(scene_cfg, count)
    values = {}
    for name, sigma in (("noiseless", 0.0), ("noisy", noise_sigma)):
        detections = _decode_corpus(
            scenes, encode_cfg, {name: decode_cfg}, sigma, scene_cfg.rng_seed, progress_cb, name
        )
        result = average_precision(detections[name], scenes, "oks", thresholds=(oks_threshold,))
        values[name] = result.keypoint_ap.recall[oks_threshold]
    report = AblationReport("robustness", f"recall@{oks_threshold:.2f}", values, "noiseless", "noisy", count)
    report.extras["ratio"] = values["noisy"] / values["noiseless"] if values["noiseless"] else 0.0
    LOGGER.info("noise robustness: %s", values)
    return report
