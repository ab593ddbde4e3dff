"""Configuration dataclasses and their command-line mirrors."""
from __future__ import annotations

import argparse
import math
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Optional, Type, TypeVar

from .errors import ConfigError

DEFAULT_DISK_RADIUS = 32.0
DEFAULT_CANVAS = 401

# Documentation only: the schedule the fields were designed to be trained with.
TRAINING_CONSTANTS: Mapping[str, Any] = {
    "optimizer": "adam",
    "learning_rate": 1e-5,
    "batch_size": 4,
    "epochs": 400,
    "input_size": (DEFAULT_CANVAS, DEFAULT_CANVAS),
}

C = TypeVar("C")


@dataclass(frozen=True)
class EncodeConfig:
    disk_radius: float = field(
        default=DEFAULT_DISK_RADIUS,
        metadata={"help": "Keypoint disk radius R in pixels; also the offset normalisation unit."},
    )
    gaussian_denominator_mode: str = field(
        default="R_squared",
        metadata={
            "help": "Denominator of the keypoint Gaussian response: R^2 or R.",
            "choices": ("R_squared", "R_raw"),
        },
    )
    offset_normalization: bool = field(
        default=True,
        metadata={"help": "Divide KeyCentroid offsets by R."},
    )
    centroid_mode: str = field(
        default="dynamic",
        metadata={
            "help": "MaskCentroid target: geometric mask centroid or anchor keypoint.",
            "choices": ("static", "dynamic"),
        },
    )

    def validate(self) -> "EncodeConfig":
        _positive("disk_radius", self.disk_radius)
        _choice(self, "gaussian_denominator_mode")
        _choice(self, "centroid_mode")
        return self

    def resolved(self) -> "EncodeConfig":
        return self.validate()

    @property
    def offset_scale(self) -> float:
        return self.disk_radius if self.offset_normalization else 1.0


@dataclass(frozen=True)
class DecodeConfig:
    heatmap_threshold: float = field(
        default=0.01,
        metadata={"help": "Minimum heatmap probability for a pixel to cast a vote."},
    )
    nms_radius: Optional[float] = field(
        default=None,
        metadata={"help": "Suppression radius in pixels; defaults to R/2.", "type": float},
    )
    phi_threshold: float = field(
        default=0.5,
        metadata={"help": "Margin value a pixel must exceed to join an instance."},
    )
    min_instance_pixels: int = field(
        default=64,
        metadata={"help": "Clusters smaller than this are discarded and their pixels released."},
    )
    max_instances: int = field(
        default=30,
        metadata={"help": "Stop clustering after this many instances."},
    )
    candidate_score_threshold: float = field(
        default=0.1,
        metadata={"help": "Keypoint candidates scoring below this are dropped."},
    )
    min_peak_mass: float = field(
        default=1.0,
        metadata={"help": "Vote mass a candidate's 3x3 neighbourhood must gather; one full-probability voter."},
    )
    disk_radius: float = field(
        default=DEFAULT_DISK_RADIUS,
        metadata={"help": "Disk radius R the fields were encoded with."},
    )
    offset_normalization: bool = field(
        default=True,
        metadata={"help": "KeyCentroid offsets were divided by R at encode time."},
    )
    centroid_mode: str = field(
        default="dynamic",
        metadata={
            "help": "Anchor source: seed map peaks (static) or anchor keypoints (dynamic).",
            "choices": ("static", "dynamic"),
        },
    )
    use_keycentroid: bool = field(
        default=True,
        metadata={"help": "Aggregate KeyCentroid votes; off takes heatmap peaks directly."},
    )
    sigma_source: str = field(
        default="pixel",
        metadata={
            "help": "Sigma used in the margin test: each pixel's own or the anchor pixel's.",
            "choices": ("pixel", "anchor"),
        },
    )
    fallback_sigma: float = field(
        default=16.0,
        metadata={"help": "Sigma for pixels when neither the pixel nor its anchor carries one."},
    )
    anchor_refinement: int = field(
        default=3,
        metadata={"help": "Mean-shift steps moving each cluster centre onto its members' mean embedding."},
    )
    grouping_tolerance: Optional[float] = field(
        default=None,
        metadata={"help": "Distance a keypoint may sit outside its mask; defaults to R/4.", "type": float},
    )
    grouping_reach: Optional[float] = field(
        default=None,
        metadata={
            "help": "Distance allowed for keypoints hidden under another instance; defaults to R.",
            "type": float,
        },
    )
    grouping_reach_score: float = field(
        default=0.5,
        metadata={"help": "Score a candidate lying on one instance needs before a neighbour may take it."},
    )

    def resolved(self) -> "DecodeConfig":
        radius = self.disk_radius
        cfg = replace(
            self,
            nms_radius=radius / 2.0 if self.nms_radius is None else self.nms_radius,
            grouping_tolerance=radius / 4.0 if self.grouping_tolerance is None else self.grouping_tolerance,
            grouping_reach=radius if self.grouping_reach is None else self.grouping_reach,
        )
        return cfg.validate()

    def validate(self) -> "DecodeConfig":
        _positive("disk_radius", self.disk_radius)
        _positive("fallback_sigma", self.fallback_sigma)
        for name in ("nms_radius", "grouping_tolerance", "grouping_reach"):
            value = getattr(self, name)
            if value is not None:
                _positive(name, value)
        for name in ("heatmap_threshold", "phi_threshold", "candidate_score_threshold"):
            _unit_open(name, getattr(self, name))
        if self.min_instance_pixels < 1:
            raise ConfigError(f"min_instance_pixels must be >= 1, got {self.min_instance_pixels}")
        if self.max_instances < 1:
            raise ConfigError(f"max_instances must be >= 1, got {self.max_instances}")
        if not (self.min_peak_mass >= 0 and math.isfinite(self.min_peak_mass)):
            raise ConfigError(f"min_peak_mass must be a finite number >= 0, got {self.min_peak_mass}")
        if self.anchor_refinement < 0:
            raise ConfigError(f"anchor_refinement must be >= 0, got {self.anchor_refinement}")
        if not 0.0 <= self.grouping_reach_score <= 1.0:
            raise ConfigError(f"grouping_reach_score must lie in [0, 1], got {self.grouping_reach_score}")
        _choice(self, "centroid_mode")
        _choice(self, "sigma_source")
        return self

    @property
    def offset_scale(self) -> float:
        return self.disk_radius if self.offset_normalization else 1.0

    @classmethod
    def matching(cls, encode_cfg: EncodeConfig, **overrides: Any) -> "DecodeConfig":
        """Decode settings that invert fields written with ``encode_cfg``."""
        values = dict(
            disk_radius=encode_cfg.disk_radius,
            offset_normalization=encode_cfg.offset_normalization,
            centroid_mode=encode_cfg.centroid_mode,
        )
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class SynthConfig:
    width: int = field(default=DEFAULT_CANVAS, metadata={"help": "Canvas width in pixels."})
    height: int = field(default=DEFAULT_CANVAS, metadata={"help": "Canvas height in pixels."})
    persons_min: int = field(default=1, metadata={"help": "Fewest persons per scene."})
    persons_max: int = field(default=5, metadata={"help": "Most persons per scene."})
    overlap_target: float = field(
        default=0.3,
        metadata={"help": "Largest pairwise full-figure mask IoU accepted, in [0, 1)."},
    )
    limb_width_min: float = field(default=3.0, metadata={"help": "Smallest capsule radius in pixels."})
    limb_width_max: float = field(default=6.0, metadata={"help": "Largest capsule radius in pixels."})
    scale_min: float = field(default=0.8, metadata={"help": "Smallest template scale."})
    scale_max: float = field(default=1.1, metadata={"help": "Largest template scale."})
    rotation_max: float = field(
        default=0.35,
        metadata={"help": "Largest absolute global rotation in radians."},
    )
    limb_jitter: float = field(
        default=0.3,
        metadata={"help": "Largest absolute per-limb angle perturbation in radians."},
    )
    min_visible_fraction: float = field(
        default=0.4,
        metadata={"help": "Fraction of each figure that must stay unoccluded."},
    )
    min_keypoint_separation: float = field(
        default=20.0,
        metadata={"help": "Closest two persons' keypoints of the same slot may be."},
    )
    max_occluded_distance: float = field(
        default=24.0,
        metadata={"help": "Farthest an occluded keypoint may sit from its own visible mask."},
    )
    disk_radius: float = field(
        default=DEFAULT_DISK_RADIUS,
        metadata={"help": "Disk radius the decodability checks assume."},
    )
    max_attempts: int = field(
        default=1000,
        metadata={"help": "Rejected layouts tolerated before giving up."},
    )
    rng_seed: int = field(default=0, metadata={"help": "Seed of the counter-based generator."})

    def validate(self) -> "SynthConfig":
        if self.width < 64 or self.height < 64:
            raise ConfigError(f"canvas must be at least 64x64, got {self.width}x{self.height}")
        if not 1 <= self.persons_min <= self.persons_max:
            raise ConfigError(f"person range [{self.persons_min}, {self.persons_max}] is empty")
        if not 0.0 <= self.overlap_target < 1.0:
            raise ConfigError(f"overlap_target must be in [0, 1), got {self.overlap_target}")
        for low, high in (("limb_width_min", "limb_width_max"), ("scale_min", "scale_max")):
            lo, hi = getattr(self, low), getattr(self, high)
            if not 0 < lo <= hi:
                raise ConfigError(f"range {low}..{high} = [{lo}, {hi}] is empty or non-positive")
        if not 0.0 <= self.min_visible_fraction <= 1.0:
            raise ConfigError("min_visible_fraction must be in [0, 1]")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed must fit in 64 bits")
        return self

    def resolved(self) -> "SynthConfig":
        return self.validate()


@dataclass(frozen=True)
class BenchConfig:
    runs: int = field(default=50, metadata={"help": "Timed decode iterations (at least 10)."})
    warmup: int = field(default=5, metadata={"help": "Untimed iterations before timing."})
    threads: int = field(default=1, metadata={"help": "Worker threads for per-slot voting."})
    baseline_tolerance: float = field(
        default=1.5,
        metadata={"help": "Allowed slowdown factor against a pinned baseline."},
    )

    def validate(self) -> "BenchConfig":
        if self.runs < 10:
            raise ConfigError(f"runs must be >= 10, got {self.runs}")
        if self.warmup < 0 or self.threads < 1:
            raise ConfigError("warmup must be >= 0 and threads >= 1")
        _positive("baseline_tolerance", self.baseline_tolerance)
        return self

    def resolved(self) -> "BenchConfig":
        return self.validate()


# --- serialisation ---
def to_dict(cfg: Any) -> dict[str, Any]:
    return asdict(cfg)


def from_dict(cls: Type[C], values: Mapping[str, Any]) -> C:
    """Build ``cls`` from a manifest mapping; unknown keys are a ConfigError."""
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**dict(values))


# --- argparse mirrors ---
def flag_name(name: str, prefix: str = "") -> str:
    return "--" + (prefix + name).replace("_", "-")


def add_config_arguments(parser: argparse.ArgumentParser, cls: Type[Any], prefix: str = "") -> None:
    """Add one flag per dataclass field; dest is ``prefix + field name``."""
    group = parser.add_argument_group(cls.__name__)
    for f in fields(cls):
        default = f.default if f.default is not MISSING else None
        kwargs: dict[str, Any] = {
            "dest": prefix + f.name,
            "default": default,
            "help": f.metadata.get("help", ""),
        }
        if isinstance(default, bool):
            kwargs["action"] = argparse.BooleanOptionalAction
        else:
            kwargs["type"] = f.metadata.get("type", type(default))
            if "choices" in f.metadata:
                kwargs["choices"] = f.metadata["choices"]
        group.add_argument(flag_name(f.name, prefix), **kwargs)


def config_from_args(cls: Type[C], args: argparse.Namespace, prefix: str = "") -> C:
    values = {f.name: getattr(args, prefix + f.name) for f in fields(cls)}  # type: ignore[arg-type]
    return cls(**values)


# --- helpers ---
def _positive(name: str, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise ConfigError(f"{name} must be a positive finite number, got {value}")


def _unit_open(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ConfigError(f"{name} must lie in (0, 1), got {value}")


def _choice(cfg: Any, name: str) -> None:
    allowed = next(f.metadata["choices"] for f in fields(cfg) if f.name == name)
    value = getattr(cfg, name)
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
