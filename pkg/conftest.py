"""Shared pytest fixtures."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from centroid_codec.config import SynthConfig
from centroid_codec.models import PersonAnnotation, SceneAnnotation, SkeletonSpec
from centroid_codec.reports import json_text

CANVAS = 160
PINNED_DIR = Path(__file__).parent / "tests" / "data"


def block_person(instance_id: int, left: int, top: int = 20, width: int = 40, height: int = 100) -> PersonAnnotation:
    """A rectangular person with all 17 keypoints on integer pixels inside the block."""
    mask = np.zeros((CANVAS, CANVAS), dtype=bool)
    mask[top:top + height, left:left + width] = True
    keypoints = np.array(
        [[left + 5 + (i % 4) * 8, top + 5 + (i // 4) * 20, 2] for i in range(17)],
        dtype=np.float64,
    )
    return PersonAnnotation(keypoints, mask, instance_id)


@pytest.fixture
def skeleton() -> SkeletonSpec:
    return SkeletonSpec.coco()


@pytest.fixture
def two_person_scene() -> SceneAnnotation:
    return SceneAnnotation(CANVAS, CANVAS, (block_person(1, 10), block_person(2, 100)))


@pytest.fixture
def small_synth_config() -> SynthConfig:
    return SynthConfig(width=128, height=128, persons_min=1, persons_max=1, rng_seed=3)


class Pins:
    """Reference values kept under tests/data.

    A missing entry is recorded from the current run and checked in; later
    runs compare against it. ``VC_REPIN=1`` re-records everything.
    """

    def __init__(self, root: Path, repin: bool) -> None:
        self.root = root
        self.repin = repin
        self.values_path = root / "baselines.json"

    def _values(self) -> dict[str, Any]:
        if not self.values_path.is_file():
            return {}
        return json.loads(self.values_path.read_text(encoding="utf-8"))

    def value(self, name: str, measured: Any) -> Any:
        values = self._values()
        if self.repin or name not in values:
            values[name] = measured
            self.root.mkdir(parents=True, exist_ok=True)
            self.values_path.write_text(json_text(values), encoding="utf-8")
        return values[name]

    def file(self, name: str, produced: Path) -> Path:
        golden = self.root / name
        if self.repin or not golden.is_file():
            self.root.mkdir(parents=True, exist_ok=True)
            golden.write_bytes(produced.read_bytes())
        return golden


@pytest.fixture
def pins() -> Pins:
    return Pins(PINNED_DIR, os.environ.get("VC_REPIN") == "1")
