"""Decode throughput measurement."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .config import DecodeConfig, EncodeConfig, SynthConfig
from .decoder import STAGES, decode
from .encoder import encode_scene
from .errors import ConfigError, InvariantError
from .models import DecodedInstance
from .synth import generate_scene

LOGGER = logging.getLogger(__name__)


@dataclass
class BenchReport:
    width: int
    height: int
    instances: int
    threads: int
    runs: int
    stage_ms: dict[str, dict[str, float]]
    total_ms: dict[str, float]
    fps: float
    rows: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "canvas": [self.width, self.height],
            "instances": self.instances,
            "threads": self.threads,
            "runs": self.runs,
            "stage_ms": self.stage_ms,
            "total_ms": self.total_ms,
            "fps": self.fps,
        }


def _summary(samples_ms: np.ndarray) -> dict[str, float]:
    return {
        "median": float(np.median(samples_ms)),
        "p95": float(np.percentile(samples_ms, 95)),
    }


def _same_outputs(a: list[DecodedInstance], b: list[DecodedInstance]) -> bool:
    return len(a) == len(b) and all(x.same_as(y) for x, y in zip(a, b))


def bench_decode(
    scene_cfg: SynthConfig,
    decode_cfg: DecodeConfig,
    runs: int,
    encode_cfg: Optional[EncodeConfig] = None,
    threads: int = 1,
    warmup: int = 5,
    progress_cb: Optional[Callable[[float, Optional[str]], None]] = None,
) -> BenchReport:
    """Time ``decode`` on one synthetic scene.

    Every timed run is compared against an untimed reference decode; any
    difference raises InvariantError.
    """
    if runs < 10:
        raise ConfigError(f"runs must be >= 10, got {runs}")
    if threads < 1 or warmup < 0:
        raise ConfigError("threads must be >= 1 and warmup >= 0")
    encode_cfg = (encode_cfg or EncodeConfig()).resolved()
    scene = generate_scene(scene_cfg)
    fields = encode_scene(scene, cfg=encode_cfg)
    args = (fields.heatmaps, fields.keycentroid, fields.maskcentroid)

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        reference = decode(*args, cfg=decode_cfg, executor=executor)
        for _ in range(warmup):
            decode(*args, cfg=decode_cfg, executor=executor)

        stage_samples = {stage: np.zeros(runs) for stage in STAGES}
        totals = np.zeros(runs)
        rows = []
        for run in range(runs):
            timings: dict[str, float] = {}
            start = time.perf_counter()
            out = decode(*args, cfg=decode_cfg, executor=executor, timings=timings)
            totals[run] = (time.perf_counter() - start) * 1000.0
            if not _same_outputs(out, reference):
                raise InvariantError(f"decode output changed on timed run {run}")
            row = {"run": run, "total_ms": totals[run]}
            for stage in STAGES:
                stage_samples[stage][run] = timings[stage] * 1000.0
                row[f"{stage}_ms"] = stage_samples[stage][run]
            rows.append(row)
            if progress_cb:
                progress_cb((run + 1) / runs, f"Timed {run + 1} of {runs} runs")
    finally:
        if executor is not None:
            executor.shutdown(wait=True)

    total = _summary(totals)
    report = BenchReport(
        width=scene.width,
        height=scene.height,
        instances=len(reference),
        threads=threads,
        runs=runs,
        stage_ms={stage: _summary(stage_samples[stage]) for stage in STAGES},
        total_ms=total,
        fps=1000.0 / total["median"] if total["median"] > 0 else float("inf"),
        rows=rows,
    )
    LOGGER.info(
        "bench %dx%d, %d instances: median %.2f ms, %.1f FPS",
        report.width,
        report.height,
        report.instances,
        total["median"],
        report.fps,
    )
    return report


def compare_to_baseline(
    report: BenchReport, baseline: Mapping[str, Any], tolerance: float = 1.5
) -> tuple[bool, float]:
    """Slowdown ratio against a pinned ``BenchReport.to_dict()`` and whether it is within tolerance."""
    if not tolerance >= 1.0:
        raise ConfigError(f"tolerance must be >= 1, got {tolerance}")
    pinned = float(baseline["total_ms"]["median"])
    ratio = report.total_ms["median"] / pinned if pinned > 0 else float("inf")
    ok = ratio <= tolerance
    if not ok:
        LOGGER.warning("decode is %.2fx slower than the pinned baseline", ratio)
    return ok, ratio
