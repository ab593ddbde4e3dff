import pytest

from centroid_codec.ablation import (
    OCCLUSION_SCENES,
    AblationReport,
    centroid_ablation,
    keycentroid_ablation,
    noise_robustness,
)
from centroid_codec.config import SynthConfig

SCENES = SynthConfig(width=256, height=256, persons_min=1, persons_max=3, rng_seed=13)


def test_report_rows_and_gap():
    report = AblationReport("centroid", "mask_map", {"static": 0.4, "dynamic": 0.9}, "static", "dynamic", 10)
    assert report.gap == pytest.approx(0.5)
    rows = report.rows()
    assert [r["variant"] for r in rows] == ["static", "dynamic", "gap"]
    assert report.to_dict()["gap"] == pytest.approx(0.5)


def test_small_keycentroid_study_has_both_variants():
    seen = []
    report = keycentroid_ablation(SCENES, count=2, progress_cb=lambda f, _: seen.append(f))
    assert set(report.values) == {"heatmap_only", "keycentroid"}
    assert all(0.0 <= v <= 1.0 for v in report.values.values())
    assert report.scenes == 2
    assert seen[-1] == pytest.approx(1.0)


def test_small_robustness_study_reports_ratio():
    report = noise_robustness(SCENES, count=2, noise_sigma=0.05)
    assert report.values["noiseless"] == pytest.approx(1.0)
    assert report.extras["ratio"] == pytest.approx(report.values["noisy"])


@pytest.mark.slow
def test_keycentroid_voting_beats_heatmap_peaks(pins):
    report = keycentroid_ablation(SynthConfig(rng_seed=3), count=100, noise_sigma=0.05)
    assert report.gap > 0.0
    assert report.gap == pytest.approx(pins.value("keycentroid_gap", report.gap), abs=0.02)


@pytest.mark.slow
def test_dynamic_centroid_beats_static_under_occlusion(pins):
    report = centroid_ablation(OCCLUSION_SCENES, count=100)
    assert report.gap > 0.0
    assert report.gap == pytest.approx(pins.value("centroid_gap", report.gap), abs=0.02)


@pytest.mark.slow
def test_noisy_recall_stays_close_to_noiseless(pins):
    report = noise_robustness(SynthConfig(rng_seed=4), count=100, noise_sigma=0.05)
    ratio = report.extras["ratio"]
    assert ratio >= 0.95
    assert ratio == pytest.approx(pins.value("noise_recall_ratio", ratio), abs=0.02)
