"""Tests for motion, seam, sync and drift metrics, the throughput bench and CSV/PGM output"""

import csv

import numpy as np
import pytest
from PIL import Image

from app.audio_features import Waveform
from app.dit_model import init_params
from app.errors import ContractError, DataError
from app.inference import DiTDenoiser, StreamConfig
from app.latent_codec import VideoClip
from app.metrics import (
    boundary_discontinuity,
    drift_curve,
    export_heatmap_pgm,
    mask_region,
    motion_heatmap,
    series_correlation,
    sync_correlation,
    throughput_bench,
    write_metrics_csv,
)
from app.toy_dataset import synth_sample
from tests.conftest import philox


def _ramp(frames: int, res: int = 4) -> VideoClip:
    """Uniform brightening: every step adds the same amount everywhere"""
    levels = np.linspace(0.0, 0.8, frames, dtype=np.float32)
    return VideoClip(np.broadcast_to(levels[None, :, None, None], (3, frames, res, res)).copy(), fps=25.0)


# Motion heatmap
@pytest.mark.unit
def test_static_video_has_no_motion():
    """Test a static clip gives an all-zero heatmap"""
    v = VideoClip(np.full((3, 5, 4, 4), 0.3, dtype=np.float32), fps=25.0)
    assert not motion_heatmap(v).any()


@pytest.mark.unit
def test_blinking_pixel_accumulates():
    """Test one pixel toggling every frame collects (T-1)·|Δ| and nothing else"""
    frames = np.zeros((3, 6, 4, 4), dtype=np.float32)
    frames[:, 1::2, 1, 2] = 0.5
    heat = motion_heatmap(VideoClip(frames, fps=25.0))
    assert heat[1, 2] == pytest.approx(5 * 0.5)
    heat[1, 2] = 0.0
    assert not heat.any()


@pytest.mark.unit
def test_heatmap_needs_two_frames():
    """Test a single frame is a contract error"""
    with pytest.raises(ContractError):
        motion_heatmap(VideoClip(np.zeros((3, 1, 2, 2)), fps=25.0))


@pytest.mark.unit
def test_toy_motion_concentrates_in_mouth(toy_sample):
    """Test the mask region moves more than the background on a generated sample"""
    heat = motion_heatmap(toy_sample.video)
    mouth = toy_sample.mouth_mask.max(axis=0) > 0
    assert heat[mouth].mean() > heat[~mouth].mean()


# Seams
@pytest.mark.unit
def test_uniform_motion_is_seamless():
    """Test a linear ramp scores 1.0 at any boundary"""
    assert boundary_discontinuity(_ramp(9), [4]) == pytest.approx(1.0)
    assert boundary_discontinuity(_ramp(9), [3, 6]) == pytest.approx(1.0)


@pytest.mark.unit
def test_hard_cut_scores_high():
    """Test a cut inserted into a slow ramp dominates the ratio"""
    v = _ramp(9)
    v.frames[:, 5:] += 0.5
    assert boundary_discontinuity(v, [5]) > 5.0


@pytest.mark.unit
def test_boundaries_validated():
    """Test empty or out-of-range boundaries are contract errors"""
    with pytest.raises(ContractError):
        boundary_discontinuity(_ramp(5), [])
    with pytest.raises(ContractError):
        boundary_discontinuity(_ramp(5), [5])


# Sync
@pytest.mark.unit
def test_ground_truth_sync():
    """Test the generator's own pairing scores at least 0.95"""
    sample = synth_sample(7, frames=33, drift=0.0)
    corr, degenerate = sync_correlation(sample.video, sample.waveform, sample.mouth_region)
    assert not degenerate
    assert corr >= 0.95, f"Ground-truth sync {corr:.3f}"


@pytest.mark.unit
@pytest.mark.parametrize("seed", range(8))
def test_ground_truth_sync_with_head_drift(seed):
    """Test the generator's pairing still scores at least 0.95 while the head drifts"""
    sample = synth_sample(seed)
    corr, degenerate = sync_correlation(sample.video, sample.waveform, sample.mouth_region)
    assert not degenerate, f"Seed {seed} gave a degenerate series"
    assert corr >= 0.95, f"Seed {seed}: ground-truth sync {corr:.3f} under drift"


@pytest.mark.unit
def test_silent_static_is_degenerate():
    """Test silent audio against a static video is flagged and reports 0"""
    v = VideoClip(np.zeros((3, 5, 8, 8), dtype=np.float32), fps=25.0)
    corr, degenerate = sync_correlation(v, Waveform(np.zeros(640 * 5), 16000), (2, 6, 2, 6))
    assert degenerate and corr == 0.0


@pytest.mark.unit
def test_series_correlation_affine_invariant(rng):
    """Test a series against itself is 1 and affine rescaling does not change r"""
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    assert series_correlation(a, a)[0] == pytest.approx(1.0)
    assert series_correlation(3.0 * a + 2.0, b)[0] == pytest.approx(series_correlation(a, b)[0])
    assert series_correlation(a, -0.5 * b + 1.0)[0] == pytest.approx(-series_correlation(a, b)[0])


@pytest.mark.unit
def test_sync_region_must_fit():
    """Test a region outside the frame is a contract error"""
    v = VideoClip(np.zeros((3, 5, 8, 8), dtype=np.float32), fps=25.0)
    with pytest.raises(ContractError):
        sync_correlation(v, Waveform(np.zeros(640 * 5), 16000), (4, 12, 0, 4))


@pytest.mark.unit
def test_mask_region_box(toy_sample):
    """Test the mask bounding box lies inside the sample's mouth region"""
    r0, r1, c0, c1 = mask_region(toy_sample.mouth_mask)
    R0, R1, C0, C1 = toy_sample.mouth_region
    assert R0 <= r0 < r1 <= R1 and C0 <= c0 < c1 <= C1
    with pytest.raises(DataError):
        mask_region(np.zeros((2, 4, 4)))


# Drift
@pytest.mark.unit
def test_repeated_clips_do_not_drift():
    """Test identical clips give an all-zero curve"""
    clip = philox(1).random((3, 4, 4, 4)).astype(np.float32)
    stream = VideoClip(np.concatenate([clip] * 3, axis=1), fps=25.0)
    assert drift_curve(stream, 4) == [0.0, 0.0, 0.0]


@pytest.mark.unit
def test_brightening_stream_drifts_monotonically():
    """Test a linearly brightening stream gives a strictly increasing curve"""
    curve = drift_curve(_ramp(20), 4)
    assert len(curve) == 5
    assert curve[0] == 0.0
    assert all(b > a for a, b in zip(curve, curve[1:]))


@pytest.mark.unit
def test_drift_needs_two_clips():
    """Test a stream shorter than two clips is a contract error"""
    with pytest.raises(ContractError):
        drift_curve(_ramp(5), 4)


# Throughput
@pytest.mark.integration
def test_throughput_report_fields(tiny_model, tiny_codec):
    """Test the bench reports latents/s, frames/s and ms/step over at least three runs"""
    model = DiTDenoiser(init_params(tiny_model, philox(0)), tiny_model)
    report = throughput_bench(model, StreamConfig(clips=2, steps=1, cfg_scale=1.0, overlap=1), tiny_codec, runs=1)
    for key in ("latents_per_s", "frames_per_s", "ms_per_step"):
        assert report[key] > 0, f"{key} missing or non-positive"
    assert report["runs"] == 3
    assert report["machine"]["cpus"]


# Output
@pytest.mark.unit
def test_heatmap_pgm_export(tmp_path):
    """Test the PGM is 8-bit with the peak at 255"""
    heat = np.array([[0.0, 1.0], [2.0, 4.0]])
    path = tmp_path / "heat.pgm"
    export_heatmap_pgm(heat, str(path))
    with Image.open(path) as img:
        assert img.mode == "L"
        pixels = np.asarray(img)
    assert pixels.tolist() == [[0, 64], [128, 255]]


@pytest.mark.unit
def test_metrics_csv(tmp_path):
    """Test rows are written under the given columns"""
    path = tmp_path / "m.csv"
    write_metrics_csv(str(path), [{"sync": 0.5, "drift_max": 0.1, "extra": 1}], columns=["sync", "drift_max"])
    with open(path, newline="") as f:
        assert list(csv.reader(f)) == [["sync", "drift_max"], ["0.5", "0.1"]]
    with pytest.raises(ContractError):
        write_metrics_csv(str(path), [])
