"""
Desk-scale evaluation metrics

    motion_heatmap          accumulated inter-frame difference map
    boundary_discontinuity  clip-seam jump relative to ordinary frame motion
    sync_correlation        mouth-region change vs audio loudness (stands in for Sync-C)
    drift_curve             per-clip colour statistics vs the first clip (long-horizon stability)
    throughput_bench        wall-clock latents/s, frames/s and ms per Euler step
"""

import csv
import logging
import os
import platform
import statistics
import time
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .audio_features import Waveform, frames_required
from .errors import ContractError, DataError
from .inference import Denoiser, StreamConfig, generate_stream, stream_length
from .latent_codec import CodecConfig, VideoClip
from .toy_dataset import envelope, synth_sample

logger = logging.getLogger(__name__)

MIN_BENCH_RUNS = 3


def motion_heatmap(v: VideoClip) -> np.ndarray:
    """Σ_t |frame_{t+1} - frame_t|, channel-averaged, [H_px × W_px]"""
    if v.length < 2:
        raise ContractError(f"motion_heatmap needs at least 2 frames, got {v.length}")
    diffs = np.abs(np.diff(v.frames.astype(np.float64), axis=1))
    return diffs.mean(axis=0).sum(axis=0)


def _frame_l1(v: VideoClip, b: int) -> float:
    return float(np.abs(v.frames[:, b].astype(np.float64) - v.frames[:, b - 1]).sum())


def boundary_discontinuity(v: VideoClip, boundaries: Sequence[int]) -> float:
    """Mean ‖frame_b - frame_{b-1}‖₁ over boundaries / mean over all other transitions

    1.0 means a seam moves as much as any other frame step.
    """
    if not boundaries:
        raise ContractError("boundary_discontinuity needs at least one boundary")
    boundary_set = set(int(b) for b in boundaries)
    for b in boundary_set:
        if not 1 <= b < v.length:
            raise ContractError(f"boundary {b} is not an interior frame index of a {v.length}-frame video")

    seam = np.mean([_frame_l1(v, b) for b in sorted(boundary_set)])
    interior = [_frame_l1(v, b) for b in range(1, v.length) if b not in boundary_set]
    if not interior:
        raise ContractError("no interior transitions left to compare against")
    base = float(np.mean(interior))
    if base == 0.0:
        return 1.0 if seam == 0.0 else float("inf")
    return float(seam / base)


def _pearson(a: np.ndarray, b: np.ndarray) -> Tuple[float, bool]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0, True
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0)), False


def region_change(v: VideoClip, mouth_region: Tuple[int, int, int, int]) -> np.ndarray:
    """Per-frame mean |frame_f - frame_0| inside (row0, row1, col0, col1)"""
    r0, r1, c0, c1 = mouth_region
    if not (0 <= r0 < r1 <= v.height and 0 <= c0 < c1 <= v.width):
        raise ContractError(f"mouth region {mouth_region} outside {v.height}×{v.width} frame")
    crop = v.frames[:, :, r0:r1, c0:c1].astype(np.float64)
    return np.abs(crop - crop[:, :1]).mean(axis=(0, 2, 3))


def mask_region(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """Bounding box (row0, row1, col0, col1) of every pixel the [T × H × W] mask ever marks"""
    marked = np.asarray(mask).reshape(-1, *np.asarray(mask).shape[-2:]).max(axis=0) > 0.5
    if not marked.any():
        raise DataError("mouth mask marks no pixels")
    rows, cols = np.nonzero(marked)
    return int(rows.min()), int(rows.max()) + 1, int(cols.min()), int(cols.max()) + 1


def sync_correlation(v: VideoClip, w: Waveform, mouth_region: Tuple[int, int, int, int]) -> Tuple[float, bool]:
    """Pearson correlation of mouth-region change and the audio envelope

    Returns:
        tuple: (correlation in [-1, 1], degenerate); degenerate series give (0.0, True)
    """
    change = region_change(v, mouth_region)
    env = envelope(w, v.fps)
    count = min(len(change), len(env))
    value, degenerate = _pearson(change[:count], env[:count])
    if degenerate:
        logger.warning(f"sync_correlation: zero-variance series over {count} frames, reporting 0")
    return value, degenerate


def series_correlation(a: Sequence[float], b: Sequence[float]) -> Tuple[float, bool]:
    return _pearson(np.asarray(a), np.asarray(b))


def drift_curve(stream: VideoClip, clip_len: int) -> List[float]:
    """Per clip: mean |stats(clip) - stats(clip 1)| over per-channel mean and std"""
    if clip_len < 1:
        raise ContractError(f"clip_len must be >= 1, got {clip_len}")
    chunks = stream.length // clip_len
    if chunks < 2:
        raise ContractError(f"drift_curve needs at least 2 clips of {clip_len} frames, stream has {stream.length}")

    def stats(k: int) -> np.ndarray:
        chunk = stream.frames[:, k * clip_len:(k + 1) * clip_len].astype(np.float64)
        return np.concatenate([chunk.mean(axis=(1, 2, 3)), chunk.std(axis=(1, 2, 3))])

    first = stats(0)
    return [float(np.abs(stats(k) - first).mean()) for k in range(chunks)]


# ---------------------------------------------------------------------------
# Throughput
# ---------------------------------------------------------------------------

def machine_metadata() -> Dict[str, Any]:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpus": os.cpu_count(),
        "threads": os.getenv("RAP_THREADS", ""),
    }


def throughput_bench(model: Denoiser, stream_cfg: StreamConfig, codec: CodecConfig, runs: int = MIN_BENCH_RUNS, seed: int = 0) -> Dict[str, Any]:
    """Median wall-clock of `runs` streams after one warm-up stream"""
    runs = max(runs, MIN_BENCH_RUNS)
    cfg = model.config
    frames_needed = frames_required(cfg.frames, codec.r_f, start_latent=(stream_cfg.clips - 1) * (cfg.frames - stream_cfg.overlap))
    sample = synth_sample(seed, frames=frames_needed, fps=codec.fps, res=codec.res, sample_rate=codec.sample_rate, r_f=codec.r_f)
    ref = sample.video.frames[:, 0]

    generate_stream(ref, sample.waveform, model, stream_cfg, codec)
    durations = []
    for run in range(runs):
        start = time.perf_counter()
        generate_stream(ref, sample.waveform, model, stream_cfg, codec)
        durations.append(time.perf_counter() - start)
        logger.info(f"bench run {run + 1}/{runs}: {durations[-1]:.3f}s")

    median = statistics.median(durations)
    latents = stream_cfg.clips * cfg.frames
    frames = stream_length(stream_cfg.clips, cfg.frames, codec.r_f, stream_cfg.overlap)
    euler_steps = stream_cfg.clips * stream_cfg.steps
    return {
        "latents_per_s": latents / median,
        "frames_per_s": frames / median,
        "ms_per_step": 1000.0 * median / euler_steps,
        "median_s": median,
        "runs": runs,
        "spread": (max(durations) - min(durations)) / median if median > 0 else 0.0,
        "machine": machine_metadata(),
    }


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def export_heatmap_pgm(heatmap: np.ndarray, path: str) -> None:
    """8-bit grayscale, scaled so the maximum maps to 255"""
    peak = float(np.max(heatmap)) if heatmap.size else 0.0
    scaled = np.zeros(heatmap.shape) if peak <= 0 else heatmap / peak
    pixels = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(pixels, mode="L").save(path, format="PPM")
    except OSError as e:
        raise DataError(f"cannot write heatmap: {e}", path=str(path)) from e


def write_metrics_csv(path: str, rows: List[Dict[str, Any]], columns: Optional[List[str]] = None) -> None:
    if not rows:
        raise ContractError("no metric rows to write")
    columns = columns or list(rows[0].keys())
    try:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise DataError(f"cannot write metrics CSV: {e}", path=str(path)) from e
