"""Shared evaluation of a trained denoiser on held-out toy streams"""

import logging
import os
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional

import numpy as np

from ..audio_features import frames_required
from ..errors import ContractError
from ..inference import Denoiser, StreamConfig, clip_boundaries, dropped_frames, generate_stream
from ..latent_codec import CodecConfig
from ..metrics import boundary_discontinuity, drift_curve, sync_correlation
from ..toy_dataset import read_manifest, sample_seed, synth_sample
from ..training import RunConfig

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["sync", "boundary_ratio", "drift_max", "fps"]


@dataclass
class AblationContext:
    """Everything an ablation needs besides its own row list"""

    run: RunConfig
    data_dir: str
    ckpt_dir: str
    stream: StreamConfig
    eval_samples: int = 4
    eval_seed: int = 1234
    ckpt: Optional[str] = None
    progress: bool = False

    def checkpoint_path(self, name: str) -> str:
        return os.path.join(self.ckpt_dir, f"{name}.rapc")

    def with_stream(self, **changes) -> "AblationContext":
        return replace(self, stream=replace(self.stream, **changes))


def evaluation_seeds(ctx: AblationContext) -> List[int]:
    """Held-out manifest seeds when present, otherwise seeds derived from eval_seed"""
    seeds: List[int] = []
    manifest = os.path.join(ctx.data_dir, "manifest.csv")
    if os.path.exists(manifest):
        seeds = [row.seed for row in read_manifest(ctx.data_dir) if row.split == "heldout"]
    if not seeds:
        seeds = [sample_seed(ctx.eval_seed, k) for k in range(ctx.eval_samples)]
    return seeds[: ctx.eval_samples]


def evaluate_stream(model: Denoiser, codec: CodecConfig, stream: StreamConfig, seeds: List[int]) -> Dict[str, Any]:
    """Mean sync correlation, seam ratio, max drift and throughput over seeded toy streams"""
    if not seeds:
        raise ContractError("no evaluation samples")
    cfg = model.config
    n = stream.overlap
    needed = frames_required(cfg.frames, codec.r_f, start_latent=(stream.clips - 1) * (cfg.frames - n))
    clip_len = 1 + codec.r_f * (cfg.frames - 1) - dropped_frames(2, codec.r_f, n)
    boundaries = clip_boundaries(stream.clips, cfg.frames, codec.r_f, n)

    syncs, ratios, drifts, fps = [], [], [], []
    for seed in seeds:
        sample = synth_sample(seed, frames=needed, fps=codec.fps, res=codec.res, sample_rate=codec.sample_rate, r_f=codec.r_f)
        video, timings = generate_stream(sample.video.frames[:, 0], sample.waveform, model, stream, codec)
        sync, _ = sync_correlation(video, sample.waveform, sample.mouth_region)
        syncs.append(sync)
        if boundaries:
            ratios.append(boundary_discontinuity(video, boundaries))
            drifts.append(max(drift_curve(video, clip_len)))
        total_ms = sum(t.ms_denoise + t.ms_decode for t in timings)
        fps.append(1000.0 * video.length / total_ms if total_ms > 0 else float("inf"))

    result = {
        "sync": float(np.mean(syncs)),
        "boundary_ratio": float(np.mean(ratios)) if ratios else 1.0,
        "drift_max": float(np.max(drifts)) if drifts else 0.0,
        "fps": float(np.median(fps)),
    }
    logger.info(f"evaluated {len(seeds)} streams: " + ", ".join(f"{k}={v:.4f}" for k, v in result.items()))
    return result
