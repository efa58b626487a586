"""
Streaming generation

Clips are denoised one after another with Euler steps from t=1 to t=0. For
every clip after the first, the first n latent frames are overwritten at each
timestep with the previous clip's last n frames at that same timestep, so only
a T × (C·n·H·W) cache crosses clip boundaries. Decoded clips after the first
drop their first r_f·(n-1)+1 frames before being appended to the stream.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np

from .audio_features import AudioTokens, Waveform, extract_features, frames_required
from .dit_model import ModelConfig, encode_audio, forward, null_audio
from .errors import ContractError, DataError
from .flow_matching import DEFAULT_CFG_SCALE, cfg_combine
from .latent_codec import CodecConfig, LatentClip, VideoClip, decode_latents, encode_reference
from .numerics import Tensor
from .training import RunConfig, load_run

logger = logging.getLogger(__name__)

TIMING_COLUMNS = ["clip", "ms_denoise", "ms_decode", "fps"]


@dataclass(frozen=True)
class StreamConfig:
    clips: int = 3
    steps: int = 16
    cfg_scale: float = DEFAULT_CFG_SCALE
    overlap: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.clips < 1:
            raise ContractError(f"clips must be >= 1, got {self.clips}")
        if self.steps < 1:
            raise ContractError(f"steps T must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ContractError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.overlap < 1:
            raise ContractError(f"overlap n must be >= 1, got {self.overlap}")


@dataclass
class DenoiseState:
    """Clip index (1-based) and the previous clip's last-n slice per timestep index k"""

    clip_index: int
    steps: int
    overlap: int
    overlap_cache: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def timesteps(self) -> List[float]:
        return timestep_grid(self.steps)

    def cache_floats(self) -> int:
        return int(sum(slab.size for slab in self.overlap_cache.values()))


class Denoiser(Protocol):
    config: ModelConfig

    def condition(self, features: Tensor, frames: int, start_latent: int) -> AudioTokens: ...

    def unconditional(self, frames: int) -> AudioTokens: ...

    def velocity(self, x_tilde: np.ndarray, t: float, audio: AudioTokens) -> np.ndarray: ...


class DiTDenoiser:
    """Trained parameters bound to their ModelConfig; read-only"""

    def __init__(self, params: Dict[str, Tensor], config: ModelConfig):
        self.params = params
        self.config = config

    def condition(self, features: Tensor, frames: int, start_latent: int) -> AudioTokens:
        return encode_audio(features, self.params, self.config, frames=frames, start_latent=start_latent)

    def unconditional(self, frames: int) -> AudioTokens:
        return null_audio(self.params, frames, self.config.r_f, self.config.audio_layers)

    def velocity(self, x_tilde: np.ndarray, t: float, audio: AudioTokens) -> np.ndarray:
        return forward(Tensor(x_tilde), t, audio, self.params, self.config).data


def timestep_grid(steps: int) -> List[float]:
    """t_T .. t_1 = 1, (T-1)/T, ..., 1/T; each Euler step moves by Δt = 1/T"""
    return [k / steps for k in range(steps, 0, -1)]


def clip_generator(seed: int, clip_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, clip_index])))


def guided_velocity(model: Denoiser, x_tilde: np.ndarray, t: float, audio: AudioTokens, s: float) -> np.ndarray:
    """CFG; s=1 runs the conditional pass only"""
    v_cond = model.velocity(x_tilde, t, audio)
    if s == 1.0:
        return v_cond
    v_uncond = model.velocity(x_tilde, t, model.unconditional(audio.frames))
    return cfg_combine(v_cond, v_uncond, s)


def denoise_clip(
    state: DenoiseState,
    model: Denoiser,
    x_ref: np.ndarray,
    c_a: AudioTokens,
    cfg: StreamConfig,
    trace: Optional[Callable[[int, np.ndarray], None]] = None,
) -> Tuple[LatentClip, Dict[int, np.ndarray]]:
    """Euler-integrate one clip from fresh noise; returns x̂₀ and the cache for the next clip

    `trace(k, x)` sees the latent at every timestep index k after the overlap
    overwrite and before the Euler step.
    """
    channels, frames = x_ref.shape[0], x_ref.shape[1]
    n = state.overlap
    if not 1 <= n < frames:
        raise ContractError(f"overlap n={n} must satisfy 1 <= n < F={frames}")

    x = clip_generator(cfg.seed, state.clip_index).standard_normal(x_ref.shape).astype(np.float32)
    dt = 1.0 / state.steps
    next_cache: Dict[int, np.ndarray] = {}
    for k, t in zip(range(state.steps, 0, -1), state.timesteps):
        if state.clip_index > 1:
            cached = state.overlap_cache.get(k)
            if cached is None:
                raise ContractError(f"overlap cache has no entry for t={t:.4f} (step {k}) of clip {state.clip_index - 1}")
            x[:, :n] = cached
        next_cache[k] = x[:, frames - n:].copy()
        if trace is not None:
            trace(k, x.copy())
        v = guided_velocity(model, np.concatenate([x, x_ref], axis=0), t, c_a, cfg.cfg_scale)
        x = (x - dt * v).astype(np.float32)

    logger.debug(f"clip {state.clip_index}: latent std {x.std():.4f} over {channels}×{frames} latents")
    return LatentClip(x, static_head=True), next_cache


def dropped_frames(clip_index: int, r_f: int, n: int) -> int:
    return 0 if clip_index == 1 else r_f * (n - 1) + 1


def trim_and_decode(x0: LatentClip, clip_index: int, r_f: int, n: int, p: int = 8, fps: float = 25.0) -> VideoClip:
    """Decode; clips after the first drop the frames already emitted by their predecessor"""
    video = decode_latents(LatentClip(x0.latents, static_head=True), p=p, r_f=r_f, fps=fps)
    drop = dropped_frames(clip_index, r_f, n)
    return VideoClip(video.frames[:, drop:], fps=fps) if drop else video


def stream_length(clips: int, frames: int, r_f: int, n: int) -> int:
    clip_frames = 1 + r_f * (frames - 1)
    return clip_frames + (clips - 1) * (clip_frames - (r_f * (n - 1) + 1))


@dataclass
class ClipTiming:
    clip: int
    ms_denoise: float
    ms_decode: float
    fps: float
    frames: int = 0

    def row(self) -> List[str]:
        return [str(self.clip), f"{self.ms_denoise:.3f}", f"{self.ms_decode:.3f}", f"{self.fps:.3f}"]


def generate_stream(
    ref_image: np.ndarray,
    waveform: Waveform,
    model: Denoiser,
    stream_cfg: StreamConfig,
    codec: CodecConfig,
    on_clip: Optional[Callable[[int, VideoClip], None]] = None,
) -> Tuple[VideoClip, List[ClipTiming]]:
    """Generate N clips conditioned on the reference image and audio

    Raises:
        DataError: the audio is shorter than the N clips require
    """
    mcfg = model.config
    frames, n, r_f = mcfg.frames, stream_cfg.overlap, codec.r_f
    if not 1 <= n < frames:
        raise ContractError(f"overlap n={n} must satisfy 1 <= n < F={frames}")
    advance = frames - n

    needed = frames_required(frames, r_f, start_latent=(stream_cfg.clips - 1) * advance)
    available = waveform.frame_count(codec.fps)
    if available < needed:
        raise DataError(
            f"audio underrun: {stream_cfg.clips} clips need {needed / codec.fps:.2f}s ({needed} frames), "
            f"audio has {waveform.duration:.2f}s ({available} frames)"
        )
    features, _ = extract_features(waveform, fps=codec.fps, bands=mcfg.audio_bands, layers=mcfg.audio_layers, frames=needed)
    x_ref = encode_reference(ref_image, frames, p=codec.patch, r_f=r_f)

    state = DenoiseState(clip_index=1, steps=stream_cfg.steps, overlap=n)
    pieces: List[np.ndarray] = []
    timings: List[ClipTiming] = []
    for i in range(1, stream_cfg.clips + 1):
        state.clip_index = i
        start = time.perf_counter()
        c_a = model.condition(features, frames=frames, start_latent=(i - 1) * advance)
        x0, state.overlap_cache = denoise_clip(state, model, x_ref, c_a, stream_cfg)
        denoised = time.perf_counter()
        video = trim_and_decode(x0, i, r_f, n, p=codec.patch, fps=codec.fps)
        decoded = time.perf_counter()

        elapsed = decoded - start
        timing = ClipTiming(
            clip=i,
            ms_denoise=(denoised - start) * 1000.0,
            ms_decode=(decoded - denoised) * 1000.0,
            fps=video.length / elapsed if elapsed > 0 else float("inf"),
            frames=video.length,
        )
        timings.append(timing)
        logger.info(f"clip {i}/{stream_cfg.clips}: {video.length} frames, denoise {timing.ms_denoise:.1f} ms, decode {timing.ms_decode:.1f} ms, {timing.fps:.1f} fps")
        pieces.append(video.frames)
        if on_clip is not None:
            on_clip(i, video)

    return VideoClip(np.concatenate(pieces, axis=1), fps=codec.fps), timings


def write_timings_csv(path: str, timings: List[ClipTiming]) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(TIMING_COLUMNS)
            writer.writerows(t.row() for t in timings)
    except OSError as e:
        raise DataError(f"cannot write timing CSV: {e}", path=str(path)) from e


def clip_boundaries(clips: int, frames: int, r_f: int, n: int) -> List[int]:
    """Index of the first frame of every clip after the first in the assembled stream"""
    first = 1 + r_f * (frames - 1)
    stride = first - (r_f * (n - 1) + 1)
    return [first + k * stride for k in range(clips - 1)]


def load_denoiser(path: str) -> Tuple[RunConfig, DiTDenoiser]:
    run, params, _ = load_run(path)
    logger.info(f"Loaded model from {path}: D={run.model.dim}, L={run.model.layers}, F={run.model.frames}")
    return run, DiTDenoiser(params, run.model)
