"""Tests for Euler denoising, overlap inheritance, trimming and streaming assembly"""

import csv

import numpy as np
import pytest

from app.audio_features import AudioTokens
from app.dit_model import init_params
from app.errors import ContractError, DataError
from app.inference import (
    TIMING_COLUMNS,
    DenoiseState,
    DiTDenoiser,
    StreamConfig,
    clip_boundaries,
    clip_generator,
    denoise_clip,
    dropped_frames,
    generate_stream,
    guided_velocity,
    stream_length,
    timestep_grid,
    trim_and_decode,
    write_timings_csv,
)
from app.latent_codec import LatentClip
from app.metrics import boundary_discontinuity, drift_curve
from app.numerics import Tensor
from tests.conftest import philox, random_clip, random_waveform


class CountingDenoiser:
    """Constant-velocity stand-in that records every call"""

    def __init__(self, config, value: float = 0.0):
        self.config = config
        self.value = value
        self.calls = []

    def _tokens(self, frames: int, fill: float) -> AudioTokens:
        cfg = self.config
        rows = frames * cfg.r_f * cfg.audio_layers
        return AudioTokens(Tensor(np.full((rows, cfg.dim), fill)), frames, cfg.r_f, cfg.audio_layers)

    def condition(self, features, frames, start_latent):
        return self._tokens(frames, 1.0)

    def unconditional(self, frames):
        return self._tokens(frames, 0.0)

    def velocity(self, x_tilde, t, audio):
        self.calls.append((t, bool(audio.tokens.data.any())))
        channels = x_tilde.shape[0] // 2
        return np.full((channels,) + x_tilde.shape[1:], self.value, dtype=np.float32)


def _reference(cfg, seed: int = 0) -> np.ndarray:
    return philox(seed).standard_normal((cfg.latent_channels, cfg.frames, cfg.height, cfg.width)).astype(np.float32)


@pytest.fixture
def tiny_denoiser(tiny_model):
    return DiTDenoiser(init_params(tiny_model, philox(0), zero_init=False), tiny_model)


# Timestep grid and guidance
@pytest.mark.unit
def test_timestep_grid_uniform():
    """Test T=4 visits 1, 0.75, 0.5, 0.25"""
    assert timestep_grid(4) == [1.0, 0.75, 0.5, 0.25]


@pytest.mark.unit
def test_zero_velocity_keeps_noise(tiny_model):
    """Test T=1 with a zero model returns the initial noise"""
    model = CountingDenoiser(tiny_model)
    x_ref = _reference(tiny_model)
    x0, _ = denoise_clip(DenoiseState(1, 1, 1), model, x_ref, model.condition(None, 3, 0), StreamConfig(steps=1, cfg_scale=3.0, overlap=1, seed=5))
    expected = clip_generator(5, 1).standard_normal(x_ref.shape).astype(np.float32)
    assert np.array_equal(x0.latents, expected)


@pytest.mark.unit
def test_euler_steps_traverse_unit_interval(tiny_model):
    """Test a constant unit velocity moves the latent by exactly -1 over T steps"""
    model = CountingDenoiser(tiny_model, value=1.0)
    x_ref = _reference(tiny_model)
    cfg = StreamConfig(steps=4, cfg_scale=1.0, overlap=1, seed=2)
    x0, _ = denoise_clip(DenoiseState(1, 4, 1), model, x_ref, model.condition(None, 3, 0), cfg)
    noise = clip_generator(2, 1).standard_normal(x_ref.shape).astype(np.float32)
    assert np.allclose(x0.latents, noise - 1.0, atol=1e-5)
    assert [t for t, _ in model.calls] == [1.0, 0.75, 0.5, 0.25]


@pytest.mark.unit
@pytest.mark.parametrize("s, passes", [(1.0, 1), (5.0, 2), (0.0, 2)])
def test_guidance_pass_count(tiny_model, s, passes):
    """Test s=1 runs only the conditional pass"""
    model = CountingDenoiser(tiny_model)
    x_tilde = np.zeros((2 * tiny_model.latent_channels, 3, 2, 2), dtype=np.float32)
    guided_velocity(model, x_tilde, 0.5, model.condition(None, 3, 0), s)
    assert len(model.calls) == passes
    assert model.calls[0][1], "The first pass is conditional"


@pytest.mark.unit
def test_single_pass_matches_two_pass_at_unit_scale(tiny_denoiser):
    """Test the s=1 shortcut equals the combined two-pass result"""
    cfg = tiny_denoiser.config
    g = philox(9)
    x_tilde = g.standard_normal((2 * cfg.latent_channels, cfg.frames, cfg.height, cfg.width)).astype(np.float32)
    audio = AudioTokens(Tensor(g.standard_normal((cfg.frames * cfg.r_f * cfg.audio_layers, cfg.dim))), cfg.frames, cfg.r_f, cfg.audio_layers)
    v_cond = tiny_denoiser.velocity(x_tilde, 0.4, audio)
    v_uncond = tiny_denoiser.velocity(x_tilde, 0.4, tiny_denoiser.unconditional(cfg.frames))
    combined = v_uncond + 1.0 * (v_cond - v_uncond)
    assert np.allclose(guided_velocity(tiny_denoiser, x_tilde, 0.4, audio, 1.0), combined, atol=1e-6)


# Overlap inheritance
@pytest.mark.unit
def test_overlap_equality_every_timestep(tiny_denoiser):
    """Test clip 2's first n latents equal clip 1's last n at every timestep, bit-exact"""
    cfg = tiny_denoiser.config
    stream = StreamConfig(steps=3, cfg_scale=2.0, overlap=1, seed=4)
    x_ref = _reference(cfg)
    audio = AudioTokens(Tensor(philox(3).standard_normal((cfg.frames * cfg.r_f * cfg.audio_layers, cfg.dim))), cfg.frames, cfg.r_f, cfg.audio_layers)

    first, second = {}, {}
    state = DenoiseState(1, 3, 1)
    _, state.overlap_cache = denoise_clip(state, tiny_denoiser, x_ref, audio, stream, trace=lambda k, x: first.__setitem__(k, x))
    state.clip_index = 2
    denoise_clip(state, tiny_denoiser, x_ref, audio, stream, trace=lambda k, x: second.__setitem__(k, x))

    assert sorted(first) == sorted(second) == [1, 2, 3]
    for k in first:
        assert first[k][:, -1:].tobytes() == second[k][:, :1].tobytes(), f"Overlap differs at step {k}"


@pytest.mark.unit
def test_overlap_cache_size(tiny_model):
    """Test the cache holds exactly T·C·n·H·W floats"""
    model = CountingDenoiser(tiny_model)
    state = DenoiseState(1, 5, 2)
    _, state.overlap_cache = denoise_clip(state, model, _reference(tiny_model), model.condition(None, 3, 0), StreamConfig(steps=5, overlap=2))
    assert len(state.overlap_cache) == 5
    assert state.cache_floats() == 5 * tiny_model.latent_channels * 2 * tiny_model.height * tiny_model.width


@pytest.mark.unit
def test_missing_cache_entry(tiny_model):
    """Test a clip after the first without a cache is a contract error naming t"""
    model = CountingDenoiser(tiny_model)
    with pytest.raises(ContractError) as excinfo:
        denoise_clip(DenoiseState(2, 2, 1), model, _reference(tiny_model), model.condition(None, 3, 0), StreamConfig(steps=2, overlap=1))
    assert "t=1.0000" in str(excinfo.value)


@pytest.mark.unit
def test_overlap_must_be_below_frame_count(tiny_model):
    """Test n >= F is refused"""
    model = CountingDenoiser(tiny_model)
    with pytest.raises(ContractError):
        denoise_clip(DenoiseState(1, 2, 3), model, _reference(tiny_model), model.condition(None, 3, 0), StreamConfig(steps=2, overlap=3))


# Trimming and assembly
@pytest.mark.unit
def test_dropped_frame_counts():
    """Test r_f=8, n=3 drops 17 frames, n=1 drops 1 and clip 1 drops none"""
    assert dropped_frames(2, 8, 3) == 17
    assert dropped_frames(5, 4, 1) == 1
    assert dropped_frames(1, 8, 3) == 0


@pytest.mark.unit
def test_trim_and_decode_lengths():
    """Test F=9, r_f=4, n=2 emits 33 frames for clip 1 and 28 afterwards"""
    x0 = LatentClip(np.zeros((3 * 4 * 4, 9, 1, 1), dtype=np.float32))
    assert trim_and_decode(x0, 1, r_f=4, n=2, p=2).length == 33
    assert trim_and_decode(x0, 2, r_f=4, n=2, p=2).length == 28


@pytest.mark.unit
def test_stream_length_formula():
    """Test N=3, F=9, r_f=4, n=2 gives 33 + 28 + 28 = 89 frames with seams at 33 and 61"""
    assert stream_length(3, 9, 4, 2) == 89
    assert stream_length(1, 9, 4, 2) == 33
    assert clip_boundaries(3, 9, 4, 2) == [33, 61]


@pytest.mark.unit
def test_stream_config_validates():
    """Test T < 1 and s < 0 are refused"""
    with pytest.raises(ContractError):
        StreamConfig(steps=0)
    with pytest.raises(ContractError):
        StreamConfig(cfg_scale=-1.0)


@pytest.mark.integration
def test_generate_stream_length_and_determinism(tiny_denoiser, tiny_codec):
    """Test three clips on the tiny codec give 5 + 4 + 4 frames, identical for a repeated seed"""
    ref = random_clip(0, tiny_codec).frames[:, 0]
    audio = random_waveform(1, tiny_codec, 13)
    cfg = StreamConfig(clips=3, steps=2, cfg_scale=2.0, overlap=1, seed=7)

    seen = []
    video, timings = generate_stream(ref, audio, tiny_denoiser, cfg, tiny_codec, on_clip=lambda i, v: seen.append((i, v.length)))
    assert video.length == stream_length(3, 3, 2, 1) == 13
    assert seen == [(1, 5), (2, 4), (3, 4)]
    assert [t.clip for t in timings] == [1, 2, 3]

    again, _ = generate_stream(ref, audio, tiny_denoiser, cfg, tiny_codec)
    assert video.frames.tobytes() == again.frames.tobytes(), "Same seed should give bit-identical video"

    other, _ = generate_stream(ref, audio, tiny_denoiser, StreamConfig(clips=3, steps=2, cfg_scale=2.0, overlap=1, seed=8), tiny_codec)
    assert not np.array_equal(other.frames, video.frames)


@pytest.mark.integration
def test_single_clip_is_untrimmed(tiny_denoiser, tiny_codec):
    """Test N=1 emits one full clip"""
    ref = random_clip(0, tiny_codec).frames[:, 0]
    video, _ = generate_stream(ref, random_waveform(1, tiny_codec, 5), tiny_denoiser, StreamConfig(clips=1, steps=1, overlap=1), tiny_codec)
    assert video.length == tiny_codec.frames


@pytest.mark.unit
def test_audio_underrun_reports_durations(tiny_denoiser, tiny_codec):
    """Test too-short audio raises DataError with required and available durations"""
    ref = random_clip(0, tiny_codec).frames[:, 0]
    with pytest.raises(DataError) as excinfo:
        generate_stream(ref, random_waveform(1, tiny_codec, 5), tiny_denoiser, StreamConfig(clips=3, steps=1, overlap=1), tiny_codec)
    message = str(excinfo.value)
    assert "0.52s" in message and "0.20s" in message, message


@pytest.mark.unit
def test_timings_csv(tmp_path):
    """Test the timing CSV header and row format"""
    from app.inference import ClipTiming

    path = tmp_path / "timings.csv"
    write_timings_csv(str(path), [ClipTiming(clip=1, ms_denoise=12.5, ms_decode=1.25, fps=40.0)])
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows == [TIMING_COLUMNS, ["1", "12.500", "1.250", "40.000"]]


@pytest.mark.slow
@pytest.mark.integration
@pytest.mark.parametrize("n", [1, 2])
def test_twenty_clip_stream_metrics(tiny_denoiser, tiny_codec, n):
    """Test a 20-clip stream yields one drift value per clip and seams at every clip_boundaries index"""
    ref = random_clip(0, tiny_codec).frames[:, 0]
    audio = random_waveform(2, tiny_codec, stream_length(20, 3, 2, 1))
    video, timings = generate_stream(ref, audio, tiny_denoiser, StreamConfig(clips=20, steps=2, overlap=n, seed=3), tiny_codec)
    assert len(timings) == 20
    assert video.length == stream_length(20, 3, 2, n)

    boundaries = clip_boundaries(20, 3, 2, n)
    assert len(boundaries) == 19 and boundaries[-1] < video.length
    ratio = boundary_discontinuity(video, boundaries)
    assert np.isfinite(ratio) and ratio > 0.0, f"Seam ratio {ratio} at n={n}"

    clip_len = 2 * (3 - n)
    curve = drift_curve(video, clip_len)
    assert len(curve) == video.length // clip_len >= 20, f"Expected a drift value per clip, got {len(curve)}"
    assert curve[0] == 0.0 and all(np.isfinite(curve))
