"""
Audio ingestion and conditioning tokens

WAV in, per-video-frame log filterbank energies out, then a learned 2-layer
MLP projects every (frame, layer) feature to one model-dimension token and
align_to_latents lays the tokens out per latent frame.
"""

import logging
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydub import AudioSegment

from .errors import ContractError, DataError, FormatError, ShapeError
from .numerics import Tensor, add_lastdim, get_activation, matmul, reshape, slice_axis, take_rows

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FPS = 25.0
DEFAULT_BANDS = 16
DEFAULT_LAYERS = 2
LOG_FLOOR = 1e-8
PCM_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """Mono audio, samples in [-1, 1]"""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ContractError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def samples_per_frame(self, fps: float) -> int:
        """Integer analysis window per video frame"""
        if fps <= 0:
            raise ContractError(f"fps must be positive, got {fps}")
        window = self.sample_rate / fps
        if abs(window - round(window)) > 1e-9:
            raise ContractError(f"sample_rate/fps = {window} is not an integer window")
        return int(round(window))

    def frame_count(self, fps: float) -> int:
        """Number of complete video-frame windows"""
        return len(self.samples) // self.samples_per_frame(fps)

    def to_pcm16(self) -> np.ndarray:
        return np.clip(np.round(self.samples.astype(np.float64) * PCM_SCALE), -32768, 32767).astype("<i2")


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path: str) -> Waveform:
    """Read a RIFF/WAVE PCM 16-bit mono file

    Parsed with struct rather than pydub: pydub decodes through ffmpeg and
    converts channels and widths silently, while a bad file here must raise
    FormatError naming the header field that is wrong.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read WAV file: {e}", path=str(path)) from e

    if len(raw) < 12:
        raise FormatError("file shorter than RIFF header", field="riff", path=str(path))
    riff, _, wave = struct.unpack_from("<4sI4s", raw, 0)
    if riff != b"RIFF":
        raise FormatError(f"expected b'RIFF', found {riff!r}", field="riff", path=str(path))
    if wave != b"WAVE":
        raise FormatError(f"expected b'WAVE', found {wave!r}", field="wave", path=str(path))

    fmt: Optional[Tuple[int, int, int, int]] = None
    data: Optional[bytes] = None
    offset = 12
    while offset + 8 <= len(raw):
        chunk_id, chunk_size = struct.unpack_from("<4sI", raw, offset)
        body = raw[offset + 8: offset + 8 + chunk_size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise FormatError("fmt chunk too short", field="fmt", path=str(path))
            audio_format, channels, sample_rate, _, _, bits = struct.unpack_from("<HHIIHH", body, 0)
            fmt = (audio_format, channels, sample_rate, bits)
        elif chunk_id == b"data":
            data = body
        offset += 8 + chunk_size + (chunk_size & 1)

    if fmt is None:
        raise FormatError("missing fmt chunk", field="fmt", path=str(path))
    audio_format, channels, sample_rate, bits = fmt
    if audio_format != 1:
        raise FormatError(f"format code {audio_format} is not PCM (1)", field="audio_format", path=str(path))
    if channels != 1:
        raise FormatError(f"{channels} channels, expected mono", field="channels", path=str(path))
    if bits != 16:
        raise FormatError(f"{bits} bits per sample, expected 16", field="bits_per_sample", path=str(path))
    if data is None:
        raise FormatError("missing data chunk", field="data", path=str(path))

    pcm = np.frombuffer(data[: len(data) - (len(data) % 2)], dtype="<i2")
    return Waveform(samples=pcm.astype(np.float32) / PCM_SCALE, sample_rate=sample_rate)


def write_wav(path: str, waveform: Waveform) -> None:
    """Write PCM s16le mono via pydub"""
    segment = AudioSegment(
        data=waveform.to_pcm16().tobytes(),
        sample_width=2,
        frame_rate=waveform.sample_rate,
        channels=1,
    )
    try:
        segment.export(str(path), format="wav")
    except OSError as e:
        raise DataError(f"cannot write WAV file: {e}", path=str(path)) from e


# ---------------------------------------------------------------------------
# Filterbank features
# ---------------------------------------------------------------------------

def triangular_filterbank(bands: int, window: int, sample_rate: int) -> np.ndarray:
    """[bands × bins] triangular filters evenly spaced over 0..Nyquist"""
    freqs = np.fft.rfftfreq(window, d=1.0 / sample_rate)
    edges = np.linspace(0.0, sample_rate / 2.0, bands + 2)
    bank = np.zeros((bands, len(freqs)), dtype=np.float64)
    for b in range(bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def causal_moving_average(x: np.ndarray, width: int) -> np.ndarray:
    """Mean of the last `width` rows (fewer at the start) along axis 0"""
    if width <= 1:
        return x.copy()
    csum = np.cumsum(x, axis=0, dtype=np.float64)
    out = np.empty(x.shape, dtype=np.float64)
    for f in range(x.shape[0]):
        lo = f - width
        total = csum[f] - (csum[lo] if lo >= 0 else 0.0)
        out[f] = total / min(f + 1, width)
    return out


def extract_features(
    w: Waveform,
    fps: float = DEFAULT_FPS,
    bands: int = DEFAULT_BANDS,
    layers: int = DEFAULT_LAYERS,
    frames: Optional[int] = None,
) -> Tuple[Tensor, Dict[str, Any]]:
    """Per-video-frame log filterbank energies, shape [T_frames × N × B]

    Layer 1 is the raw band energies; layer n >= 2 is a causal moving average
    of width 2n-1 over frames. When `frames` exceeds the audio, the tail is
    padded with silence and meta["padded"] is set.

    Returns:
        tuple: (features, meta)
    """
    if bands < 1 or layers < 1:
        raise ContractError(f"bands and layers must be >= 1, got bands={bands}, layers={layers}")
    window = w.samples_per_frame(fps)
    available = len(w.samples) // window
    total_frames = frames if frames is not None else int(np.ceil(len(w.samples) / window))

    needed = total_frames * window
    samples = w.samples.astype(np.float64)
    padded_samples = max(0, needed - len(samples))
    if padded_samples:
        samples = np.concatenate([samples, np.zeros(padded_samples)])
        logger.debug(f"Padded {padded_samples} samples of silence to reach {total_frames} frames")
    samples = samples[:needed]

    framed = samples.reshape(total_frames, window) * np.hanning(window)
    power = np.abs(np.fft.rfft(framed, axis=1)) ** 2
    energies = np.log(power @ triangular_filterbank(bands, window, w.sample_rate).T + LOG_FLOOR)

    stacked = np.stack([causal_moving_average(energies, 2 * n + 1) for n in range(layers)], axis=1)
    meta = {
        "frames": total_frames,
        "available_frames": available,
        "padded": padded_samples > 0,
        "padded_samples": padded_samples,
        "samples_per_frame": window,
    }
    return Tensor(stacked.astype(np.float32)), meta


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------

def project_tokens(feats: Tensor, proj: Dict[str, Tensor], activation: str = "silu", prefix: str = "audio") -> Tensor:
    """Frame-major, layer-minor tokens [(T_frames·N) × D] through the learned MLP"""
    if feats.ndim != 3:
        raise ShapeError(f"project_tokens: expected [T × N × B] features, got {feats.shape}")
    frames, layers, bands = feats.shape
    flat = reshape(feats, (frames * layers, bands))
    hidden = get_activation(activation)(add_lastdim(matmul(flat, proj[f"{prefix}.w1"]), proj[f"{prefix}.b1"]))
    return add_lastdim(matmul(hidden, proj[f"{prefix}.w2"]), proj[f"{prefix}.b2"])


@dataclass
class AudioTokens:
    """Conditioning sequence c_a laid out as F contiguous partitions of r_f·N tokens"""

    tokens: Tensor
    frames: int
    r_f: int
    layers: int

    def __post_init__(self):
        expected = self.frames * self.r_f * self.layers
        if self.tokens.ndim != 2 or self.tokens.shape[0] != expected:
            raise ShapeError(
                f"AudioTokens: expected {expected} tokens (F={self.frames}, r_f={self.r_f}, N={self.layers}), got {self.tokens.shape}"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def partition_size(self) -> int:
        return self.r_f * self.layers

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def partition(self, j: int) -> Tensor:
        """Tokens of latent frame j (0-based)"""
        if not 0 <= j < self.frames:
            raise ContractError(f"partition {j} out of range for {self.frames} latent frames")
        size = self.partition_size
        return slice_axis(self.tokens, 0, j * size, (j + 1) * size)

    def partitions(self) -> List[Tensor]:
        return [self.partition(j) for j in range(self.frames)]

    def window(self, start: int, count: int) -> "AudioTokens":
        if start < 0 or count < 1 or start + count > self.frames:
            raise ContractError(f"window [{start}, {start + count}) outside {self.frames} partitions")
        size = self.partition_size
        return AudioTokens(slice_axis(self.tokens, 0, start * size, (start + count) * size), count, self.r_f, self.layers)


def latent_timeline(frames: int, r_f: int, start_latent: int = 0) -> List[int]:
    """Video-frame index behind every audio slot of F latent frames

    The first latent of a clip that starts at global latent 0 is the static
    head: its r_f slots all map to video frame 0. Global latent g >= 1 maps to
    video frames 1 + (g-1)·r_f .. g·r_f.
    """
    timeline: List[int] = []
    for j in range(frames):
        g = start_latent + j
        if g == 0:
            timeline.extend([0] * r_f)
        else:
            timeline.extend(range(1 + (g - 1) * r_f, 1 + g * r_f))
    return timeline


def frames_required(frames: int, r_f: int, start_latent: int = 0) -> int:
    """Video frames of audio needed to condition F latents starting at start_latent"""
    return 1 + r_f * (start_latent + frames - 1)


def align_to_latents(tokens: Tensor, frames: int, r_f: int, layers: int, start_latent: int = 0) -> AudioTokens:
    """Gather frame tokens into per-latent partitions

    Partition j holds the tokens of exactly the r_f video frames mapped by
    latent frame j (see latent_timeline).
    """
    if start_latent < 0 or frames < 1:
        raise ContractError(f"invalid alignment request F={frames}, start_latent={start_latent}")
    available_frames = tokens.shape[0] // layers
    timeline = latent_timeline(frames, r_f, start_latent)
    if timeline[-1] >= available_frames:
        needed = frames * r_f * layers
        raise ContractError(
            f"F·r_f·N = {needed} tokens need video frame {timeline[-1]}, only {available_frames} frames of tokens available"
        )
    rows = [frame * layers + layer for frame in timeline for layer in range(layers)]
    return AudioTokens(take_rows(tokens, rows), frames, r_f, layers)
