"""
Synthetic talking-sprite corpus

Every sample pairs seeded audio (amplitude-modulated sinusoids after a silent
lead-in frame) with a sprite face: solid background, a circular head drifting
on a slow 2-D sinusoid and a dark mouth rectangle whose height is
round(h_max · envelope(f)). Audio-visual sync is therefore known exactly.
"""

import asyncio
import audioop
import csv
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .audio_features import Waveform, read_wav, write_wav
from .errors import ContractError, DataError
from .latent_codec import VideoClip, read_mask, read_video, write_mask, write_video
from .training import RunConfig, TrainItem, prepare_item

logger = logging.getLogger(__name__)

DEFAULT_RES = 32
DEFAULT_FRAMES = 33
DEFAULT_FPS = 25.0
DEFAULT_SAMPLE_RATE = 16000
H_MAX = 10
HEAD_RADIUS_FRACTION = 0.375
MOUTH_WIDTH = 10
MOUTH_TOP_OFFSET = -2  # rows relative to the head centre
DRIFT_AMPLITUDE = 1.0
DRIFT_PERIOD_FRAMES = 48.0
TONE_HZ = 400.0
AUDIO_MODES = ("speech", "silence", "tone")
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["index", "seed", "split", "video", "audio", "mask"]


@dataclass
class ToySample:
    waveform: Waveform
    video: VideoClip
    mouth_mask: np.ndarray
    mouth_heights: np.ndarray
    envelope: np.ndarray
    identity: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    @property
    def mouth_region(self) -> Tuple[int, int, int, int]:
        """(row0, row1, col0, col1) box covering every mouth position, inside the face"""
        return tuple(self.identity["mouth_region"])


def envelope(w: Waveform, fps: float = DEFAULT_FPS) -> np.ndarray:
    """Per-frame loudness in [0, 1]

    RMS over each video-frame window, divided by the running maximum so far,
    then a causal mean over the last 3 frames.
    """
    window = w.samples_per_frame(fps)
    count = len(w.samples) // window
    pcm = w.to_pcm16()
    rms = np.array([audioop.rms(pcm[f * window:(f + 1) * window].tobytes(), 2) for f in range(count)], dtype=np.float64)

    running = np.maximum.accumulate(rms) if count else rms
    normalized = np.divide(rms, running, out=np.zeros_like(rms), where=running > 0)
    smoothed = np.array([normalized[max(0, f - 2):f + 1].mean() for f in range(count)])
    return np.clip(smoothed, 0.0, 1.0)


def _speech_audio(rng: np.random.Generator, samples: int, sample_rate: int, lead_in: int) -> np.ndarray:
    t = np.arange(samples) / sample_rate
    carriers = np.zeros(samples)
    for _ in range(3):
        carriers += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * rng.uniform(150.0, 1800.0) * t + rng.uniform(0, 2 * np.pi))
    syllable = np.maximum(0.0, np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))) ** 2
    phrase = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi))
    audio = carriers * syllable * phrase
    audio[:lead_in] = 0.0
    peak = np.max(np.abs(audio))
    return audio * (0.9 / peak) if peak > 0 else audio


def synth_sample(
    seed: int,
    frames: int = DEFAULT_FRAMES,
    fps: float = DEFAULT_FPS,
    res: int = DEFAULT_RES,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    r_f: int = 4,
    h_max: int = H_MAX,
    audio_mode: str = "speech",
    drift: float = DRIFT_AMPLITUDE,
) -> ToySample:
    """Deterministic sample for a seed; frames must be 1 + k·r_f"""
    if frames < 1 or (frames - 1) % r_f:
        raise ContractError(f"frames={frames} is not congruent to 1 mod r_f={r_f}")
    if audio_mode not in AUDIO_MODES:
        raise ContractError(f"unknown audio mode '{audio_mode}', expected one of {AUDIO_MODES}")

    rng = np.random.Generator(np.random.Philox(seed))
    window = Waveform(np.zeros(1), sample_rate).samples_per_frame(fps)
    samples = frames * window

    if audio_mode == "silence":
        audio = np.zeros(samples)
    elif audio_mode == "tone":
        audio = np.sin(2 * np.pi * TONE_HZ * np.arange(samples) / sample_rate) * (32767.0 / 32768.0)
    else:
        audio = _speech_audio(rng, samples, sample_rate, lead_in=window)
    waveform = Waveform(audio.astype(np.float32), sample_rate)

    env = envelope(waveform, fps)
    heights = np.rint(h_max * env).astype(int)

    background = rng.uniform(0.0, 0.3, size=3)
    face = rng.uniform(0.6, 0.95, size=3)
    mouth = rng.uniform(0.02, 0.2, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    radius = int(round(HEAD_RADIUS_FRACTION * res))
    centre = res // 2

    rows, cols = np.mgrid[0:res, 0:res]
    video = np.empty((3, frames, res, res), dtype=np.float32)
    mask = np.zeros((frames, res, res), dtype=np.float32)
    for f in range(frames):
        cy = centre + int(np.rint(drift * np.sin(2 * np.pi * f / DRIFT_PERIOD_FRAMES + phase[0])))
        cx = centre + int(np.rint(drift * np.sin(2 * np.pi * f / DRIFT_PERIOD_FRAMES + phase[1])))
        head = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
        mouth_rect = (
            (rows >= cy + MOUTH_TOP_OFFSET)
            & (rows < cy + MOUTH_TOP_OFFSET + heights[f])
            & (cols >= cx - MOUTH_WIDTH // 2)
            & (cols < cx + MOUTH_WIDTH - MOUTH_WIDTH // 2)
        )
        for c in range(3):
            plane = np.where(head, face[c], background[c])
            video[c, f] = np.where(mouth_rect, mouth[c], plane)
        mask[f] = mouth_rect

    margin = int(np.ceil(drift))
    region = (
        centre + MOUTH_TOP_OFFSET - margin,
        centre + MOUTH_TOP_OFFSET + h_max + margin,
        centre - MOUTH_WIDTH // 2 - margin,
        centre + MOUTH_WIDTH - MOUTH_WIDTH // 2 + margin,
    )
    identity = {
        "background": background.tolist(),
        "face": face.tolist(),
        "mouth": mouth.tolist(),
        "drift_phase": phase.tolist(),
        "head_radius": radius,
        "mouth_region": list(region),
    }
    return ToySample(
        waveform=waveform,
        video=VideoClip(video, fps=fps),
        mouth_mask=mask,
        mouth_heights=heights,
        envelope=env,
        identity=identity,
        seed=seed,
    )


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Corpus on disk
# ---------------------------------------------------------------------------

def _write_sample(out_dir: str, index: int, seed: int, split: str, frames: int, fps: float, res: int, r_f: int) -> Dict[str, Any]:
    sample = synth_sample(seed, frames=frames, fps=fps, res=res, r_f=r_f)
    stem = f"sample_{index:05d}"
    paths = {"video": f"{stem}.rapv", "audio": f"{stem}.wav", "mask": f"{stem}.rapm"}
    write_video(os.path.join(out_dir, paths["video"]), sample.video)
    write_wav(os.path.join(out_dir, paths["audio"]), sample.waveform)
    write_mask(os.path.join(out_dir, paths["mask"]), sample.mouth_mask, fps)
    return {"index": index, "seed": seed, "split": split, **paths}


async def _write_all(out_dir: str, jobs: List[Tuple[int, int, str]], workers: int, **geometry) -> List[Any]:
    semaphore = asyncio.Semaphore(max(1, workers))

    async def run(index: int, seed: int, split: str):
        async with semaphore:
            return await asyncio.to_thread(_write_sample, out_dir, index, seed, split, **geometry)

    return await asyncio.gather(*(run(*job) for job in jobs), return_exceptions=True)


def write_corpus(
    out_dir: str,
    count: int,
    seed: int,
    frames: int = DEFAULT_FRAMES,
    fps: float = DEFAULT_FPS,
    res: int = DEFAULT_RES,
    r_f: int = 4,
    heldout: int = 0,
    workers: int = 1,
) -> str:
    """Write count training + heldout evaluation samples and a manifest; returns the manifest path"""
    if count < 0 or heldout < 0 or count + heldout == 0:
        raise ContractError(f"need at least one sample, got count={count}, heldout={heldout}")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory: {e}", path=out_dir) from e

    jobs = [(i, sample_seed(seed, i), "train" if i < count else "heldout") for i in range(count + heldout)]
    geometry = {"frames": frames, "fps": fps, "res": res, "r_f": r_f}
    results = asyncio.run(_write_all(out_dir, jobs, workers, **geometry))

    failures = [r for r in results if isinstance(r, BaseException)]
    if failures:
        logger.error(f"{len(failures)}/{len(results)} samples failed, first: {failures[0]}")
        raise DataError(f"failed to write {len(failures)} samples: {failures[0]}", path=out_dir)

    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(sorted(results, key=lambda row: row["index"]))
    logger.info(f"Wrote {len(results)} samples ({count} train, {heldout} held-out) to {out_dir}")
    return manifest


@dataclass(frozen=True)
class ManifestRow:
    index: int
    seed: int
    split: str
    video: str
    audio: str
    mask: str


def read_manifest(data_dir: str) -> List[ManifestRow]:
    path = os.path.join(data_dir, MANIFEST_NAME)
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"cannot read manifest: {e}", path=path) from e
    try:
        return [
            ManifestRow(int(r["index"]), int(r["seed"]), r["split"], r["video"], r["audio"], r["mask"])
            for r in rows
        ]
    except (KeyError, ValueError) as e:
        raise DataError(f"malformed manifest row: {e}", path=path) from e


class ToyCorpus:
    """Lazily loaded manifest split; encoded items are cached per index"""

    def __init__(self, data_dir: str, run: RunConfig, split: str = "train", cache_size: int = 512):
        self.data_dir = data_dir
        self.run = run
        self.rows = [row for row in read_manifest(data_dir) if row.split == split]
        if not self.rows:
            raise DataError(f"manifest has no '{split}' samples", path=data_dir)
        self._load = lru_cache(maxsize=cache_size)(self._load_uncached)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i: int) -> TrainItem:
        return self._load(i)

    def raw(self, i: int) -> Tuple[VideoClip, Waveform, np.ndarray]:
        row = self.rows[i]
        video = read_video(os.path.join(self.data_dir, row.video))
        waveform = read_wav(os.path.join(self.data_dir, row.audio))
        mask = read_mask(os.path.join(self.data_dir, row.mask))
        return video, waveform, mask

    def _load_uncached(self, i: int) -> TrainItem:
        video, waveform, mask = self.raw(i)
        return prepare_item(video, waveform, mask, self.run)


def default_workers() -> Optional[int]:
    value = os.getenv("RAP_THREADS")
    return int(value) if value and value.isdigit() else os.cpu_count()
