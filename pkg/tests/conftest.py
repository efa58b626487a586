"""Pytest configuration and shared fixtures for tests"""

import os
from pathlib import Path

import numpy as np
import pytest

from app.audio_features import Waveform
from app.latent_codec import CodecConfig, VideoClip
from app.main import main
from app.toy_dataset import synth_sample
from app.training import RunConfig, TrainConfig, prepare_item


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# Geometry
@pytest.fixture
def tiny_codec():
    """4×4 px, 5 frames, p=2, r_f=2 -> 3 latent frames of 24 channels on a 2×2 grid"""
    return CodecConfig(patch=2, r_f=2, res=4, fps=25.0, frames=5, sample_rate=1600)


@pytest.fixture
def tiny_run(tiny_codec):
    """Two-layer D=8 denoiser on the tiny codec, trained a handful of steps"""
    model = RunConfig.derive_model(
        tiny_codec, dim=8, layers=2, heads=2, ffn_dim=16, audio_bands=4, audio_hidden=8
    )
    train = TrainConfig(steps=3, seed=0, lr=1e-2, window=2, batch=2, checkpoint_every=0, log_every=0)
    return RunConfig(codec=tiny_codec, model=model, train=train)


@pytest.fixture
def tiny_model(tiny_run):
    return tiny_run.model


@pytest.fixture
def rng():
    """Seeded Philox generator"""
    return philox(1234)


# Data
def random_clip(seed: int, codec: CodecConfig) -> VideoClip:
    return VideoClip(philox(seed).random((3, codec.frames, codec.res, codec.res)).astype(np.float32), fps=codec.fps)


def random_waveform(seed: int, codec: CodecConfig, frames: int) -> Waveform:
    samples = frames * int(codec.sample_rate / codec.fps)
    return Waveform(philox(seed).uniform(-0.5, 0.5, samples).astype(np.float32), codec.sample_rate)


@pytest.fixture
def tiny_items(tiny_run):
    """Three training items of random pixels and noise audio on the tiny codec"""
    codec = tiny_run.codec
    items = []
    for seed in range(3):
        video = random_clip(seed, codec)
        waveform = random_waveform(100 + seed, codec, codec.frames)
        mask = np.zeros((codec.frames, codec.res, codec.res), dtype=np.float32)
        mask[:, 2:, 1:3] = 1.0
        items.append(prepare_item(video, waveform, mask, tiny_run))
    return items


@pytest.fixture
def toy_sample():
    """Default-geometry sprite (32×32 px), 9 frames, seed 7"""
    return synth_sample(7, frames=9)


@pytest.fixture
def run_dir(tmp_path):
    """Temporary directory for checkpoints, CSVs and corpora"""
    path = tmp_path / "run"
    path.mkdir()
    return path


# Desk-scale runs
DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.conf"
ACCEPTANCE_ENV = "RAP_ACCEPTANCE_DIR"


@pytest.fixture(scope="session")
def acceptance_dir():
    """Persistent workspace with the 2000 + 200 sample desk corpus; set RAP_ACCEPTANCE_DIR to enable"""
    root = os.environ.get(ACCEPTANCE_ENV)
    if not root:
        pytest.skip(f"desk-scale training runs need {ACCEPTANCE_ENV}")
    root = Path(root)
    corpus = root / "corpus"
    if not (corpus / "manifest.csv").exists():
        assert main(["synth-data", "--out", str(corpus), "--count", "2000", "--heldout", "200", "--seed", "0"]) == 0
    (root / "ckpts").mkdir(parents=True, exist_ok=True)
    return root
