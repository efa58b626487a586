"""Tests for the synthetic talking-sprite generator and the on-disk corpus"""

import numpy as np
import pytest

from app.audio_features import Waveform
from app.errors import ContractError, DataError
from app.latent_codec import CodecConfig
from app.metrics import series_correlation
from app.toy_dataset import (
    H_MAX,
    MANIFEST_NAME,
    MOUTH_WIDTH,
    ToyCorpus,
    default_workers,
    envelope,
    read_manifest,
    sample_seed,
    synth_sample,
    write_corpus,
)
from app.training import RunConfig, TrainConfig


# Envelope
@pytest.mark.unit
def test_envelope_of_silence_is_zero():
    """Test zeros give a zero envelope with one value per frame"""
    env = envelope(Waveform(np.zeros(640 * 7), 16000), fps=25)
    assert env.shape == (7,)
    assert not env.any()


@pytest.mark.unit
def test_envelope_step_response():
    """Test a silence-to-tone step reaches 0.9 within 3 frames"""
    samples = np.zeros(640 * 10)
    t = np.arange(640 * 6) / 16000
    samples[640 * 4:] = 0.8 * np.sin(2 * np.pi * 400 * t)
    env = envelope(Waveform(samples, 16000), fps=25)
    assert not env[:4].any()
    assert env[4 + 2] >= 0.9, f"Envelope {env[4:8]} too slow"
    assert np.all((env >= 0) & (env <= 1))


# Samples
@pytest.mark.unit
def test_silence_keeps_mouth_closed():
    """Test silent audio gives zero mouth height and an empty mask"""
    sample = synth_sample(3, frames=9, audio_mode="silence")
    assert not sample.mouth_heights.any()
    assert not sample.mouth_mask.any()


@pytest.mark.unit
def test_full_scale_tone_opens_mouth_fully():
    """Test a constant full-scale tone holds the mouth at h_max"""
    sample = synth_sample(3, frames=9, audio_mode="tone")
    assert np.all(sample.mouth_heights == H_MAX)


@pytest.mark.unit
def test_same_seed_same_bytes():
    """Test generation is deterministic per seed"""
    a, b = synth_sample(11, frames=9), synth_sample(11, frames=9)
    assert a.video.frames.tobytes() == b.video.frames.tobytes()
    assert a.waveform.samples.tobytes() == b.waveform.samples.tobytes()
    assert a.mouth_mask.tobytes() == b.mouth_mask.tobytes()
    assert not np.array_equal(synth_sample(12, frames=9).video.frames, a.video.frames)


@pytest.mark.unit
def test_mouth_height_tracks_envelope(toy_sample):
    """Test mouth height correlates with the envelope at 0.99 or better"""
    corr, degenerate = series_correlation(toy_sample.mouth_heights, toy_sample.envelope)
    assert not degenerate
    assert corr >= 0.99, f"Correlation {corr:.4f}"


@pytest.mark.unit
def test_mask_is_the_mouth_rectangle(toy_sample):
    """Test the mask has h·width pixels per frame, all painted in the mouth colour"""
    mouth = np.array(toy_sample.identity["mouth"], dtype=np.float32)
    for f, height in enumerate(toy_sample.mouth_heights):
        marked = toy_sample.mouth_mask[f] > 0
        assert marked.sum() == height * MOUTH_WIDTH, f"Frame {f}"
        for c in range(3):
            assert np.all(toy_sample.video.frames[c, f][marked] == mouth[c])


@pytest.mark.unit
def test_mouth_region_bounds_every_mask(toy_sample):
    """Test the mouth region box contains every marked pixel"""
    r0, r1, c0, c1 = toy_sample.mouth_region
    outside = toy_sample.mouth_mask.copy()
    outside[:, r0:r1, c0:c1] = 0
    assert not outside.any()


@pytest.mark.unit
def test_frames_must_align_with_r_f():
    """Test frames not congruent to 1 mod r_f is a contract error"""
    with pytest.raises(ContractError):
        synth_sample(0, frames=8)


@pytest.mark.unit
def test_unknown_audio_mode():
    """Test an unknown audio mode is a contract error"""
    with pytest.raises(ContractError):
        synth_sample(0, frames=5, audio_mode="music")


@pytest.mark.unit
def test_sample_seed_stable():
    """Test per-index seeds are deterministic and distinct"""
    assert sample_seed(0, 1) == sample_seed(0, 1)
    assert len({sample_seed(0, i) for i in range(50)}) == 50


# Corpus
@pytest.mark.integration
def test_write_corpus_manifest(run_dir):
    """Test the manifest lists train and held-out rows and is identical for a repeated seed"""
    first, second = run_dir / "a", run_dir / "b"
    write_corpus(str(first), count=2, seed=5, frames=5, heldout=1, workers=2)
    write_corpus(str(second), count=2, seed=5, frames=5, heldout=1, workers=1)

    rows = read_manifest(str(first))
    assert [r.split for r in rows] == ["train", "train", "heldout"]
    assert [r.seed for r in rows] == [sample_seed(5, i) for i in range(3)]
    assert (first / rows[0].video).exists() and (first / rows[0].audio).exists() and (first / rows[0].mask).exists()
    assert (first / MANIFEST_NAME).read_bytes() == (second / MANIFEST_NAME).read_bytes()
    assert (first / rows[2].video).read_bytes() == (second / rows[2].video).read_bytes()


@pytest.mark.integration
def test_corpus_loads_training_items(run_dir):
    """Test ToyCorpus encodes a written sample for the run geometry"""
    write_corpus(str(run_dir), count=1, seed=0, frames=5)
    codec = CodecConfig(patch=8, r_f=4, res=32, frames=5)
    run = RunConfig(codec=codec, model=RunConfig.derive_model(codec, dim=8, heads=2), train=TrainConfig(window=2))
    corpus = ToyCorpus(str(run_dir), run)
    assert len(corpus) == 1
    item = corpus[0]
    assert item.latents.latents.shape == (192, 2, 4, 4)
    assert item.face_mask.m.shape == item.latents.latents.shape
    assert corpus[0] is item, "Encoded items are cached"
    with pytest.raises(DataError):
        ToyCorpus(str(run_dir), run, split="heldout")


@pytest.mark.unit
def test_write_corpus_rejects_empty(run_dir):
    """Test zero samples is a contract error"""
    with pytest.raises(ContractError):
        write_corpus(str(run_dir), count=0, seed=0)


@pytest.mark.unit
def test_read_manifest_missing(run_dir):
    """Test a directory without a manifest is a data error naming the path"""
    with pytest.raises(DataError) as excinfo:
        read_manifest(str(run_dir))
    assert MANIFEST_NAME in str(excinfo.value)


@pytest.mark.unit
def test_default_workers_from_env(monkeypatch):
    """Test RAP_THREADS caps the worker count"""
    monkeypatch.setenv("RAP_THREADS", "3")
    assert default_workers() == 3
