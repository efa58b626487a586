"""
Static/dynamic hybrid training

Each sample draws y ~ Bernoulli(β): y=1 trains on the first k latents (static
head included), y=0 on the last k (dynamic only). A timestep t, Gaussian noise
and an audio-dropout coin are drawn per sample, the velocity is predicted on
concat(x_t, x_ref) and the composite loss is minimised with Adam.
"""

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .audio_features import AudioTokens, Waveform, extract_features
from .dit_model import HybridSchedule, ModelConfig, encode_audio, forward, init_params, null_audio, parameter_shapes
from .errors import ConfigError, ContractError, NumericError
from .flow_matching import FaceMask, LossWeights, composite_loss, interpolate, target_velocity
from .latent_codec import CodecConfig, LatentClip, VideoClip, encode_reference, encode_video
from .numerics import GradTape, Tensor, backward, concat
from .persistence import (
    Checkpoint,
    ConfigValue,
    check_tensor_names,
    check_tensor_shapes,
    coerce_value,
    decode_rng_state,
    encode_rng_state,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

LOSS_LOG_COLUMNS = ["step", "loss", "diffusion", "face", "temporal"]
REQUIRED_KEYS = ("steps", "seed", "lr")
CHECKPOINT_KIND = "rap-train-state"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    lr: float = 1e-3
    beta: float = 0.5
    window: int = 6
    timesteps: int = 0  # 0 = continuous t; T > 0 samples t from {1..T}/T
    audio_dropout: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 4
    face_weight: float = 1.0
    temporal_weight: float = 1.0
    full_warmup_steps: int = 0
    checkpoint_every: int = 100
    log_every: int = 10

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 <= self.audio_dropout <= 1.0:
            raise ContractError(f"audio_dropout must lie in [0, 1], got {self.audio_dropout}")
        if self.steps < 0 or self.batch < 1 or self.window < 1 or self.timesteps < 0:
            raise ContractError("steps >= 0, batch >= 1, window >= 1 and timesteps >= 0 are required")
        if self.lr < 0:
            raise ContractError(f"lr must be >= 0, got {self.lr}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(face=self.face_weight, temporal=self.temporal_weight)


# ModelConfig fields that follow from the codec geometry
_DERIVED_MODEL_FIELDS = ("latent_channels", "frames", "height", "width", "r_f")


def _field_types(cls) -> Dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints.get(f.type if isinstance(f.type, str) else f.type.__name__, str) for f in dataclasses.fields(cls)}


@dataclass(frozen=True)
class RunConfig:
    """Codec geometry, denoiser shape and optimisation settings of one run"""

    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @staticmethod
    def derive_model(codec: CodecConfig, **settings) -> ModelConfig:
        return ModelConfig(
            latent_channels=codec.channels,
            frames=codec.latent_frames,
            height=codec.grid,
            width=codec.grid,
            r_f=codec.r_f,
            **settings,
        )

    @classmethod
    def from_values(cls, values: Mapping[str, ConfigValue], require: bool = True) -> "RunConfig":
        """Build from parsed key=value pairs; unknown keys and missing required keys raise ConfigError"""
        if require:
            for key in REQUIRED_KEYS:
                if key not in values:
                    raise ConfigError(f"missing required key '{key}'", key=key)

        sections: Dict[str, Dict[str, Any]] = {"codec": {}, "model": {}, "train": {}}
        types = {
            "codec": _field_types(CodecConfig),
            "model": {k: v for k, v in _field_types(ModelConfig).items() if k not in _DERIVED_MODEL_FIELDS},
            "train": _field_types(TrainConfig),
        }
        for key, raw in values.items():
            section = next((name for name, fields in types.items() if key in fields), None)
            if section is None:
                hint = " (derived from codec geometry)" if key in _DERIVED_MODEL_FIELDS else ""
                raise ConfigError(f"unknown key '{key}'{hint}", line_number=raw.line_number, key=key)
            sections[section][key] = coerce_value(raw, key, types[section][key])

        try:
            codec = CodecConfig(**sections["codec"])
            model = cls.derive_model(codec, **sections["model"])
            train = TrainConfig(**sections["train"])
        except ContractError as e:
            raise ConfigError(str(e)) from e
        if train.window > model.frames:
            raise ConfigError(f"window k={train.window} exceeds F_full={model.frames}", key="window")
        return cls(codec=codec, model=model, train=train)

    def to_dict(self) -> Dict[str, Any]:
        model = {k: v for k, v in dataclasses.asdict(self.model).items() if k not in _DERIVED_MODEL_FIELDS}
        return {"codec": dataclasses.asdict(self.codec), "model": model, "train": dataclasses.asdict(self.train)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        codec = CodecConfig(**data["codec"])
        return cls(codec=codec, model=cls.derive_model(codec, **data["model"]), train=TrainConfig(**data["train"]))

    def with_train(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    def with_model(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **changes))


# ---------------------------------------------------------------------------
# Samples and batches
# ---------------------------------------------------------------------------

@dataclass
class TrainItem:
    """One encoded training clip over the full F_full latent frames"""

    latents: LatentClip
    reference: np.ndarray
    features: Tensor
    face_mask: FaceMask


@dataclass
class TrainBatch:
    items: List[TrainItem]
    flags: List[int]

    def __post_init__(self):
        if len(self.items) != len(self.flags) or not self.items:
            raise ContractError(f"TrainBatch: {len(self.items)} items for {len(self.flags)} window flags")


def prepare_item(video: VideoClip, waveform: Waveform, mouth_mask: np.ndarray, run: RunConfig) -> TrainItem:
    codec, model = run.codec, run.model
    latents = encode_video(video, p=codec.patch, r_f=codec.r_f)
    if latents.frames != model.frames or latents.latents.shape[2:] != (model.height, model.width):
        raise ContractError(f"clip encodes to {latents.latents.shape}, model expects F={model.frames}, grid {model.height}×{model.width}")
    reference = encode_reference(video.frames[:, 0], latents.frames, p=codec.patch, r_f=codec.r_f)
    features, _ = extract_features(waveform, fps=codec.fps, bands=model.audio_bands, layers=model.audio_layers, frames=video.length)
    face_mask = FaceMask.from_pixels(mouth_mask, p=codec.patch, r_f=codec.r_f, channels=codec.channels)
    return TrainItem(latents=latents, reference=reference, features=features, face_mask=face_mask)


def window_start(full_frames: int, y: int, k: int) -> int:
    if not 1 <= k <= full_frames:
        raise ContractError(f"window k={k} outside [1, F_full={full_frames}]")
    return 0 if y else full_frames - k


def sample_window(x: LatentClip, y: int, k: int) -> LatentClip:
    """y=1 -> first k latents, y=0 -> last k latents"""
    start = window_start(x.frames, y, k)
    return LatentClip(x.latents[:, start:start + k], static_head=x.static_head and start == 0)


def apply_audio_dropout(c_a: AudioTokens, p: float, rng: np.random.Generator, null_token: Tensor) -> Tuple[AudioTokens, bool]:
    """Replace every audio token by the learned null token with probability p"""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"audio dropout p must lie in [0, 1], got {p}")
    if rng.random() < p:
        return null_audio({"audio.null": null_token}, c_a.frames, c_a.r_f, c_a.layers), True
    return c_a, False


def make_batch(corpus: Sequence[TrainItem], cfg: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    if len(corpus) == 0:
        raise ContractError("training corpus is empty")
    indices = rng.integers(0, len(corpus), size=cfg.batch)
    flags = (rng.random(cfg.batch) < cfg.beta).astype(int)
    return TrainBatch(items=[corpus[int(i)] for i in indices], flags=[int(y) for y in flags])


def sample_timestep(rng: np.random.Generator, timesteps: int) -> float:
    if timesteps > 0:
        return int(rng.integers(1, timesteps + 1)) / timesteps
    return float(rng.random())


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros(p.shape, dtype=np.float32) for name, p in params.items()},
            v={name: np.zeros(p.shape, dtype=np.float32) for name, p in params.items()},
        )


def adam_update(params: Dict[str, Tensor], grads: Mapping[str, Tensor], state: AdamState, cfg: TrainConfig) -> Tuple[Dict[str, Tensor], AdamState]:
    step = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step
    new_params: Dict[str, Tensor] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name].data.astype(np.float32)
        m = (b1 * state.m[name] + (1.0 - b1) * g).astype(np.float32)
        v = (b2 * state.v[name] + (1.0 - b2) * g * g).astype(np.float32)
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
        new_params[name] = Tensor((p.data - cfg.lr * update).astype(np.float32))
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=step, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

@dataclass
class TrainerState:
    params: Dict[str, Tensor]
    adam: AdamState
    rng: np.random.Generator
    step: int = 0


@dataclass
class StepResult:
    step: int
    loss: float
    diffusion: float
    face: float
    temporal: float

    def row(self) -> List[Any]:
        return [self.step, f"{self.loss:.8g}", f"{self.diffusion:.8g}", f"{self.face:.8g}", f"{self.temporal:.8g}"]


def schedule_for_step(step: int, model_cfg: ModelConfig, cfg: TrainConfig) -> HybridSchedule:
    """Full-sequence fusion only during the warm-up of a two-stage run"""
    if step <= cfg.full_warmup_steps:
        return HybridSchedule(w=0.0, delta=0.0, layers=model_cfg.layers)
    return model_cfg.schedule


def train_step(batch: TrainBatch, state: TrainerState, wts: LossWeights, cfg: TrainConfig, model_cfg: ModelConfig) -> StepResult:
    """One Adam update on the batch; gradients averaged over samples in batch order

    Raises:
        NumericError: the loss or a gradient is not finite
    """
    step = state.step + 1
    schedule = schedule_for_step(step, model_cfg, cfg)
    k = cfg.window
    rng = state.rng

    grad_sum: Dict[str, np.ndarray] = {}
    totals = np.zeros(4, dtype=np.float64)
    for item, y in zip(batch.items, batch.flags):
        start = window_start(item.latents.frames, y, k)
        x0 = sample_window(item.latents, y, k).latents
        x_ref = item.reference[:, start:start + k]
        mask = item.face_mask.window(start, k)

        t = sample_timestep(rng, cfg.timesteps)
        x1 = rng.standard_normal(x0.shape).astype(np.float32)

        with GradTape() as tape:
            p = tape.watch_all(state.params)
            c_a = encode_audio(item.features, p, model_cfg, frames=k, start_latent=start)
            c_a, _ = apply_audio_dropout(c_a, cfg.audio_dropout, rng, p["audio.null"])
            x_t = interpolate(Tensor(x0), Tensor(x1), t)
            u = target_velocity(Tensor(x0), Tensor(x1))
            v = forward(concat([x_t, Tensor(x_ref)], axis=0), t, c_a, p, model_cfg, schedule=schedule)
            terms = composite_loss(v, u, mask, wts)

        if not math.isfinite(terms.value):
            raise NumericError(f"non-finite loss {terms.value}", step=step, t=round(t, 6), y=y)
        grads = backward(terms.total, tape)
        for name, g in grads.items():
            if not np.all(np.isfinite(g.data)):
                raise NumericError(f"non-finite gradient for {name}", step=step, t=round(t, 6), y=y)
            grad_sum[name] = grad_sum[name] + g.data if name in grad_sum else g.data.astype(np.float64)
        totals += (terms.value, terms.diffusion, terms.face, terms.temporal)

    count = len(batch.items)
    averaged = {name: Tensor((g / count).astype(np.float32)) for name, g in grad_sum.items()}
    state.params, state.adam = adam_update(state.params, averaged, state.adam, cfg)
    state.step = step

    loss, diffusion, face, temporal = (totals / count).tolist()
    logger.debug(f"step {step}: loss={loss:.6f} diffusion={diffusion:.6f} face={face:.6f} temporal={temporal:.6f}")
    return StepResult(step=step, loss=loss, diffusion=diffusion, face=face, temporal=temporal)


# ---------------------------------------------------------------------------
# State <-> checkpoint
# ---------------------------------------------------------------------------

def _seeded(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def initial_state(run: RunConfig) -> TrainerState:
    params = init_params(run.model, _seeded(run.train.seed, 0))
    return TrainerState(params=params, adam=AdamState.zeros(params), rng=_seeded(run.train.seed, 1), step=0)


def state_to_checkpoint(state: TrainerState, run: RunConfig) -> Checkpoint:
    tensors: Dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[f"model.{name}"] = p.data
    for name in state.params:
        tensors[f"adam.m.{name}"] = state.adam.m[name]
        tensors[f"adam.v.{name}"] = state.adam.v[name]
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": run.to_dict(),
        "step": state.step,
        "adam_step": state.adam.step,
        "rng": encode_rng_state(state.rng),
    }
    return Checkpoint(meta=meta, tensors=tensors)


def restore_params(ckpt: Checkpoint, model_cfg: ModelConfig) -> Dict[str, Tensor]:
    """Model tensors of a checkpoint, validated against the config's parameter table"""
    found = ckpt.section("model")
    shapes = parameter_shapes(model_cfg)
    check_tensor_names(shapes, found, what="model")
    check_tensor_shapes(shapes, found)
    return {name: Tensor(found[name]) for name in shapes}


def state_from_checkpoint(ckpt: Checkpoint, run: RunConfig) -> TrainerState:
    params = restore_params(ckpt, run.model)
    m, v = ckpt.section("adam.m"), ckpt.section("adam.v")
    check_tensor_names(params, m, what="adam.m")
    check_tensor_names(params, v, what="adam.v")
    adam = AdamState(step=int(ckpt.meta["adam_step"]), m=dict(m), v=dict(v))
    return TrainerState(params=params, adam=adam, rng=decode_rng_state(ckpt.meta["rng"]), step=int(ckpt.meta["step"]))


def load_run(path: str) -> Tuple[RunConfig, Dict[str, Tensor], Checkpoint]:
    """Config and model parameters from a training checkpoint"""
    ckpt = load_checkpoint(path)
    if "config" not in ckpt.meta:
        raise ConfigError(f"checkpoint {path} carries no run configuration")
    run = RunConfig.from_dict(ckpt.meta["config"])
    return run, restore_params(ckpt, run.model), ckpt


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def _prepare_loss_log(path: str, keep_through_step: int):
    """Open the loss CSV for appending, dropping rows past a resumed step"""
    rows: List[List[str]] = []
    if keep_through_step > 0 and os.path.exists(path):
        with open(path, newline="") as f:
            rows = [row for row in list(csv.reader(f))[1:] if row and int(row[0]) <= keep_through_step]
    handle = open(path, "w", newline="")
    writer = csv.writer(handle)
    writer.writerow(LOSS_LOG_COLUMNS)
    writer.writerows(rows)
    return handle, writer


def train_loop(
    corpus: Sequence[TrainItem],
    run: RunConfig,
    out_path: str,
    resume_from: Optional[str] = None,
    loss_log: Optional[str] = None,
    progress: bool = False,
) -> Checkpoint:
    """Run steps state.step+1 .. cfg.steps, checkpointing every cfg.checkpoint_every steps and at the end"""
    cfg = run.train
    if len(corpus) == 0:
        raise ContractError("training corpus is empty")
    if cfg.window > run.model.frames:
        raise ContractError(f"window k={cfg.window} exceeds F_full={run.model.frames}")

    if resume_from:
        state = state_from_checkpoint(load_checkpoint(resume_from), run)
        logger.info(f"Resuming from {resume_from} at step {state.step}")
    else:
        state = initial_state(run)

    wts = cfg.loss_weights
    log_handle, writer = _prepare_loss_log(loss_log, state.step) if loss_log else (None, None)
    try:
        steps = range(state.step + 1, cfg.steps + 1)
        for step in tqdm(steps, total=len(steps), desc="train", disable=not progress):
            batch = make_batch(corpus, cfg, state.rng)
            result = train_step(batch, state, wts, cfg, run.model)
            if writer is not None:
                writer.writerow(result.row())
            if cfg.log_every and step % cfg.log_every == 0:
                logger.info(f"step {step}/{cfg.steps}: loss={result.loss:.5f} (diffusion={result.diffusion:.5f}, face={result.face:.5f}, temporal={result.temporal:.5f})")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
                save_checkpoint(out_path, state_to_checkpoint(state, run))
                if log_handle is not None:
                    log_handle.flush()
    finally:
        if log_handle is not None:
            log_handle.close()

    ckpt = state_to_checkpoint(state, run)
    save_checkpoint(out_path, ckpt)
    return ckpt
