"""
Diffusion transformer denoiser M(x̃_t, t, c_a)

Patchify (kernel 1×1×1) -> L blocks of [self-attention -> hybrid audio
cross-attention -> FFN], each pre-norm with adaLN-Zero timestep modulation
-> final modulated norm and linear back to C latent channels.

Hybrid cross-attention blends two branches per block with
α(i) = clamp(w·i/L + δ, 0, 1):
    z_full   - every video token attends to all audio tokens
    z_window - tokens of latent frame j attend to audio partition j only
Both branches share one set of cross-attention weights.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from .audio_features import AudioTokens, align_to_latents, project_tokens
from .errors import ContractError, ShapeError
from .numerics import (
    Tensor,
    add,
    add_lastdim,
    batched_matmul,
    gelu,
    layer_norm,
    matmul,
    mul_lastdim,
    ones,
    permute,
    reshape,
    scale,
    silu,
    slice_axis,
    softmax_lastdim,
    take_rows,
    zeros,
)

logger = logging.getLogger(__name__)

MODULATION_NAMES = (
    "shift_sa", "scale_sa", "gate_sa",
    "shift_ca", "scale_ca", "gate_ca",
    "shift_ff", "scale_ff", "gate_ff",
)
FUSION_MODES = ("full", "window")
TIME_SCALE = 1000.0


@dataclass(frozen=True)
class HybridSchedule:
    """Per-layer blend weight between full-sequence and window fusion"""

    w: float = 1.0
    delta: float = 0.0
    layers: int = 6

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError(f"HybridSchedule needs L >= 1, got {self.layers}")

    def raw_alpha(self, i: int) -> float:
        return self.w * i / self.layers + self.delta

    def alpha(self, i: int) -> float:
        if not 0 <= i < self.layers:
            raise ContractError(f"layer index {i} outside [0, {self.layers})")
        return min(1.0, max(0.0, self.raw_alpha(i)))

    def table(self) -> List[float]:
        return [self.alpha(i) for i in range(self.layers)]


def alpha_table(schedule: HybridSchedule) -> str:
    """α(0..L-1) formatted for reports, e.g. "0.000|0.167|..." """
    return "|".join(f"{a:.3f}" for a in schedule.table())


@dataclass(frozen=True)
class ModelConfig:
    """Denoiser geometry; latent fields follow the codec (C = 3·p²·r_f)"""

    latent_channels: int = 768
    dim: int = 64
    layers: int = 6
    heads: int = 4
    ffn_dim: int = 256
    frames: int = 9
    height: int = 4
    width: int = 4
    r_f: int = 4
    audio_bands: int = 16
    audio_layers: int = 2
    audio_hidden: int = 64
    audio_activation: str = "silu"
    hybrid_w: float = 1.0
    hybrid_delta: float = 0.0
    self_attention: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.layers < 1:
            raise ContractError(f"ModelConfig: L must be >= 1, got {self.layers}")
        if self.heads < 1 or self.dim % self.heads:
            raise ContractError(f"ModelConfig: D={self.dim} is not divisible by heads={self.heads}")
        if min(self.latent_channels, self.frames, self.height, self.width, self.r_f, self.ffn_dim) < 1:
            raise ContractError("ModelConfig: channel, grid and ffn sizes must be positive")

    @property
    def schedule(self) -> HybridSchedule:
        return HybridSchedule(w=self.hybrid_w, delta=self.hybrid_delta, layers=self.layers)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def cells(self) -> int:
        return self.height * self.width


@dataclass
class TokenSeq:
    """Frame-major tokens: all H·W tokens of latent frame 0, then frame 1, ..."""

    z: Tensor
    frames: int
    cells: int

    def __post_init__(self):
        if self.z.ndim != 2 or self.z.shape[0] != self.frames * self.cells:
            raise ShapeError(f"TokenSeq: expected {self.frames * self.cells} tokens, got {self.z.shape}")

    def replace(self, z: Tensor) -> "TokenSeq":
        return TokenSeq(z, self.frames, self.cells)


@dataclass
class AttentionWeights:
    q: Tensor
    k: Tensor
    v: Tensor
    o: Tensor
    o_bias: Tensor

    @classmethod
    def from_params(cls, params: Dict[str, Tensor], prefix: str) -> "AttentionWeights":
        return cls(
            q=params[f"{prefix}.q.w"],
            k=params[f"{prefix}.k.w"],
            v=params[f"{prefix}.v.w"],
            o=params[f"{prefix}.o.w"],
            o_bias=params[f"{prefix}.o.b"],
        )


@dataclass
class Modulation:
    """One block's adaptive-norm vectors, each [D]"""

    vectors: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.vectors[name]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every learned tensor, in a fixed order"""
    d, c, a = cfg.dim, cfg.latent_channels, cfg.audio_hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch.w": (2 * c, d),
        "patch.b": (d,),
        "time.w1": (d, d),
        "time.b1": (d,),
        "time.w2": (d, d),
        "time.b2": (d,),
        "audio.w1": (cfg.audio_bands, a),
        "audio.b1": (a,),
        "audio.w2": (a, d),
        "audio.b2": (d,),
        "audio.null": (1, d),
    }
    for i in range(cfg.layers):
        p = f"blocks.{i}"
        shapes[f"{p}.ada.w"] = (d, 9 * d)
        shapes[f"{p}.ada.b"] = (9 * d,)
        for attn in ("attn", "cross"):
            for proj in ("q", "k", "v", "o"):
                shapes[f"{p}.{attn}.{proj}.w"] = (d, d)
            shapes[f"{p}.{attn}.o.b"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, cfg.ffn_dim)
        shapes[f"{p}.ffn.b1"] = (cfg.ffn_dim,)
        shapes[f"{p}.ffn.w2"] = (cfg.ffn_dim, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["final.ada.w"] = (d, 2 * d)
    shapes["final.ada.b"] = (2 * d,)
    shapes["final.w"] = (d, c)
    shapes["final.b"] = (c,)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Closed form:

    2CD + D                        patchify
    + 2(D² + D)                    timestep MLP
    + BA + A + AD + D + D          audio MLP and null token
    + L(9D² + 9D + 8D² + 2D + 2DF + F + D)   blocks (adaLN, self/cross attention, FFN)
    + 2D² + 2D + DC + C            final modulation and projection
    """
    d, c, a, b, f = cfg.dim, cfg.latent_channels, cfg.audio_hidden, cfg.audio_bands, cfg.ffn_dim
    per_block = 9 * d * d + 9 * d + 8 * d * d + 2 * d + 2 * d * f + f + d
    return (
        2 * c * d + d
        + 2 * (d * d + d)
        + b * a + a + a * d + d + d
        + cfg.layers * per_block
        + 2 * d * d + 2 * d + d * c + c
    )


def init_params(cfg: ModelConfig, rng: np.random.Generator, zero_init: bool = True) -> Dict[str, Tensor]:
    """Fan-in scaled normal weights, zero biases

    With zero_init the adaptive-norm projections and the output projection
    start at zero (adaLN-Zero).
    """
    params: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        zeroed = zero_init and (".ada." in name or name in ("final.w", "final.b"))
        if len(shape) == 1 or zeroed:
            value = np.zeros(shape, dtype=np.float32)
        elif name == "audio.null":
            value = rng.standard_normal(shape) * 0.02
        else:
            value = rng.standard_normal(shape) / np.sqrt(shape[0])
        params[name] = Tensor(value)
    return params


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def sinusoidal_embedding(positions: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """[len(positions) × dim] table of [cos | sin] features"""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = positions[:, None] * freqs[None]
    table = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        table = np.concatenate([table, np.zeros((len(positions), 1))], axis=1)
    return table


@lru_cache(maxsize=32)
def positional_encoding(frames: int, height: int, width: int, dim: int) -> np.ndarray:
    """Additive 3-D (frame, row, col) encoding, frame-major [(F·H·W) × D]"""
    spatial = 2 * (dim // 6)
    temporal = dim - 2 * spatial
    f_idx, h_idx, w_idx = np.meshgrid(np.arange(frames), np.arange(height), np.arange(width), indexing="ij")
    table = np.concatenate(
        [
            sinusoidal_embedding(f_idx.reshape(-1), temporal),
            sinusoidal_embedding(h_idx.reshape(-1), spatial),
            sinusoidal_embedding(w_idx.reshape(-1), spatial),
        ],
        axis=1,
    )
    table.setflags(write=False)
    return table


def timestep_embed(t: float, params: Dict[str, Tensor], cfg: ModelConfig) -> Tuple[List[Modulation], Tuple[Tensor, Tensor]]:
    """Per-block modulation vectors and the final (shift, scale) pair for timestep t

    sinusoid(t) -> Linear -> SiLU -> Linear gives the conditioning vector c;
    each block reads SiLU(c) through its own 9·D projection.
    """
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"timestep t={t} outside [0, 1]")
    d = cfg.dim
    e = Tensor(sinusoidal_embedding([t * TIME_SCALE], d))
    hidden = silu(add_lastdim(matmul(e, params["time.w1"]), params["time.b1"]))
    cond = add_lastdim(matmul(hidden, params["time.w2"]), params["time.b2"])
    act = silu(cond)

    blocks: List[Modulation] = []
    for i in range(cfg.layers):
        flat = reshape(add_lastdim(matmul(act, params[f"blocks.{i}.ada.w"]), params[f"blocks.{i}.ada.b"]), (9 * d,))
        blocks.append(Modulation({name: slice_axis(flat, 0, k * d, (k + 1) * d) for k, name in enumerate(MODULATION_NAMES)}))

    final = reshape(add_lastdim(matmul(act, params["final.ada.w"]), params["final.ada.b"]), (2 * d,))
    return blocks, (slice_axis(final, 0, 0, d), slice_axis(final, 0, d, 2 * d))


def encode_audio(feats: Tensor, params: Dict[str, Tensor], cfg: ModelConfig, frames: int, start_latent: int = 0) -> AudioTokens:
    """Project per-frame features and lay them out for F latent frames"""
    tokens = project_tokens(feats, params, activation=cfg.audio_activation)
    return align_to_latents(tokens, frames, cfg.r_f, cfg.audio_layers, start_latent=start_latent)


def null_audio(params: Dict[str, Tensor], frames: int, r_f: int, layers: int) -> AudioTokens:
    """The learned null token repeated over every audio slot"""
    count = frames * r_f * layers
    return AudioTokens(take_rows(params["audio.null"], [0] * count), frames, r_f, layers)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def _split_heads(x: Tensor, groups: int, heads: int, keys_last: bool = False) -> Tensor:
    rows, d = x.shape
    per_group, dh = rows // groups, d // heads
    split = reshape(x, (groups, per_group, heads, dh))
    if keys_last:
        return reshape(permute(split, (0, 2, 3, 1)), (groups * heads, dh, per_group))
    return reshape(permute(split, (0, 2, 1, 3)), (groups * heads, per_group, dh))


def attend(query: Tensor, context: Tensor, weights: AttentionWeights, heads: int, groups: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention, optionally block-diagonal

    Rows of query and context are split into `groups` contiguous blocks and
    block g of the queries only sees block g of the context.
    """
    if query.shape[0] % groups or context.shape[0] % groups:
        raise ContractError(f"attend: {query.shape[0]} queries / {context.shape[0]} keys do not split into {groups} groups")
    d = query.shape[1]
    dh = d // heads
    q = _split_heads(matmul(query, weights.q), groups, heads)
    kt = _split_heads(matmul(context, weights.k), groups, heads, keys_last=True)
    v = _split_heads(matmul(context, weights.v), groups, heads)

    probs = softmax_lastdim(scale(batched_matmul(q, kt), 1.0 / math.sqrt(dh)))
    out = batched_matmul(probs, v)
    per_group = query.shape[0] // groups
    merged = reshape(permute(reshape(out, (groups, heads, per_group, dh)), (0, 2, 1, 3)), (groups * per_group, d))
    return add_lastdim(matmul(merged, weights.o), weights.o_bias)


def _gated(z: Tensor, update: Tensor, gate: Optional[Tensor]) -> Tensor:
    return add(z, update if gate is None else mul_lastdim(update, gate))


def full_sequence_fusion(
    z: TokenSeq,
    c_a: AudioTokens,
    weights: AttentionWeights,
    heads: int,
    query: Optional[Tensor] = None,
    gate: Optional[Tensor] = None,
) -> TokenSeq:
    """z_full = z + CrossAttn(z, c_a) over all F·r_f·N audio tokens

    `query` defaults to z itself; blocks pass the modulated, normalised tokens.
    """
    query = z.z if query is None else query
    return z.replace(_gated(z.z, attend(query, c_a.tokens, weights, heads), gate))


def window_fusion(
    z: TokenSeq,
    c_a: AudioTokens,
    weights: AttentionWeights,
    heads: int,
    query: Optional[Tensor] = None,
    gate: Optional[Tensor] = None,
) -> TokenSeq:
    """z_window = z + Concat_j CrossAttn(z^j, c_a^j): frame j sees audio partition j only"""
    if c_a.frames != z.frames:
        raise ContractError(f"window_fusion: {c_a.frames} audio partitions for {z.frames} latent frames")
    query = z.z if query is None else query
    return z.replace(_gated(z.z, attend(query, c_a.tokens, weights, heads, groups=z.frames), gate))


def hybrid_fuse(z_full: TokenSeq, z_window: TokenSeq, i: int, s: HybridSchedule) -> TokenSeq:
    alpha = s.alpha(i)
    if alpha == 1.0:
        return z_window
    if alpha == 0.0:
        return z_full
    return z_full.replace(add(scale(z_window.z, alpha), scale(z_full.z, 1.0 - alpha)))


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def _norm(x: Tensor, eps: float) -> Tensor:
    d = x.shape[-1]
    return layer_norm(x, ones((d,)), zeros((d,)), eps)


def _modulate(x: Tensor, shift: Tensor, scale_vec: Tensor) -> Tensor:
    return add_lastdim(mul_lastdim(x, add(ones(scale_vec.shape), scale_vec)), shift)


def patchify(x_tilde: Tensor, params: Dict[str, Tensor], cfg: ModelConfig) -> TokenSeq:
    """Per-cell linear 2C -> D; frame-major token order"""
    if x_tilde.ndim != 4 or x_tilde.shape[0] != 2 * cfg.latent_channels:
        raise ShapeError(f"patchify: expected [{2 * cfg.latent_channels} × F × H × W] input, got {x_tilde.shape}")
    channels, frames, height, width = x_tilde.shape
    cells = reshape(permute(x_tilde, (1, 2, 3, 0)), (frames * height * width, channels))
    return TokenSeq(add_lastdim(matmul(cells, params["patch.w"]), params["patch.b"]), frames, height * width)


def depatchify(tokens: Tensor, frames: int, height: int, width: int) -> Tensor:
    channels = tokens.shape[1]
    return permute(reshape(tokens, (frames, height, width, channels)), (3, 0, 1, 2))


def _block(
    i: int,
    z: TokenSeq,
    c_a: AudioTokens,
    mod: Modulation,
    params: Dict[str, Tensor],
    cfg: ModelConfig,
    schedule: HybridSchedule,
    fusion: Optional[str],
) -> TokenSeq:
    prefix = f"blocks.{i}"
    eps = cfg.norm_eps

    if cfg.self_attention:
        a = _modulate(_norm(z.z, eps), mod["shift_sa"], mod["scale_sa"])
        z = z.replace(_gated(z.z, attend(a, a, AttentionWeights.from_params(params, f"{prefix}.attn"), cfg.heads), mod["gate_sa"]))

    cross = AttentionWeights.from_params(params, f"{prefix}.cross")
    q = _modulate(_norm(z.z, eps), mod["shift_ca"], mod["scale_ca"])
    if fusion == "full":
        z = full_sequence_fusion(z, c_a, cross, cfg.heads, query=q, gate=mod["gate_ca"])
    elif fusion == "window":
        z = window_fusion(z, c_a, cross, cfg.heads, query=q, gate=mod["gate_ca"])
    else:
        alpha = schedule.alpha(i)
        z_full = full_sequence_fusion(z, c_a, cross, cfg.heads, query=q, gate=mod["gate_ca"]) if alpha < 1.0 else None
        z_window = window_fusion(z, c_a, cross, cfg.heads, query=q, gate=mod["gate_ca"]) if alpha > 0.0 else None
        if z_full is None:
            z_full = z_window
        if z_window is None:
            z_window = z_full
        z = hybrid_fuse(z_full, z_window, i, schedule)

    f = _modulate(_norm(z.z, eps), mod["shift_ff"], mod["scale_ff"])
    hidden = gelu(add_lastdim(matmul(f, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
    out = add_lastdim(matmul(hidden, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
    return z.replace(_gated(z.z, out, mod["gate_ff"]))


def forward(
    x_tilde: Tensor,
    t: float,
    c_a: AudioTokens,
    params: Dict[str, Tensor],
    cfg: ModelConfig,
    fusion: Optional[str] = None,
    schedule: Optional[HybridSchedule] = None,
) -> Tensor:
    """Velocity prediction v_t [C × F × H × W] for x̃_t = concat(x_t, x_ref) [2C × F × H × W]

    fusion="full"/"window" computes that branch only in every block;
    the default follows the hybrid schedule.

    Raises:
        ShapeError: prefixed with the failing block index
    """
    if fusion is not None and fusion not in FUSION_MODES:
        raise ContractError(f"unknown fusion mode '{fusion}', expected one of {FUSION_MODES}")
    schedule = schedule or cfg.schedule
    if schedule.layers != cfg.layers:
        raise ContractError(f"schedule has L={schedule.layers}, model has L={cfg.layers}")

    z = patchify(x_tilde, params, cfg)
    _, frames, height, width = x_tilde.shape
    if (height, width) != (cfg.height, cfg.width):
        raise ShapeError(f"forward: latent grid {height}×{width}, model expects {cfg.height}×{cfg.width}")
    if c_a.frames != frames or c_a.dim != cfg.dim:
        raise ShapeError(f"forward: audio has {c_a.frames} partitions of dim {c_a.dim}, expected {frames} of dim {cfg.dim}")

    z = z.replace(add(z.z, Tensor(positional_encoding(frames, height, width, cfg.dim))))
    modulations, (final_shift, final_scale) = timestep_embed(t, params, cfg)

    for i, mod in enumerate(modulations):
        try:
            z = _block(i, z, c_a, mod, params, cfg, schedule, fusion)
        except ShapeError as e:
            raise ShapeError(f"block {i}: {e}") from e

    out = _modulate(_norm(z.z, cfg.norm_eps), final_shift, final_scale)
    out = add_lastdim(matmul(out, params["final.w"]), params["final.b"])
    return depatchify(out, frames, height, width)
