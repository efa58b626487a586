"""
Flow-matching forward process, velocity target, composite loss and CFG

Path: x_t = t·x1 + (1-t)·x0 with x0 the clean latent and x1 Gaussian noise,
so the target velocity is u = x1 - x0 for every t.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ContractError, ShapeError
from .latent_codec import pixel_mask_to_latent
from .numerics import Tensor, add, mean_square, mul, scale, slice_axis, sub

logger = logging.getLogger(__name__)

DEFAULT_FACE_WEIGHT = 1.0
DEFAULT_TEMPORAL_WEIGHT = 1.0
DEFAULT_CFG_SCALE = 5.0


@dataclass(frozen=True)
class LossWeights:
    face: float = DEFAULT_FACE_WEIGHT
    temporal: float = DEFAULT_TEMPORAL_WEIGHT

    def __post_init__(self):
        if self.face < 0 or self.temporal < 0:
            raise ContractError(f"loss weights must be >= 0, got face={self.face}, temporal={self.temporal}")


@dataclass
class FaceMask:
    """Binary mask on the latent grid [C × F × H × W]"""

    m: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float32)
        if self.m.ndim != 4:
            raise ShapeError(f"FaceMask expects [C × F × H × W], got {self.m.shape}")
        if not np.all((self.m == 0) | (self.m == 1)):
            raise ContractError("FaceMask must be binary")

    @classmethod
    def from_pixels(cls, mask: np.ndarray, p: int, r_f: int, channels: int) -> "FaceMask":
        return cls(pixel_mask_to_latent(mask, p=p, r_f=r_f, channels=channels))

    @classmethod
    def ones(cls, shape) -> "FaceMask":
        return cls(np.ones(shape, dtype=np.float32))

    @property
    def frames(self) -> int:
        return self.m.shape[1]

    def window(self, start: int, count: int) -> "FaceMask":
        if start < 0 or start + count > self.frames:
            raise ContractError(f"mask window [{start}, {start + count}) outside {self.frames} frames")
        return FaceMask(self.m[:, start:start + count])


@dataclass
class LossTerms:
    """Differentiable total plus the unweighted term values for logging"""

    total: Tensor
    diffusion: float
    face: float
    temporal: float

    @property
    def value(self) -> float:
        return self.total.item()


def _check_time(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t={t} outside [0, 1]")


def interpolate(x0: Tensor, x1: Tensor, t: float) -> Tensor:
    _check_time(t)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate: shape mismatch {x0.shape} vs {x1.shape}")
    return add(scale(x1, t), scale(x0, 1.0 - t))


def target_velocity(x0: Tensor, x1: Tensor) -> Tensor:
    if x0.shape != x1.shape:
        raise ShapeError(f"target_velocity: shape mismatch {x0.shape} vs {x1.shape}")
    return sub(x1, x0)


def temporal_difference(x: Tensor) -> Tensor:
    """Δx = x[:, 1:] - x[:, :-1] along the frame axis"""
    frames = x.shape[1]
    return sub(slice_axis(x, 1, 1, frames), slice_axis(x, 1, 0, frames - 1))


def composite_loss(v: Tensor, u: Tensor, m: FaceMask, wts: LossWeights) -> LossTerms:
    """mean‖v-u‖² + λ·mean‖m⊙(v-u)‖² + μ·mean‖Δv-Δu‖²

    Each term is a mean over its own element count; the temporal term is
    skipped for a single frame.
    """
    if v.shape != u.shape:
        raise ShapeError(f"composite_loss: v {v.shape} vs u {u.shape}")
    if m.m.shape != v.shape:
        raise ShapeError(f"composite_loss: mask {m.m.shape} vs velocity {v.shape}")
    if v.ndim != 4 or v.shape[1] < 1:
        raise ContractError(f"composite_loss: expected [C × F × H × W] with F >= 1, got {v.shape}")

    diff = sub(v, u)
    diffusion = mean_square(diff)
    face = mean_square(mul(Tensor(m.m), diff))
    total = add(diffusion, scale(face, wts.face))

    temporal_value = 0.0
    if v.shape[1] > 1:
        temporal = mean_square(sub(temporal_difference(v), temporal_difference(u)))
        total = add(total, scale(temporal, wts.temporal))
        temporal_value = temporal.item()

    return LossTerms(total=total, diffusion=diffusion.item(), face=face.item(), temporal=temporal_value)


ArrayLike = Union[Tensor, np.ndarray]


def cfg_combine(v_cond: ArrayLike, v_uncond: ArrayLike, s: float) -> ArrayLike:
    """v = v_uncond + s·(v_cond - v_uncond); s=1 and s=0 return the inputs exactly"""
    if s == 1.0:
        return v_cond
    if s == 0.0:
        return v_uncond
    if isinstance(v_cond, Tensor):
        return add(v_uncond, scale(sub(v_cond, v_uncond), s))
    if np.shape(v_cond) != np.shape(v_uncond):
        raise ShapeError(f"cfg_combine: shape mismatch {np.shape(v_cond)} vs {np.shape(v_uncond)}")
    return v_uncond + s * (v_cond - v_uncond)
