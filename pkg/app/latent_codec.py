"""
Deterministic lossless space-time codec between pixel video and latents

A separable orthonormal Hadamard transform over r_f × p × p blocks. The first
latent frame is the static head: frame 0 replicated r_f times on encode, and
decoded from its first temporal slot.
"""

import logging
import os
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from einops import rearrange, repeat
from PIL import Image

from .errors import ContractError, DataError, FormatError, ShapeError

logger = logging.getLogger(__name__)

VIDEO_MAGIC = b"RAPV"
MASK_MAGIC = b"RAPM"
CONTAINER_VERSION = 1
_CONTAINER_HEADER = struct.Struct("<4sIIIIf")  # magic, version, T, H_px, W_px, fps


@dataclass(frozen=True)
class CodecConfig:
    """Pixel/latent geometry of a run"""

    patch: int = 8
    r_f: int = 4
    res: int = 32
    fps: float = 25.0
    frames: int = 33
    sample_rate: int = 16000

    def __post_init__(self):
        _hadamard(self.patch)
        _hadamard(self.r_f)
        if self.res % self.patch:
            raise ContractError(f"res {self.res} is not a multiple of patch {self.patch}")
        if self.frames < 1 or (self.frames - 1) % self.r_f:
            raise ContractError(f"frames {self.frames} must be 1 + k·r_f (r_f={self.r_f})")

    @property
    def channels(self) -> int:
        return 3 * self.patch * self.patch * self.r_f

    @property
    def latent_frames(self) -> int:
        return 1 + (self.frames - 1) // self.r_f

    @property
    def grid(self) -> int:
        return self.res // self.patch


@dataclass
class VideoClip:
    """RGB frames [3 × T × H_px × W_px], values nominally in [0, 1]"""

    frames: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] != 3:
            raise ShapeError(f"VideoClip expects [3 × T × H × W], got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


@dataclass
class LatentClip:
    latents: np.ndarray
    static_head: bool = True

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float32)
        if self.latents.ndim != 4:
            raise ShapeError(f"LatentClip expects [C × F × H × W], got {self.latents.shape}")

    @property
    def channels(self) -> int:
        return self.latents.shape[0]

    @property
    def frames(self) -> int:
        return self.latents.shape[1]

    def decoded_length(self, r_f: int) -> int:
        return 1 + r_f * (self.frames - 1) if self.static_head else r_f * self.frames


@lru_cache(maxsize=None)
def _hadamard(n: int) -> np.ndarray:
    """Orthonormal Sylvester Hadamard matrix of order n (a power of two)"""
    if n < 1 or n & (n - 1):
        raise ShapeError(f"Hadamard order must be a power of two, got {n}")
    h = np.ones((1, 1), dtype=np.float64)
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n)


def _forward_blocks(grouped: np.ndarray, p: int, r_f: int) -> np.ndarray:
    """grouped [3 × F × r_f × H_px × W_px] -> latents [C × F × H × W]"""
    blocks = rearrange(grouped, "c f t (h y) (w x) -> f h w t y x c", y=p, x=p)
    ht, hp = _hadamard(r_f), _hadamard(p)
    coeffs = np.einsum("at,by,dx,fhwtyxc->fhwabdc", ht, hp, hp, blocks.astype(np.float64), optimize=True)
    return rearrange(coeffs, "f h w a b d c -> (a b d c) f h w").astype(np.float32)


def _inverse_blocks(latents: np.ndarray, p: int, r_f: int) -> np.ndarray:
    """latents [C × F × H × W] -> grouped [3 × F × r_f × H_px × W_px]"""
    coeffs = rearrange(latents.astype(np.float64), "(a b d c) f h w -> f h w a b d c", a=r_f, b=p, d=p, c=3)
    ht, hp = _hadamard(r_f), _hadamard(p)
    blocks = np.einsum("at,by,dx,fhwabdc->fhwtyxc", ht, hp, hp, coeffs, optimize=True)
    return rearrange(blocks, "f h w t y x c -> c f t (h y) (w x)")


def encode_video(v: VideoClip, p: int = 8, r_f: int = 4) -> LatentClip:
    """Static-headed latents of a 1 + k·r_f frame clip"""
    _, length, height, width = v.frames.shape
    if length < 1 or (length - 1) % r_f:
        raise ShapeError(f"encode_video: {length} frames is not 1 + k·r_f for r_f={r_f}")
    if height % p or width % p:
        raise ShapeError(f"encode_video: {height}×{width} pixels not divisible by patch {p}")

    head = repeat(v.frames[:, :1], "c 1 h w -> c 1 t h w", t=r_f)
    rest = rearrange(v.frames[:, 1:], "c (f t) h w -> c f t h w", t=r_f)
    grouped = np.concatenate([head, rest], axis=1)
    return LatentClip(_forward_blocks(grouped, p, r_f), static_head=True)


def decode_latents(latents: LatentClip, p: int = 8, r_f: int = 4, fps: float = 25.0) -> VideoClip:
    if latents.channels != 3 * p * p * r_f:
        raise ShapeError(f"decode_latents: {latents.channels} channels, expected 3·p²·r_f = {3 * p * p * r_f}")
    grouped = _inverse_blocks(latents.latents, p, r_f)
    if latents.static_head:
        head = grouped[:, :1, 0]
        rest = rearrange(grouped[:, 1:], "c f t h w -> c (f t) h w")
        frames = np.concatenate([head, rest], axis=1)
    else:
        frames = rearrange(grouped, "c f t h w -> c (f t) h w")
    return VideoClip(frames.astype(np.float32), fps=fps)


def encode_reference(img: np.ndarray, frames: int, p: int = 8, r_f: int = 4) -> np.ndarray:
    """Reference image repeated across F latent frames, [C × F × H × W]"""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"encode_reference: expected [3 × H × W] image, got {img.shape}")
    if frames < 1:
        raise ContractError(f"encode_reference: F must be >= 1, got {frames}")
    grouped = repeat(img, "c h w -> c 1 t h w", t=r_f)
    single = _forward_blocks(grouped, p, r_f)
    return np.ascontiguousarray(np.repeat(single, frames, axis=1))


def pixel_mask_to_latent(mask: np.ndarray, p: int = 8, r_f: int = 4, channels: Optional[int] = None) -> np.ndarray:
    """Max-pool a per-frame pixel mask [T × H_px × W_px] to latent cells [C × F × H × W]

    A cell is set when any pixel of its r_f × p × p block is set, with the
    static head using frame 0 only.
    """
    mask = np.asarray(mask)
    length, height, width = mask.shape
    if (length - 1) % r_f or height % p or width % p:
        raise ShapeError(f"pixel_mask_to_latent: mask {mask.shape} does not tile r_f={r_f}, p={p}")
    binary = (mask > 0).astype(np.float32)
    head = binary[:1, None]
    rest = rearrange(binary[1:], "(f t) h w -> f t h w", t=r_f)
    pooled_head = rearrange(head, "f 1 (h y) (w x) -> f h w (y x)", y=p, x=p).max(axis=-1)
    pooled_rest = rearrange(rest, "f t (h y) (w x) -> f h w (t y x)", y=p, x=p).max(axis=-1)
    cells = np.concatenate([pooled_head, pooled_rest], axis=0)
    channels = channels if channels is not None else 3 * p * p * r_f
    return np.ascontiguousarray(np.broadcast_to(cells[None], (channels,) + cells.shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

def _write_container(path: str, magic: bytes, body: np.ndarray, fps: float) -> None:
    length, height, width = body.shape[-3:]
    header = _CONTAINER_HEADER.pack(magic, CONTAINER_VERSION, length, height, width, float(fps))
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(body, dtype="<f4").tobytes())
            f.flush()
            os.fsync(f.fileno())
    except OSError as e:
        raise DataError(f"cannot write container: {e}", path=str(path)) from e


def _read_container(path: str, magic: bytes, planes: int) -> Tuple[np.ndarray, float]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read container: {e}", path=str(path)) from e

    if len(raw) < _CONTAINER_HEADER.size:
        raise FormatError("file shorter than header", field="header", path=str(path))
    found_magic, version, length, height, width, fps = _CONTAINER_HEADER.unpack_from(raw, 0)
    if found_magic != magic:
        raise FormatError(f"expected {magic!r}, found {found_magic!r}", field="magic", path=str(path))
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported version {version}, expected {CONTAINER_VERSION}", field="version", path=str(path))
    if not fps > 0:
        raise FormatError(f"fps must be positive, found {fps}", field="fps", path=str(path))
    count = planes * length * height * width
    expected = _CONTAINER_HEADER.size + 4 * count
    if len(raw) != expected:
        raise FormatError(f"payload is {len(raw)} bytes, header implies {expected}", field="payload", path=str(path))
    body = np.frombuffer(raw, dtype="<f4", offset=_CONTAINER_HEADER.size, count=count)
    shape = (planes, length, height, width) if planes > 1 else (length, height, width)
    return body.reshape(shape).astype(np.float32), float(fps)


def write_video(path: str, clip: VideoClip) -> None:
    _write_container(path, VIDEO_MAGIC, clip.frames, clip.fps)


def read_video(path: str) -> VideoClip:
    frames, fps = _read_container(path, VIDEO_MAGIC, planes=3)
    return VideoClip(frames, fps=fps)


def write_mask(path: str, mask: np.ndarray, fps: float) -> None:
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim != 3:
        raise ShapeError(f"write_mask expects [T × H × W], got {mask.shape}")
    _write_container(path, MASK_MAGIC, mask, fps)


def read_mask(path: str) -> np.ndarray:
    mask, _ = _read_container(path, MASK_MAGIC, planes=1)
    return mask


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def export_frame_ppm(clip: VideoClip, index: int, path: str) -> None:
    """Write one frame as an image (PPM when the path ends in .ppm)"""
    if not 0 <= index < clip.length:
        raise ContractError(f"frame {index} out of range for {clip.length} frames")
    Image.fromarray(rearrange(to_uint8(clip.frames[:, index]), "c h w -> h w c"), mode="RGB").save(path)


def load_reference_image(path: str, res: Optional[int] = None) -> np.ndarray:
    """Reference image as [3 × H × W] in [0, 1]; RAPV files yield their first frame"""
    path = str(path)
    if path.lower().endswith(".rapv"):
        return read_video(path).frames[:, 0].copy()
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if res is not None and rgb.size != (res, res):
                logger.info(f"Resizing reference {rgb.size} -> {res}×{res}")
                rgb = rgb.resize((res, res), Image.BILINEAR)
            pixels = np.asarray(rgb, dtype=np.float32) / 255.0
    except OSError as e:
        raise DataError(f"cannot read reference image: {e}", path=path) from e
    return np.ascontiguousarray(rearrange(pixels, "h w c -> c h w"))
