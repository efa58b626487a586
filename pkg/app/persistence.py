"""
Checkpoint and configuration serialization

Checkpoint layout (all little-endian):

    "RAPC" | version u32 | blob_len u32 | JSON blob
    tensor_count u32
    per tensor: name_len u16 | utf-8 name | dtype u8 (0 = f32) | rank u8 | dims u32×rank | offset u64
    payload: row-major buffers, offsets relative to payload start
    CRC32 u32 over every preceding byte
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RAPC"
CHECKPOINT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}
_PREAMBLE = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U64 = struct.Struct("<Q")
_CODE_RANK = struct.Struct("<BB")


@dataclass
class Checkpoint:
    """Named float32 tensors plus a JSON-serializable metadata blob"""

    meta: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def section(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under `prefix.`, with the prefix stripped"""
        start = len(prefix) + 1
        return {name[start:]: value for name, value in self.tensors.items() if name.startswith(prefix + ".")}


def _encode(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts = [_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)), blob, _U32.pack(len(ckpt.tensors))]

    payload = []
    offset = 0
    for name, value in ckpt.tensors.items():
        array = np.ascontiguousarray(value, dtype="<f4")
        encoded_name = name.encode("utf-8")
        parts.append(_U16.pack(len(encoded_name)) + encoded_name)
        parts.append(_CODE_RANK.pack(0, array.ndim))
        parts.append(b"".join(_U32.pack(d) for d in array.shape))
        parts.append(_U64.pack(offset))
        raw = array.tobytes()
        payload.append(raw)
        offset += len(raw)

    body = b"".join(parts) + b"".join(payload)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename), fsync before returning"""
    data = _encode(ckpt)
    tmp = f"{path}.tmp"
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as e:
        raise DataError(f"cannot write checkpoint: {e}", path=str(path)) from e
    logger.info(f"Saved checkpoint with {len(ckpt.tensors)} tensors ({len(data)} bytes) to {path}")


class _Reader:
    def __init__(self, raw: bytes, path: str, end: int):
        self.raw = raw
        self.path = path
        self.end = end
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > self.end:
            raise FormatError(f"truncated while reading {what}", field="structure", path=self.path)
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> Tuple:
        return fmt.unpack(self.take(fmt.size, what))


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint: {e}", path=str(path)) from e
    path = str(path)

    if len(raw) < _PREAMBLE.size + _U32.size:
        raise FormatError("file shorter than header", field="structure", path=path)
    magic, version, blob_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"expected {CHECKPOINT_MAGIC!r}, found {magic!r}", field="magic", path=path)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}", field="version", path=path)

    body_end = len(raw) - _U32.size
    (stored_crc,) = _U32.unpack_from(raw, body_end)
    if zlib.crc32(raw[:body_end]) & 0xFFFFFFFF != stored_crc:
        raise FormatError("CRC32 mismatch (file truncated or corrupted)", field="crc", path=path)

    reader = _Reader(raw, path, body_end)
    reader.take(_PREAMBLE.size, "preamble")
    try:
        meta = json.loads(reader.take(blob_len, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"config blob is not valid JSON: {e}", field="config", path=path) from e

    (count,) = reader.unpack(_U32, "tensor count")
    entries = []
    for _ in range(count):
        (name_len,) = reader.unpack(_U16, "name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        code, rank = reader.unpack(_CODE_RANK, f"dtype of {name}")
        if code not in DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} for tensor {name}", field="dtype", path=path)
        dims = tuple(reader.unpack(_U32, f"dims of {name}")[0] for _ in range(rank))
        (offset,) = reader.unpack(_U64, f"offset of {name}")
        entries.append((name, dims, offset))

    payload_start = reader.pos
    tensors: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for name, dims, offset in entries:
        if offset != expected_offset:
            raise FormatError(f"tensor {name} at offset {offset}, expected {expected_offset}", field="offset", path=path)
        size = int(np.prod(dims, dtype=np.int64)) * 4
        start = payload_start + offset
        if start + size > body_end:
            raise FormatError(f"tensor {name} runs past the payload", field="structure", path=path)
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=start).reshape(dims).astype(np.float32)
        expected_offset = offset + size
    if payload_start + expected_offset != body_end:
        raise FormatError("trailing bytes after payload", field="structure", path=path)

    return Checkpoint(meta=meta, tensors=tensors)


def check_tensor_names(expected: Iterable[str], found: Iterable[str], what: str = "model") -> None:
    """DataError listing missing and unexpected names when the sets differ"""
    expected_set, found_set = set(expected), set(found)
    if expected_set == found_set:
        return
    missing = sorted(expected_set - found_set)
    unknown = sorted(found_set - expected_set)
    raise DataError(f"{what} tensors do not match: expected but missing {missing}, found but unknown {unknown}")


def check_tensor_shapes(expected: Mapping[str, Tuple[int, ...]], found: Mapping[str, np.ndarray]) -> None:
    for name, shape in expected.items():
        if tuple(found[name].shape) != tuple(shape):
            raise ShapeError(f"tensor {name}: checkpoint has {tuple(found[name].shape)}, config expects {tuple(shape)}")


# ---------------------------------------------------------------------------
# RNG state
# ---------------------------------------------------------------------------

def _to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.asarray(value["__ndarray__"], dtype=value["dtype"])
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


def encode_rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return _to_jsonable(rng.bit_generator.state)


def decode_rng_state(state: Dict[str, Any]) -> np.random.Generator:
    decoded = _from_jsonable(state)
    name = decoded.get("bit_generator")
    if name != "Philox":
        raise FormatError(f"unsupported bit generator {name!r}", field="rng")
    bit_generator = np.random.Philox()
    bit_generator.state = decoded
    return np.random.Generator(bit_generator)


# ---------------------------------------------------------------------------
# key = value config files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfigValue:
    text: str
    line_number: Optional[int] = None


def parse_config_text(text: str) -> Dict[str, ConfigValue]:
    """Parse `key = value` lines; `#` starts a comment, blank lines are skipped"""
    values: Dict[str, ConfigValue] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", line_number=line_number)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key or not value:
            raise ConfigError(f"empty key or value in {stripped!r}", line_number=line_number)
        if key in values:
            raise ConfigError(f"duplicate key '{key}' (first set on line {values[key].line_number})", line_number=line_number, key=key)
        values[key] = ConfigValue(value, line_number)
    return values


def load_config_file(path: str) -> Dict[str, ConfigValue]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text)


def coerce_value(raw: ConfigValue, key: str, kind: type) -> Any:
    """Convert a config string to bool/int/float/str, naming the line on failure"""
    text = raw.text
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}", line_number=raw.line_number, key=key) from None
