"""
Dense tensor arithmetic with a reverse-mode gradient tape

Tensors wrap row-major numpy buffers. Ops are pure functions; when a
GradTape is active and at least one input is tracked, the op appends a node
holding its vector-Jacobian product. backward() walks the nodes in reverse
append order exactly once.
"""

import contextlib
import contextvars
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("rap_dtype", default=np.dtype(np.float32))
_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("rap_tape", default=None)

# Handles are unique across tapes so a stale tensor never aliases a live one
_handle_counter = itertools.count(1)

VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Run a block with a different default float type (float64 for gradient checks)"""
    token = _DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    """Immutable n-dimensional float array, optionally tracked by a tape"""

    __slots__ = ("data", "grad_id")

    def __init__(self, data, grad_id: Optional[int] = None):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE.get())
        self.grad_id = grad_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        tracked = f", grad_id={self.grad_id}" if self.grad_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tracked})"


@dataclass
class TapeNode:
    kind: str
    inputs: Tuple[Optional[int], ...]
    output: int
    vjp: VJP


class GradTape:
    """Append-only record of tracked ops; single-threaded, never shared"""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._live: set = set()
        self._watched: Dict[str, Tuple[int, Tuple[int, ...]]] = {}
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, tensor: Tensor, name: str) -> Tensor:
        """Return a tracked alias of a parameter; gradients are reported under `name`"""
        handle = next(_handle_counter)
        self._live.add(handle)
        self._watched[name] = (handle, tensor.shape)
        return Tensor(tensor.data, grad_id=handle)

    def watch_all(self, params: Dict[str, Tensor]) -> Dict[str, Tensor]:
        return {name: self.watch(value, name) for name, value in params.items()}

    @property
    def watched(self) -> Dict[str, Tuple[int, Tuple[int, ...]]]:
        return dict(self._watched)

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.grad_id is not None and tensor.grad_id in self._live

    def record(self, kind: str, inputs: Sequence[Tensor], data: np.ndarray, vjp: VJP) -> Tensor:
        handle = next(_handle_counter)
        self._live.add(handle)
        input_ids = tuple(t.grad_id if self.tracks(t) else None for t in inputs)
        self.nodes.append(TapeNode(kind=kind, inputs=input_ids, output=handle, vjp=vjp))
        return Tensor(data, grad_id=handle)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(tape.tracks(t) for t in inputs):
        return Tensor(data)
    return tape.record(kind, inputs, data, vjp)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum64(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def tensor(data) -> Tensor:
    return Tensor(np.asarray(data))


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_DTYPE.get()))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=_DTYPE.get()))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _emit("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(a: Tensor, s: float) -> Tensor:
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    out = x * sig

    def vjp(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _emit("silu", out, (a,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU"""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner),)

    return _emit("gelu", out, (a,), vjp)


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "silu": silu,
    "gelu": gelu,
    "identity": identity,
}


def get_activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation '{name}', expected one of {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# trailing-dimension affine (the only broadcasting supported)
# ---------------------------------------------------------------------------

def _check_lastdim(op: str, x: Tensor, v: Tensor) -> None:
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"{op}: trailing dimension mismatch {x.shape} vs {v.shape}")


def add_lastdim(x: Tensor, b: Tensor) -> Tensor:
    _check_lastdim("add_lastdim", x, b)
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        return g, _sum64(g, axis=lead).astype(g.dtype)

    return _emit("add_lastdim", x.data + b.data, (x, b), vjp)


def mul_lastdim(x: Tensor, w: Tensor) -> Tensor:
    _check_lastdim("mul_lastdim", x, w)
    x_data, w_data = x.data, w.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        return g * w_data, _sum64(g * x_data, axis=lead).astype(g.dtype)

    return _emit("mul_lastdim", x_data * w_data, (x, w), vjp)


# ---------------------------------------------------------------------------
# linear algebra and layout
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a[m×k] and b[k×n]"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return _emit("matmul", a_data @ b_data, (a, b), vjp)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Per-batch matrix product of a[g×m×k] and b[g×k×n]"""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"batched_matmul: cannot multiply {a.shape} by {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g):
        return np.matmul(g, b_data.transpose(0, 2, 1)), np.matmul(a_data.transpose(0, 2, 1), g)

    return _emit("batched_matmul", np.matmul(a_data, b_data), (a, b), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("permute", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis"""
    axis = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src_shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=g.dtype if g.dtype.kind == "f" else dtype)
        full[index] = g
        return (full,)

    return _emit("slice", a.data[index], (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ContractError("concat: no tensors given")
    if len(parts) == 1:
        return parts[0]
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]} on axis {axis}") from None
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(lo), int(hi))
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _emit("concat", out, tuple(parts), vjp)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows (axis 0); repeated indices accumulate in the backward pass"""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape}")
    src_shape = a.shape

    def vjp(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", a.data[idx], (a,), vjp)


# ---------------------------------------------------------------------------
# normalisation and reductions
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted"""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: empty last dimension in {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / _sum64(e, axis=-1, keepdims=True)).astype(x.data.dtype)

    def vjp(g):
        dot = _sum64(g * out, axis=-1, keepdims=True).astype(g.dtype)
        return (out * (g - dot),)

    return _emit("softmax", out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each trailing slice to zero mean / unit variance, then apply gain and bias"""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    _check_lastdim("layer_norm", x, gain)
    _check_lastdim("layer_norm", x, bias)
    d = x.shape[-1]
    data = x.data
    mean = _sum64(data, axis=-1, keepdims=True) / d
    centered = data - mean
    var = _sum64(centered * centered, axis=-1, keepdims=True) / d
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (centered * inv_std).astype(data.dtype)
    out = x_hat * gain.data + bias.data
    gain_data = gain.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        g_hat = g * gain_data
        mean_g = _sum64(g_hat, axis=-1, keepdims=True) / d
        mean_gx = _sum64(g_hat * x_hat, axis=-1, keepdims=True) / d
        dx = (inv_std * (g_hat - mean_g - x_hat * mean_gx)).astype(g.dtype)
        d_gain = _sum64(g * x_hat, axis=lead).astype(g.dtype)
        d_bias = _sum64(g, axis=lead).astype(g.dtype)
        return dx, d_gain, d_bias

    return _emit("layer_norm", out, (x, gain, bias), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    total = np.asarray(_sum64(x.data), dtype=x.data.dtype)
    return _emit("sum", total, (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean_square(x: Tensor) -> Tensor:
    """mean(x²) as one node"""
    data = x.data
    count = max(x.size, 1)
    total = np.asarray(_sum64(data * data) / count, dtype=data.dtype)
    return _emit("mean_square", total, (x,), lambda g: ((2.0 / count) * g * data,))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: GradTape) -> Dict[str, Tensor]:
    """Gradients of a scalar loss with respect to every watched parameter

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.shape != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {}
    if tape.tracks(loss):
        grads[loss.grad_id] = np.ones((), dtype=loss.data.dtype)

    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for handle, contribution in zip(node.inputs, node.vjp(g)):
            if handle is None or contribution is None:
                continue
            previous = grads.get(handle)
            grads[handle] = contribution if previous is None else previous + contribution

    result: Dict[str, Tensor] = {}
    for name, (handle, shape) in tape.watched.items():
        g = grads.get(handle)
        result[name] = Tensor(g) if g is not None else zeros(shape)
    return result


def value_and_grad(f: Callable[[Dict[str, Tensor]], Tensor], params: Dict[str, Tensor]) -> Tuple[Tensor, Dict[str, Tensor]]:
    with GradTape() as tape:
        loss = f(tape.watch_all(params))
    return loss, backward(loss, tape)


@dataclass
class GradientReport:
    """Per-parameter max relative error between tape and central differences"""

    errors: Dict[str, float]
    tol: float
    h: float
    checked: Dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def worst(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)


def check_gradients(
    f: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-3,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradientReport:
    """Compare tape gradients with central differences, in float64

    Relative error of a parameter is max|g_tape - g_fd| / max(max|g_tape|, max|g_fd|, 1e-8).
    With `max_entries`, only that many coordinates per parameter are checked
    (chosen with `rng`).
    """
    if not 0.0 < h < 1e-1:
        raise ContractError(f"check_gradients: step h must lie in (0, 0.1), got {h}")

    with precision(np.float64):
        base = {name: Tensor(value.data) for name, value in params.items()}

        first = f(base).item()
        second = f(base).item()
        if first != second and not (math.isnan(first) and math.isnan(second)):
            raise ContractError(f"check_gradients: f is not deterministic ({first!r} != {second!r})")

        _, tape_grads = value_and_grad(f, base)

        errors: Dict[str, float] = {}
        checked: Dict[str, int] = {}
        for name, value in base.items():
            flat_count = value.size
            positions = np.arange(flat_count)
            if max_entries is not None and flat_count > max_entries:
                chooser = rng if rng is not None else np.random.default_rng(0)
                positions = np.sort(chooser.choice(flat_count, size=max_entries, replace=False))

            analytic = tape_grads[name].data.reshape(-1)[positions]
            numeric = np.zeros(len(positions), dtype=np.float64)
            for slot, position in enumerate(positions):
                shifted = value.data.copy().reshape(-1)
                shifted[position] += h
                plus = f({**base, name: Tensor(shifted.reshape(value.shape))}).item()
                shifted[position] -= 2 * h
                minus = f({**base, name: Tensor(shifted.reshape(value.shape))}).item()
                numeric[slot] = (plus - minus) / (2 * h)

            denom = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
            errors[name] = float(np.max(np.abs(analytic - numeric), initial=0.0)) / denom
            checked[name] = len(positions)

    report = GradientReport(errors=errors, tol=tol, h=h, checked=checked)
    if not report.passed:
        logger.warning(f"Gradient check failed: worst parameter {report.worst()} rel err {report.max_error:.3e} > {tol:.1e}")
    return report
