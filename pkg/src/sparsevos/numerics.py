"""Dense float32 array substrate shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in row-major
order. The operations here are the only place MACs are charged to the active
:class:`~sparsevos.ledger.CostLedger`.
"""

from __future__ import annotations

import math
import struct
import warnings
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ledger import record

DTYPE = np.float32
MAGIC = b"ESM2"
FORMAT_VERSION = 1


class DimensionError(ValueError):
    pass


class FormatError(ValueError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class DegenerateRowWarning(RuntimeWarning):
    pass


def tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float32 tensor, optionally reshaping flat row-major data."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} elements as {shape}")
        arr = arr.reshape(shape)
    return arr


def zeros(*shape: int) -> np.ndarray:
    return np.zeros(shape, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray, module: str | None = None) -> np.ndarray:
    """Matrix product over the last two axes, broadcasting leading axes.

    Charges ``batch * M * P * Q`` MACs to the attached ledger.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a, b)
    m, p = a.shape[-2], a.shape[-1]
    q = b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    record(batch * m * p * q, module)
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction.

    Rows that are entirely ``-inf`` come back as zeros and raise a
    :class:`DegenerateRowWarning`.
    """
    x = np.asarray(x)
    peak = np.max(x, axis=-1, keepdims=True)
    dead = ~np.isfinite(peak)
    if np.any(dead):
        warnings.warn("softmax row is entirely -inf", DegenerateRowWarning, stacklevel=2)
        peak = np.where(dead, 0.0, peak)
    e = np.exp(x - peak)
    s = np.sum(e, axis=-1, keepdims=True)
    s = np.where(s == 0, 1.0, s)
    return e / s


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    if x.shape[-1] != gamma.shape[-1]:
        raise DimensionError(f"layernorm width {gamma.shape[-1]} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def topk_indices(v: Sequence[float], k: int) -> list[int]:
    """Indices of the ``k`` largest entries, ascending by index.

    Ties go to the lower index.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if k < 0 or k > v.size:
        raise ValueError(f"k={k} outside [0, {v.size}]")
    order = np.argsort(-v, kind="stable")[:k]
    return sorted(int(i) for i in order)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine similarity of {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# -- deterministic generator -------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 stream. Identical draws for identical seeds on any platform.

    Draw ``i`` (counting from 1) is ``mix(seed + i * 0x9E3779B97F4A7C15)``,
    which lets blocks of draws be produced with vectorised uint64 arithmetic.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, shape: Sequence[int] | int) -> np.ndarray:
        """float64 draws in [0, 1) with 53 random bits."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def normal(self, shape: Sequence[int] | int, std: float = 1.0) -> np.ndarray:
        """float32 Gaussian draws via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape))
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return (z * std).astype(DTYPE).reshape(shape)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        return low + (self.next_u64(n) % np.uint64(span)).astype(np.int64)

    def fork(self, label: int) -> "Rng":
        """Independent child stream derived from this seed and ``label``."""
        with np.errstate(over="ignore"):
            child = _mix(np.array([self.seed ^ ((label * 0xD1B54A32D192ED03) & _MASK64)], dtype=np.uint64))
        return Rng(int(child[0]))


# -- tensor files ----------------------------------------------------------
#
# "ESM2" | u32 version | u32 count | count x (u32 name_len | name utf-8 |
# u32 rank | rank x u32 extent | little-endian f32 payload)


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")  # tobytes() is C-order; ascontiguousarray would promote 0-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    return parse_tensors(buf)


def parse_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not an ESM2 tensor file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported tensor file version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated tensor file")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(DTYPE)
        out[name] = data.reshape(shape)
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return out
