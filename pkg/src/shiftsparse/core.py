"""Shared primitives: tensors, norms, seeding, binary persistence.

Samples, atoms and coefficient maps are plain float64 numpy arrays of rank
1 or 2. :func:`as_tensor` is the single validating constructor; everything
else in the package accepts anything it accepts.
"""

from __future__ import annotations

import io
import math
import struct
from functools import lru_cache

import numpy as np

MAGIC = b"CSKT"


class ShapeError(ValueError):
    """Operands or inputs have incompatible shapes."""


class DataError(ValueError):
    """Malformed or missing input data."""


class NumericalError(RuntimeError):
    """An iterative solver could not make progress."""


def as_tensor(data, shape=None, *, ranks=(1, 2)):
    """Validate ``data`` and return it as a read-only float64 array.

    ``shape`` reshapes flat row-major data. Non-finite values and ranks
    outside ``ranks`` are rejected.
    """
    arr = np.array(data, dtype=np.float64, copy=True)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if arr.size != math.prod(shape):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if ranks is not None and arr.ndim not in ranks:
        raise ShapeError(f"rank {arr.ndim} not in {tuple(ranks)}")
    if arr.size == 0:
        raise ShapeError("empty tensor")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    arr.flags.writeable = False
    return arr


def check_same_shape(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = check_same_shape(a, b)
    return a + b


def subtract(a, b):
    a, b = check_same_shape(a, b)
    return a - b


def scale(a, c):
    return np.asarray(a, dtype=np.float64) * float(c)


def dot(a, b):
    a, b = check_same_shape(a, b)
    return float(np.dot(a.ravel(), b.ravel()))


def l2_norm(a):
    """``sqrt(dot(a, a))``, evaluated with scaling so tiny or huge entries do not under/overflow."""
    return math.hypot(*np.asarray(a, dtype=np.float64).ravel().tolist())


def l1_norm(a):
    return float(np.abs(np.asarray(a, dtype=np.float64)).sum())


def l0_count(a):
    return int(np.count_nonzero(np.asarray(a)))


# --- divisor functions ----------------------------------------------------

def _divisors(n):
    small, large = [], []
    d = 1
    while d * d <= n:
        if n % d == 0:
            small.append(d)
            if d * d != n:
                large.append(n // d)
        d += 1
    return small + large[::-1]


@lru_cache(maxsize=None)
def piltz(n, kappa):
    """Number of ordered factorizations of ``n`` into ``kappa`` factors."""
    if n < 1 or kappa < 1:
        raise ValueError(f"need n >= 1 and kappa >= 1, got n={n}, kappa={kappa}")
    if kappa == 1:
        return 1
    return sum(piltz(d, kappa - 1) for d in _divisors(n))


def count_spatial_configurations(n, kappa):
    """How many ``kappa``-dimensional signals flatten to one length-``n`` vector.

    Every ordered choice of extents multiplying to ``n`` combined with every
    permutation of the cells: ``piltz(n, kappa) * n!`` (exact integer).
    """
    return piltz(int(n), int(kappa)) * math.factorial(int(n))


# --- randomness -----------------------------------------------------------

def seeded_rng(seed):
    """PCG64 generator seeded from a 64-bit unsigned integer.

    numpy guarantees PCG64 streams are identical across platforms for the
    same seed, which is what result reproducibility relies on.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def worker_seed(seed, worker):
    """Seed for parallel worker ``worker``: ``seed XOR worker``."""
    return (int(seed) ^ int(worker)) & (2**64 - 1)


# --- binary format --------------------------------------------------------
# "CSKT" | u8 rank | rank x u64 extents | f64 payload, all little-endian.

def write_tensor(fh, array):
    arr = np.ascontiguousarray(array, dtype="<f8")
    if arr.ndim > 255:
        raise ShapeError("rank does not fit in a byte")
    fh.write(MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh):
    magic = fh.read(4)
    if magic != MAGIC:
        raise DataError(f"bad tensor magic: expected {MAGIC!r}, got {magic!r}")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = math.prod(shape)
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated tensor stream: wanted {n} bytes, got {len(buf)}")
    return buf


def save_tensors(path, *arrays):
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path):
    """Read every tensor block stored in ``path``."""
    out = []
    with open(path, "rb") as fh:
        data = fh.read()
    stream = io.BytesIO(data)
    while stream.tell() < len(data):
        out.append(read_tensor(stream))
    return out


def tensor_to_bytes(array):
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(payload):
    return read_tensor(io.BytesIO(payload))
