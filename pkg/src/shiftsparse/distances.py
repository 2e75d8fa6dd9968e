"""Distances between equally shaped images or signals.

Three notions are provided: the plain vectorized Euclidean distance, the
minimum Euclidean distance over integer translations of one operand (with
zero fill), and the reciprocal of the peak cross-correlation.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import check_same_shape

FFT_AREA_THRESHOLD = 1024


class UndefinedDistanceError(ValueError):
    """The correlation peak is not positive, so its reciprocal is meaningless."""


def euclidean_distance(a, b):
    a, b = check_same_shape(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return math.sqrt(float(np.sum((a - b) ** 2)))


def _per_axis(value, ndim, name):
    if np.isscalar(value):
        value = (int(value),) * ndim
    value = tuple(int(v) for v in value)
    if len(value) != ndim:
        raise ValueError(f"{name} needs {ndim} entries, got {value}")
    if any(v < 0 for v in value):
        raise ValueError(f"{name} must be non-negative, got {value}")
    return value


def shift_distance_map(a, b, max_shift=None):
    """Euclidean distance of ``shift(a, d)`` to ``b`` for every displacement.

    ``shift(a, d)[i] = a[i - d]`` with zeros outside ``a``. The returned
    array is indexed by ``d + max_shift`` per axis, so position
    ``max_shift`` holds the unshifted distance.
    """
    a, b = check_same_shape(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    shape = a.shape
    if max_shift is None:
        max_shift = tuple(n - 1 for n in shape)
    s = _per_axis(max_shift, a.ndim, "max_shift")
    padded = np.pad(a, [(k, k) for k in s])
    # windows[u] is the frame of `padded` starting at u, i.e. shift d = s - u
    windows = sliding_window_view(padded, shape)
    axes = tuple(range(-a.ndim, 0))
    out = np.empty(tuple(2 * k + 1 for k in s))
    # chunk along the first shift axis to bound memory on large frames
    step = max(1, int(4e6 // max(1, windows[0].size)))
    for start in range(0, windows.shape[0], step):
        block = windows[start:start + step]
        out[start:start + step] = np.sum((block - b) ** 2, axis=axes)
    # reverse so that index increases with displacement
    out = out[(slice(None, None, -1),) * a.ndim]
    return np.sqrt(out)


def shift_min_distance(a, b, max_shift=None):
    """Smallest Euclidean distance between a translate of ``a`` and ``b``.

    ``a`` is zero-padded by ``max_shift`` (default: full overlap range) and
    moved by every integer displacement ``d`` with ``|d| <= max_shift`` per
    axis. Returns ``(distance, d)`` where ``b[i] ~ a[i - d]``; ties resolve
    to the lexicographically smallest ``d``.
    """
    a = np.asarray(a, dtype=np.float64)
    if max_shift is None:
        max_shift = tuple(n - 1 for n in a.shape)
    s = _per_axis(max_shift, a.ndim, "max_shift")
    dmap = shift_distance_map(a, b, s)
    idx = np.unravel_index(int(np.argmin(dmap)), dmap.shape)
    shift = tuple(int(i) - k for i, k in zip(idx, s))
    return float(dmap[idx]), shift


def cross_correlation_naive(a, b):
    """Full linear cross-correlation by explicit lag enumeration.

    ``out[lag + (len(b) - 1)] = sum_i a[i + lag] * b[i]`` per axis.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != b.ndim:
        raise ValueError(f"rank mismatch: {a.shape} vs {b.shape}")
    out_shape = tuple(na + nb - 1 for na, nb in zip(a.shape, b.shape))
    out = np.empty(out_shape)
    for index in itertools.product(*(range(n) for n in out_shape)):
        sa, sb = [], []
        for k, na, nb in zip(index, a.shape, b.shape):
            lag = k - (nb - 1)
            lo = max(0, -lag)
            hi = min(nb, na - lag)
            sa.append(slice(lo + lag, hi + lag))
            sb.append(slice(lo, hi))
        out[index] = np.sum(a[tuple(sa)] * b[tuple(sb)])
    return out


def cross_correlation_fft(a, b):
    """Same result as :func:`cross_correlation_naive`, computed with FFTs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != b.ndim:
        raise ValueError(f"rank mismatch: {a.shape} vs {b.shape}")
    size = tuple(na + nb - 1 for na, nb in zip(a.shape, b.shape))
    axes = tuple(range(a.ndim))
    spec = np.fft.rfftn(a, size, axes=axes) * np.conj(np.fft.rfftn(b, size, axes=axes))
    circ = np.fft.irfftn(spec, size, axes=axes)
    # negative lags wrap to the tail; roll them to the front
    return np.roll(circ, tuple(nb - 1 for nb in b.shape), axis=axes)


def cross_correlation(a, b, method="auto"):
    if method == "auto":
        area = math.prod(na + nb - 1 for na, nb in zip(np.shape(a), np.shape(b)))
        method = "fft" if area > FFT_AREA_THRESHOLD else "direct"
    if method == "fft":
        return cross_correlation_fft(a, b)
    if method == "direct":
        return cross_correlation_naive(a, b)
    raise ValueError(f"unknown correlation method {method!r}")


def xcorr_distance(a, b, normalized=False, method="auto"):
    """Reciprocal of the peak full cross-correlation of ``a`` and ``b``.

    With ``normalized`` the peak is divided by ``|a| |b|`` first.
    """
    a, b = check_same_shape(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    peak = float(np.max(cross_correlation(a, b, method)))
    if normalized:
        denom = float(np.linalg.norm(a) * np.linalg.norm(b))
        peak = peak / denom if denom > 0 else 0.0
    if not peak > 0:
        raise UndefinedDistanceError(f"correlation peak {peak!r} is not positive; distance undefined")
    return 1.0 / peak
