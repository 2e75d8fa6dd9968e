"""Sparse coding solvers.

* :func:`omp` greedy l0 coding against a matrix dictionary.
* :func:`best_atom_match` picks the single shifted, scaled atom that best
  explains a sample (the assignment step of shift-invariant k-means).
* :func:`conv_bpdn` l1-regularized convolutional coding with same-size
  coefficient maps.
* :func:`extract_patches` sliding windows for patch-based learning.

Batch variants (``*_batch``) work on stacked samples and are what the
learners use; the single-sample functions wrap them.

Two placement conventions appear. ``"valid"`` offsets put the atom's first
element at the offset, fully inside the sample (matching). ``"same"``
offsets index a coefficient map of the sample's shape; the atom is placed
so that its element ``(m - 1) // 2`` lands on the offset and anything
falling outside the sample is cut off (convolutional coding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .core import NumericalError, ShapeError

DIRECT_AREA_THRESHOLD = 1024


@dataclass(frozen=True)
class SparseCode:
    """Coefficients of one sample as (atom, offset, value) triplets."""

    atoms: np.ndarray          # (nnz,) int
    offsets: np.ndarray        # (nnz, ndim) int
    coefs: np.ndarray          # (nnz,) float
    sample_shape: tuple
    atom_shape: tuple
    mode: str = "valid"

    def __post_init__(self):
        if self.mode not in ("valid", "same"):
            raise ValueError(f"unknown placement mode {self.mode!r}")
        if not (len(self.atoms) == len(self.offsets) == len(self.coefs)):
            raise ValueError("triplet arrays differ in length")
        grid = self.offset_grid
        keys = set()
        for k, t in zip(self.atoms.tolist(), self.offsets.tolist()):
            if any(not 0 <= ti < gi for ti, gi in zip(t, grid)):
                raise ShapeError(f"offset {tuple(t)} outside grid {grid}")
            key = (k, tuple(t))
            if key in keys:
                raise ValueError(f"duplicate entry for atom {k} at {tuple(t)}")
            keys.add(key)

    @property
    def offset_grid(self):
        if self.mode == "same":
            return tuple(self.sample_shape)
        return tuple(n - m + 1 for n, m in zip(self.sample_shape, self.atom_shape))

    @property
    def nnz(self):
        return int(np.count_nonzero(self.coefs))

    def to_dense(self, n_atoms):
        """Coefficient maps of shape ``(n_atoms, *offset_grid)``."""
        maps = np.zeros((n_atoms,) + self.offset_grid)
        for k, t, c in zip(self.atoms, self.offsets, self.coefs):
            maps[(int(k),) + tuple(int(v) for v in t)] = c
        return maps

    @classmethod
    def from_dense(cls, maps, sample_shape, atom_shape, mode="valid"):
        maps = np.asarray(maps, dtype=np.float64)
        nz = np.nonzero(maps)
        atoms = nz[0].astype(np.int64)
        offsets = np.stack(nz[1:], axis=1).astype(np.int64) if atoms.size else np.zeros((0, maps.ndim - 1), np.int64)
        return cls(atoms, offsets, maps[nz], tuple(sample_shape), tuple(atom_shape), mode)


@dataclass(frozen=True)
class AtomMatch:
    atom: int
    offset: tuple
    coef: float
    residual_energy: float


# --- orthogonal matching pursuit ------------------------------------------

def omp_batch(Y, D, sparsity, chunk=2048):
    """OMP for every row of ``Y`` against the unit-norm columns of ``D``.

    Returns ``(indices, coefs)``, each ``(n_samples, sparsity)``; entry ``i``
    of a row is the atom picked at step ``i`` and its final coefficient.
    A row whose residual vanishes early, or is orthogonal to every unused
    atom, keeps coefficient 0 for the remaining steps. Duplicate atoms or a
    linearly dependent selection raise :class:`NumericalError`.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    D = np.asarray(D, dtype=np.float64)
    if Y.shape[1] != D.shape[0]:
        raise ShapeError(f"signal length {Y.shape[1]} does not match dictionary rows {D.shape[0]}")
    n_atoms = D.shape[1]
    if not 1 <= sparsity <= n_atoms:
        raise ValueError(f"sparsity must be in [1, {n_atoms}], got {sparsity}")
    gram = D.T @ D
    np.fill_diagonal(gram, 0.0)
    if n_atoms > 1 and np.max(np.abs(gram)) >= 1.0 - 1e-12:
        i, j = np.unravel_index(np.argmax(np.abs(gram)), gram.shape)
        raise NumericalError(f"atoms {min(i, j)} and {max(i, j)} are duplicates (up to sign)")
    indices = np.zeros((len(Y), sparsity), dtype=np.int64)
    coefs = np.zeros((len(Y), sparsity))
    for start in range(0, len(Y), chunk):
        sl = slice(start, start + chunk)
        indices[sl], coefs[sl] = _omp_chunk(Y[sl], D, sparsity)
    return indices, coefs


def _omp_chunk(Y, D, sparsity, tol=1e-10):
    n = len(Y)
    rows = np.arange(n)
    residual = Y.copy()
    energy = np.sum(Y * Y, axis=1)
    chosen = np.zeros((n, sparsity), dtype=np.int64)
    live = np.zeros((n, sparsity), dtype=bool)   # atoms that carry a coefficient
    used = np.zeros((n, D.shape[1]), dtype=bool)
    stopped = energy == 0
    coef = np.zeros((n, sparsity))
    for step in range(sparsity):
        corr = np.abs(residual @ D)
        corr[used] = -1.0
        pick = np.argmax(corr, axis=1)
        chosen[:, step] = pick
        used[rows, pick] = True
        # a row stops once its residual vanishes or no remaining atom
        # correlates with it; later picks are still distinct atoms but keep
        # coefficient 0
        stopped |= np.sum(residual * residual, axis=1) <= tol * tol * energy
        stopped |= corr[rows, pick] <= tol * np.sqrt(energy)
        live[:, step] = ~stopped
        mask = live[:, :step + 1]
        sub = D[:, chosen[:, :step + 1]].transpose(1, 0, 2) * mask[:, None, :]
        gram = np.einsum("nds,ndt->nst", sub, sub) + np.eye(step + 1) * ~mask[:, None, :]
        try:
            np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise NumericalError("OMP selected a rank-deficient atom set (duplicate atoms?)") from None
        rhs = np.einsum("nds,nd->ns", sub, Y)
        c = np.linalg.solve(gram, rhs[..., None])[..., 0]
        if not np.all(np.isfinite(c)):
            raise NumericalError("OMP least-squares step produced non-finite coefficients")
        coef[:, :step + 1] = c * mask
        residual = Y - np.einsum("nds,ns->nd", sub, coef[:, :step + 1])
    return chosen, coef


def omp(y, D, sparsity):
    """Code a single vector; see :func:`omp_batch`."""
    y = np.asarray(y, dtype=np.float64)
    idx, c = omp_batch(y.reshape(1, -1), D, sparsity)
    order = np.argsort(idx[0], kind="stable")
    return SparseCode(
        atoms=idx[0][order],
        offsets=np.zeros((sparsity, 1), dtype=np.int64),
        coefs=c[0][order],
        sample_shape=(y.size,),
        atom_shape=(y.size,),
    )


def omp_dense(Y, D, sparsity):
    """Batch OMP returned as a dense ``(n_samples, n_atoms)`` code matrix."""
    idx, c = omp_batch(Y, D, sparsity)
    X = np.zeros((len(idx), np.shape(D)[1]))
    np.put_along_axis(X, idx, c, axis=1)
    return X


# --- shift-invariant single-atom matching ----------------------------------

def correlate_valid(Y, atoms, method="auto"):
    """Correlation of every sample with every atom at every valid offset.

    ``Y`` is ``(n, *N)`` and ``atoms`` ``(K, *M)``; the result is
    ``(n, K, *(N - M + 1))`` with ``out[i, k, t] = sum_m Y[i, t + m] atoms[k, m]``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    atoms = np.asarray(atoms, dtype=np.float64)
    N = Y.shape[1:]
    M = atoms.shape[1:]
    if len(N) != len(M) or any(m > n for m, n in zip(M, N)):
        raise ShapeError(f"atom shape {M} does not fit in sample shape {N}")
    grid = tuple(n - m + 1 for n, m in zip(N, M))
    if method == "auto":
        method = "fft" if math.prod(N) > DIRECT_AREA_THRESHOLD else "direct"
    if method == "direct":
        win = sliding_window_view(Y, M, axis=tuple(range(1, Y.ndim)))
        letters = "abcdefgh"[: len(M)]
        return np.einsum(f"n...{letters},k{letters}->nk...", win, atoms)
    if method != "fft":
        raise ValueError(f"unknown correlation method {method!r}")
    axes = tuple(range(-len(N), 0))
    atom_hat = np.conj(np.fft.rfftn(atoms, N, axes=axes))
    out = np.empty((len(Y), len(atoms)) + grid)
    crop = (Ellipsis,) + tuple(slice(0, g) for g in grid)
    step = max(1, int(2e7 // (len(atoms) * math.prod(N))))
    for start in range(0, len(Y), step):
        y_hat = np.fft.rfftn(Y[start:start + step], N, axes=axes)
        full = np.fft.irfftn(y_hat[:, None] * atom_hat[None], N, axes=axes)
        out[start:start + step] = full[crop]
    return out


def best_atom_match_batch(Y, atoms, method="auto"):
    """Best single shifted atom for each sample.

    Returns ``(atom_index, offsets, coefs, residual_energy)`` arrays; the
    coefficient is the correlation itself (atoms are unit norm), and the
    squared coefficient is what gets maximized, so sign is free.
    """
    Y = np.asarray(Y, dtype=np.float64)
    corr = correlate_valid(Y, atoms, method)
    n, K = corr.shape[:2]
    grid = corr.shape[2:]
    flat = corr.reshape(n, -1)
    best = np.argmax(flat * flat, axis=1)
    coefs = flat[np.arange(n), best]
    k, t = np.divmod(best, math.prod(grid))
    offsets = np.stack(np.unravel_index(t, grid), axis=1)
    energy = np.sum(Y.reshape(n, -1) ** 2, axis=1)
    residual = np.maximum(energy - coefs ** 2, 0.0)
    return k, offsets, coefs, residual


def best_atom_match(y, atoms, method="auto"):
    k, t, c, r = best_atom_match_batch(np.asarray(y, dtype=np.float64)[None], atoms, method)
    return AtomMatch(int(k[0]), tuple(int(v) for v in t[0]), float(c[0]), float(r[0]))


def place_atom(atom, offset, sample_shape):
    """Zero frame of ``sample_shape`` with ``atom`` at a valid offset."""
    frame = np.zeros(sample_shape)
    region = tuple(slice(o, o + m) for o, m in zip(offset, np.shape(atom)))
    frame[region] = atom
    return frame


def global_code_index(match, n_atoms, atom_shape, sample_shape):
    """Column of the equivalent global dictionary used by ``match``.

    Columns interleave atoms within each offset, ``j = flat(t) * n_atoms + k``,
    so ``j % n_atoms`` recovers the atom.
    """
    k, t = (match.atom, match.offset) if isinstance(match, AtomMatch) else match
    grid = tuple(n - m + 1 for n, m in zip(sample_shape, atom_shape))
    t = tuple(int(v) for v in np.atleast_1d(t))
    if len(t) != len(grid) or any(not 0 <= ti < gi for ti, gi in zip(t, grid)):
        raise ShapeError(f"offset {t} outside valid range {grid}")
    if not 0 <= k < n_atoms:
        raise ValueError(f"atom index {k} outside [0, {n_atoms})")
    return int(np.ravel_multi_index(t, grid)) * n_atoms + int(k)


def decode_global_index(j, n_atoms, atom_shape, sample_shape):
    grid = tuple(n - m + 1 for n, m in zip(sample_shape, atom_shape))
    if not 0 <= j < n_atoms * math.prod(grid):
        raise ShapeError(f"global index {j} out of range")
    flat, k = divmod(int(j), n_atoms)
    return k, tuple(int(v) for v in np.unravel_index(flat, grid))


def global_dictionary(atoms, sample_shape):
    """Explicit matrix whose columns are every atom at every valid offset."""
    atoms = np.asarray(atoms, dtype=np.float64)
    K, M = len(atoms), atoms.shape[1:]
    grid = tuple(n - m + 1 for n, m in zip(sample_shape, M))
    D = np.zeros((math.prod(sample_shape), K * math.prod(grid)))
    for flat in range(math.prod(grid)):
        t = np.unravel_index(flat, grid)
        for k in range(K):
            D[:, flat * K + k] = place_atom(atoms[k], t, sample_shape).ravel()
    return D


# --- convolutional l1 coding -----------------------------------------------

class ConvOperator:
    """Linear map from same-size coefficient maps to a sample.

    ``forward(X)[n] = sum_k (atoms[k] * X[k])[n + c]`` with ``*`` linear
    convolution and ``c = (M - 1) // 2`` per axis. ``adjoint`` is its exact
    transpose. Both run through real FFTs at least ``N + M - 1`` long, so
    nothing wraps around.
    """

    def __init__(self, atoms, sample_shape):
        self.atoms = np.asarray(atoms, dtype=np.float64)
        self.sample_shape = tuple(sample_shape)
        self.atom_shape = self.atoms.shape[1:]
        if len(self.atom_shape) != len(self.sample_shape):
            raise ShapeError(f"atom shape {self.atom_shape} vs sample shape {self.sample_shape}")
        self.size = tuple(sfft.next_fast_len(n + m - 1, real=True)
                          for n, m in zip(self.sample_shape, self.atom_shape))
        self.center = tuple((m - 1) // 2 for m in self.atom_shape)
        self.axes = tuple(range(-len(self.sample_shape), 0))
        self.atom_hat = sfft.rfftn(self.atoms, self.size, axes=self.axes)
        self._crop = (Ellipsis,) + tuple(slice(c, c + n) for c, n in zip(self.center, self.sample_shape))
        self._head = (Ellipsis,) + tuple(slice(0, n) for n in self.sample_shape)

    def forward(self, X):
        X_hat = sfft.rfftn(X, self.size, axes=self.axes)
        S = np.sum(X_hat * self.atom_hat, axis=-len(self.axes) - 1)
        return sfft.irfftn(S, self.size, axes=self.axes)[self._crop]

    def adjoint(self, R):
        R = np.asarray(R, dtype=np.float64)
        lead = R.shape[:R.ndim - len(self.sample_shape)]
        full = np.zeros(lead + self.size)
        full[self._crop] = R
        R_hat = sfft.rfftn(full, axes=self.axes)
        G_hat = np.expand_dims(R_hat, -len(self.axes) - 1) * np.conj(self.atom_hat)
        return sfft.irfftn(G_hat, self.size, axes=self.axes)[self._head]

    def lipschitz(self, oversample=4):
        """Upper estimate of ``||forward||^2`` from a fine frequency grid."""
        fine = tuple(oversample * s for s in self.size)
        spec = sfft.rfftn(self.atoms, fine, axes=self.axes)
        return float(np.max(np.sum(np.abs(spec) ** 2, axis=0)))


def conv_same_direct(X, atoms, sample_shape):
    """Reference implementation of :meth:`ConvOperator.forward` by loops."""
    X = np.asarray(X, dtype=np.float64)
    atoms = np.asarray(atoms, dtype=np.float64)
    out = np.zeros(sample_shape)
    center = tuple((m - 1) // 2 for m in atoms.shape[1:])
    for k in range(len(atoms)):
        for p in zip(*np.nonzero(X[k])):
            for m in np.ndindex(*atoms.shape[1:]):
                n = tuple(pi + mi - ci for pi, mi, ci in zip(p, m, center))
                if all(0 <= ni < si for ni, si in zip(n, sample_shape)):
                    out[n] += X[(k,) + tuple(p)] * atoms[(k,) + m]
    return out


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def default_lambda(Y, atoms, fraction=0.1):
    """``fraction`` of each sample's largest absolute atom response."""
    Y = np.asarray(Y, dtype=np.float64)
    op = ConvOperator(atoms, Y.shape[1:])
    g = op.adjoint(Y)
    return fraction * np.max(np.abs(g.reshape(len(Y), -1)), axis=1)


@dataclass
class BPDNInfo:
    objective_trace: list
    iterations: int
    step: float
    converged: bool


def _bcast(v, ndim):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def conv_bpdn_batch(Y, atoms, lmbda=None, max_iters=500, tol=1e-6, L0=None, chunk=512):
    """Monotone FISTA with backtracking and adaptive restart for convolutional BPDN.

    Minimizes ``0.5 * |y - forward(X)|^2 + lmbda * |X|_1`` independently for
    every sample. ``lmbda`` may be a scalar or one value per sample; by
    default it is :func:`default_lambda`. Returns ``(maps, info)`` with
    ``maps`` of shape ``(n, K, *N)``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    atoms = np.asarray(atoms, dtype=np.float64)
    if lmbda is None:
        lmbda = default_lambda(Y, atoms)
    lmbda = np.broadcast_to(np.asarray(lmbda, dtype=np.float64), (len(Y),))
    if np.any(lmbda <= 0):
        raise ValueError("lambda must be positive")
    op = ConvOperator(atoms, Y.shape[1:])
    L = op.lipschitz() if L0 is None else float(L0)
    maps = np.empty((len(Y), len(atoms)) + Y.shape[1:])
    trace = None
    info = None
    for start in range(0, len(Y), chunk):
        sl = slice(start, start + chunk)
        maps[sl], part = _mfista(op, Y[sl], lmbda[sl], L, max_iters, tol)
        trace = part.objective_trace if trace is None else _sum_traces(trace, part.objective_trace)
        if info is None:
            info = part
        else:
            info.iterations = max(info.iterations, part.iterations)
            info.step = min(info.step, part.step)
            info.converged = info.converged and part.converged
    info.objective_trace = trace
    return maps, info


def _sum_traces(a, b):
    n = max(len(a), len(b))
    a = a + [a[-1]] * (n - len(a))
    b = b + [b[-1]] * (n - len(b))
    return [x + y for x, y in zip(a, b)]


def _mfista(op, Y, lmbda, L, max_iters, tol):
    ndim = Y.ndim + 1
    lam = _bcast(lmbda, ndim)
    sum_axes = tuple(range(1, ndim))
    n = len(Y)

    def half_sq(R):
        return 0.5 * np.sum(R.reshape(n, -1) ** 2, axis=1)

    x = np.zeros((n, len(op.atoms)) + Y.shape[1:])
    Ax = np.zeros_like(Y)
    F = half_sq(Y)
    z, Az = x, Ax
    t = np.ones(n)
    trace = [float(F.sum())]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        R_z = Az - Y
        f_z = half_sq(R_z)
        grad = op.adjoint(R_z)
        while True:
            cand = soft_threshold(z - grad / L, lam / L)
            Ac = op.forward(cand)
            f_c = half_sq(Ac - Y)
            diff = cand - z
            bound = f_z + np.sum(grad * diff, axis=sum_axes) + 0.5 * L * np.sum(diff * diff, axis=sum_axes)
            if np.all(f_c <= bound + 1e-12 * np.maximum(1.0, np.abs(bound))):
                break
            L *= 2.0
            if L > 1e30:
                raise NumericalError("step size underflow in convolutional coding")
        F_c = f_c + lmbda * np.sum(np.abs(cand), axis=sum_axes)
        keep = F_c <= F
        kb = _bcast(keep, ndim)
        x_next = np.where(kb, cand, x)
        Ax_next = np.where(_bcast(keep, Y.ndim), Ac, Ax)
        F_next = np.where(keep, F_c, F)
        # adaptive restart: drop the momentum of a sample whose step was
        # rejected or points against the previous move
        restart = ~keep | (np.sum((z - cand) * (cand - x), axis=sum_axes) > 0)
        t = np.where(restart, 1.0, t)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        a_coef, b_coef = _bcast(t / t_next, ndim), _bcast((t - 1.0) / t_next, ndim)
        a_img, b_img = _bcast(t / t_next, Y.ndim), _bcast((t - 1.0) / t_next, Y.ndim)
        # the forward map is linear, so A(z) follows from already computed images
        z = x_next + a_coef * (cand - x_next) + b_coef * (x_next - x)
        Az = Ax_next + a_img * (Ac - Ax_next) + b_img * (Ax_next - Ax)
        change = np.abs(F - F_next) / np.maximum(np.abs(F), 1e-300)
        x, Ax, F, t = x_next, Ax_next, F_next, t_next
        trace.append(float(F.sum()))
        if np.all(change < tol) and np.all(keep):
            converged = True
            break
    return x, BPDNInfo(trace, it, 1.0 / L, converged)


def conv_bpdn(y, atoms, lmbda=None, max_iters=500, tol=1e-6):
    """Convolutional BPDN for one sample, returned as a same-mode code."""
    y = np.asarray(y, dtype=np.float64)
    atoms = np.asarray(atoms, dtype=np.float64)
    lm = None if lmbda is None else [lmbda]
    maps, info = conv_bpdn_batch(y[None], atoms, lm, max_iters, tol)
    code = SparseCode.from_dense(maps[0], y.shape, atoms.shape[1:], mode="same")
    return code, info


def bpdn_objective(y, atoms, maps, lmbda):
    op = ConvOperator(atoms, np.shape(y))
    r = op.forward(maps) - y
    return 0.5 * float(np.sum(r * r)) + lmbda * float(np.sum(np.abs(maps)))


def prox_residual(y, atoms, maps, lmbda, step):
    """Largest ``|x - soft(x - step * grad, step * lmbda)|`` over all coefficients."""
    op = ConvOperator(atoms, np.shape(y))
    grad = op.adjoint(op.forward(maps) - y)
    return float(np.max(np.abs(maps - soft_threshold(maps - step * grad, step * lmbda))))


# --- patches -----------------------------------------------------------------

def extract_patches(y, patch_shape, stride=1):
    """All windows of ``patch_shape`` at ``stride``, row-major, as ``(n, *patch)``."""
    y = np.asarray(y, dtype=np.float64)
    patch_shape = tuple(int(p) for p in np.atleast_1d(patch_shape))
    if len(patch_shape) != y.ndim:
        raise ShapeError(f"patch shape {patch_shape} does not match signal rank {y.ndim}")
    if any(p > n for p, n in zip(patch_shape, y.shape)):
        raise ShapeError(f"patch {patch_shape} larger than signal {y.shape}")
    strides = tuple(int(s) for s in np.broadcast_to(stride, (y.ndim,)))
    win = sliding_window_view(y, patch_shape)
    win = win[tuple(slice(None, None, s) for s in strides)]
    return win.reshape((-1,) + patch_shape).copy()


def extract_patches_batch(Y, patch_shape, stride=1):
    """Patches of every sample, ``(n_samples, n_patches, *patch)``."""
    Y = np.asarray(Y, dtype=np.float64)
    patch_shape = tuple(int(p) for p in np.atleast_1d(patch_shape))
    axes = tuple(range(1, Y.ndim))
    if any(p > n for p, n in zip(patch_shape, Y.shape[1:])):
        raise ShapeError(f"patch {patch_shape} larger than signal {Y.shape[1:]}")
    strides = tuple(int(s) for s in np.broadcast_to(stride, (len(axes),)))
    win = sliding_window_view(Y, patch_shape, axis=axes)
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in strides)]
    return win.reshape((len(Y), -1) + patch_shape)
