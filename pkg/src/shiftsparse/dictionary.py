"""Dictionaries and their update rules.

``mod_update`` is the least-squares update for ordinary (vector) codes,
``mosa_update`` the averaged per-sample update for single-atom shifted
codes, and ``cdl_dict_update`` projected gradient descent on the atoms of
a convolutional model with fixed coefficient maps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import NumericalError, ShapeError, load_tensors, save_tensors

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-10
MOD_RIDGE = 1e-8
MOSA_EPS = 1e-12


@dataclass
class Dictionary:
    atoms: np.ndarray
    normalized: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim < 2 or len(atoms) < 1:
            raise ShapeError(f"need at least one atom of rank >= 1, got array of shape {atoms.shape}")
        norms = np.sqrt(np.sum(atoms.reshape(len(atoms), -1) ** 2, axis=1))
        if np.any(norms == 0):
            raise ValueError(f"all-zero atoms at {np.flatnonzero(norms == 0).tolist()}")
        if self.normalized and np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("atoms are not unit norm; use Dictionary.from_atoms to normalize")
        self.atoms = atoms

    @classmethod
    def from_atoms(cls, atoms, normalize=True, meta=None):
        atoms = np.array(atoms, dtype=np.float64)
        if normalize:
            atoms = normalize_atoms(atoms)
        return cls(atoms, normalize, dict(meta or {}))

    @property
    def n_atoms(self):
        return len(self.atoms)

    @property
    def atom_shape(self):
        return tuple(self.atoms.shape[1:])

    @property
    def matrix(self):
        """Atoms as columns of a ``(prod(atom_shape), n_atoms)`` matrix."""
        return self.atoms.reshape(self.n_atoms, -1).T

    def save(self, path):
        save_tensors(path, self.atoms)

    @classmethod
    def load(cls, path, normalized=True):
        (atoms,) = load_tensors(path)
        return cls(atoms, normalized)


def normalize_atoms(atoms):
    flat = atoms.reshape(len(atoms), -1)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    if np.any(norms == 0):
        raise ValueError("cannot normalize an all-zero atom")
    return (flat / norms[:, None]).reshape(atoms.shape)


def best_window(sample, atom_shape):
    """Window of ``sample`` with the most energy (first on ties)."""
    sample = np.asarray(sample, dtype=np.float64)
    if tuple(atom_shape) == sample.shape:
        return sample.copy()
    win = sliding_window_view(sample * sample, atom_shape)
    energy = win.sum(axis=tuple(range(-len(atom_shape), 0)))
    t = np.unravel_index(int(np.argmax(energy)), energy.shape)
    return sample[tuple(slice(o, o + m) for o, m in zip(t, atom_shape))].copy()


def init_from_samples(samples, n_atoms, atom_shape, rng):
    """Random samples (their highest-energy window) as unit atoms, no two parallel."""
    samples = np.asarray(samples, dtype=np.float64)
    order = rng.permutation(len(samples))
    atoms = []
    chosen = np.zeros((n_atoms, math.prod(atom_shape)))
    for i in order:
        w = best_window(samples[i], atom_shape)
        norm = np.linalg.norm(w)
        if norm == 0:
            continue
        # equal or sign-flipped windows (common among patches) would give duplicate atoms
        u = w.ravel() / norm
        if atoms and np.max(np.abs(chosen[:len(atoms)] @ u)) >= 1.0 - 1e-12:
            continue
        chosen[len(atoms)] = u
        atoms.append(w)
        if len(atoms) == n_atoms:
            break
    if len(atoms) < n_atoms:
        raise ValueError(f"only {len(atoms)} distinct non-zero samples available for {n_atoms} atoms")
    return Dictionary.from_atoms(np.stack(atoms))


def init_random(n_atoms, atom_shape, rng):
    """Unit-norm Gaussian atoms."""
    return Dictionary.from_atoms(rng.standard_normal((n_atoms,) + tuple(atom_shape)))


# --- MOD ---------------------------------------------------------------------------

def codes_to_matrix(codes, n_atoms):
    """Stack vector codes (SparseCode list or dense rows) as ``(n_samples, n_atoms)``."""
    if isinstance(codes, np.ndarray):
        return np.asarray(codes, dtype=np.float64)
    X = np.zeros((len(codes), n_atoms))
    for i, code in enumerate(codes):
        if np.any(code.offsets != 0):
            raise ValueError("MOD needs vector codes (offset 0 only)")
        X[i, code.atoms] = code.coefs
    return X


def mod_update(samples, codes, dictionary, ridge=MOD_RIDGE):
    """Least-squares atoms ``A = Y X^T (X X^T + ridge I)^-1``, renormalized.

    Atoms no sample uses are returned unchanged.
    """
    samples = np.asarray(samples, dtype=np.float64)
    Y = samples.reshape(len(samples), -1)
    X = codes_to_matrix(codes, dictionary.n_atoms)
    if X.shape != (len(Y), dictionary.n_atoms):
        raise ShapeError(f"codes shape {X.shape} vs ({len(Y)}, {dictionary.n_atoms})")
    if Y.shape[1] != math.prod(dictionary.atom_shape):
        raise ShapeError(f"sample size {Y.shape[1]} vs atom shape {dictionary.atom_shape}")
    used = np.flatnonzero(np.any(X != 0, axis=0))
    atoms = dictionary.atoms.reshape(dictionary.n_atoms, -1).copy()
    if used.size:
        Xu = X[:, used]
        gram = Xu.T @ Xu + ridge * np.eye(len(used))
        try:
            new = np.linalg.solve(gram, Xu.T @ Y)           # (used, d)
        except np.linalg.LinAlgError:
            raise NumericalError("MOD Gram matrix is singular") from None
        if not np.all(np.isfinite(new)):
            raise NumericalError("MOD produced non-finite atoms")
        norms = np.linalg.norm(new, axis=1)
        ok = norms > 0
        atoms[used[ok]] = new[ok] / norms[ok, None]
    return Dictionary(atoms.reshape(dictionary.atoms.shape), True, dict(dictionary.meta))


# --- MOSA --------------------------------------------------------------------------

def _match_arrays(matches):
    if isinstance(matches, tuple) and len(matches) == 4:
        k, t, c, r = matches
        return np.asarray(k), np.asarray(t), np.asarray(c, dtype=np.float64), np.asarray(r, dtype=np.float64)
    k = np.array([m.atom for m in matches], dtype=np.int64)
    t = np.array([m.offset for m in matches], dtype=np.int64)
    c = np.array([m.coef for m in matches], dtype=np.float64)
    r = np.array([m.residual_energy for m in matches], dtype=np.float64)
    return k, t, c, r


def mosa_update(samples, matches, dictionary, weighting="uniform", eps=MOSA_EPS):
    """Average the single-sample least-squares atoms of each cluster.

    A sample matched to atom ``k`` at offset ``t`` with coefficient ``c``
    contributes ``window / c`` (the window of the sample under the atom);
    these are averaged uniformly per atom and renormalized. With
    ``weighting="coefficient"`` the pooled least-squares estimate
    ``sum(c * window) / sum(c^2)`` is used instead.

    Atoms with no samples are re-seeded from the worst-fit samples.
    ``meta["skipped"]`` counts matches ignored for ``|c| <= eps``;
    ``meta["reseeded"]`` lists re-seeded atom indices.
    """
    if weighting not in ("uniform", "coefficient"):
        raise ValueError(f"unknown weighting {weighting!r}")
    samples = np.asarray(samples, dtype=np.float64)
    k, t, c, r = _match_arrays(matches)
    if len(k) != len(samples):
        raise ShapeError(f"{len(k)} matches for {len(samples)} samples")
    M = dictionary.atom_shape
    view = sliding_window_view(samples, M, axis=tuple(range(1, samples.ndim)))
    t = t.reshape(len(samples), -1)
    windows = view[(np.arange(len(samples)),) + tuple(t[:, a] for a in range(t.shape[1]))]

    valid = np.abs(c) > eps
    skipped = int(np.count_nonzero(~valid))
    if skipped:
        log.warning("MOSA skipped %d matches with |coef| <= %g", skipped, eps)
    K = dictionary.n_atoms
    atoms = dictionary.atoms.copy()
    empty = []
    for j in range(K):
        sel = valid & (k == j)
        if not np.any(sel):
            empty.append(j)
            continue
        w, cj = windows[sel], c[sel]
        if weighting == "uniform":
            est = np.mean(w / _bcast(cj, w.ndim), axis=0)
        else:
            est = np.tensordot(cj, w, axes=1) / np.sum(cj * cj)
        n = np.linalg.norm(est)
        if n > 0:
            atoms[j] = est / n
        else:
            empty.append(j)
    reseeded = []
    if empty:
        worst = np.argsort(-r, kind="stable")
        used = 0
        for j in empty:
            while used < len(worst):
                w = best_window(samples[worst[used]], M)
                used += 1
                if np.any(w):
                    atoms[j] = w / np.linalg.norm(w)
                    reseeded.append(j)
                    break
    meta = dict(dictionary.meta)
    meta.update(skipped=skipped, reseeded=reseeded)
    return Dictionary(atoms, True, meta)


def _bcast(v, ndim):
    return v.reshape(v.shape + (1,) * (ndim - 1))


# --- convolutional atom update ---------------------------------------------------------

class _ConvAtomProblem:
    """``E(A) = sum_i |y_i - sum_k a_k * x_ik|^2`` for fixed same-mode maps."""

    def __init__(self, samples, maps, atom_shape):
        self.Y = np.asarray(samples, dtype=np.float64)
        self.maps = np.asarray(maps, dtype=np.float64)
        self.N = self.Y.shape[1:]
        self.M = tuple(atom_shape)
        if self.maps.shape[0] != len(self.Y) or self.maps.shape[2:] != self.N:
            raise ShapeError(f"maps {self.maps.shape} do not fit samples {self.Y.shape}")
        self.size = tuple(n + m - 1 for n, m in zip(self.N, self.M))
        self.center = tuple((m - 1) // 2 for m in self.M)
        self.axes = tuple(range(-len(self.N), 0))
        self.crop = (Ellipsis,) + tuple(slice(c, c + n) for c, n in zip(self.center, self.N))
        self.head = (Ellipsis,) + tuple(slice(0, m) for m in self.M)
        self.X_hat = np.fft.rfftn(self.maps, self.size, axes=self.axes)

    def residual(self, atoms):
        A_hat = np.fft.rfftn(atoms, self.size, axes=self.axes)
        S = np.sum(self.X_hat * A_hat, axis=1)
        return np.fft.irfftn(S, self.size, axes=self.axes)[self.crop] - self.Y

    def value(self, atoms):
        return float(np.sum(self.residual(atoms) ** 2))

    def gradient(self, atoms):
        R = self.residual(atoms)
        full = np.zeros((len(R),) + self.size)
        full[self.crop] = R
        R_hat = np.fft.rfftn(full, self.size, axes=self.axes)
        G_hat = np.sum(R_hat[:, None] * np.conj(self.X_hat), axis=0)
        return 2.0 * np.fft.irfftn(G_hat, self.size, axes=self.axes)[self.head]

    def lipschitz(self):
        return 2.0 * float(np.max(np.sum(np.abs(self.X_hat) ** 2, axis=(0, 1))))


def cdl_dict_gradient(samples, maps, atoms):
    """Gradient of the squared reconstruction error with respect to the atoms."""
    atoms = np.asarray(atoms, dtype=np.float64)
    return _ConvAtomProblem(samples, maps, atoms.shape[1:]).gradient(atoms)


def cdl_reconstruction_error(samples, maps, atoms):
    atoms = np.asarray(atoms, dtype=np.float64)
    return _ConvAtomProblem(samples, maps, atoms.shape[1:]).value(atoms)


def cdl_dict_update(samples, codes, dictionary, max_iters=50, tol=1e-6):
    """Projected gradient steps on the atoms with the coefficient maps fixed.

    Each step moves against the gradient and renormalizes every atom; a step
    is accepted only if the reconstruction error does not grow, otherwise
    the step size is halved. ``codes`` are same-mode maps ``(n, K, *N)`` or a
    list of same-mode ``SparseCode``. ``meta["objective_trace"]`` holds
    the accepted error values.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if not isinstance(codes, np.ndarray):
        codes = np.stack([c.to_dense(dictionary.n_atoms) for c in codes])
    prob = _ConvAtomProblem(samples, codes, dictionary.atom_shape)
    atoms = dictionary.atoms.copy()
    value = prob.value(atoms)
    trace = [value]
    L = prob.lipschitz()
    meta = dict(dictionary.meta)
    if L == 0:
        meta["objective_trace"] = trace
        return Dictionary(atoms, True, meta)
    step = 1.0 / L
    min_step = step * 1e-20
    for _ in range(max_iters):
        grad = prob.gradient(atoms)
        flat_a = atoms.reshape(len(atoms), -1)
        flat_g = grad.reshape(len(atoms), -1)
        tangent = flat_g - np.sum(flat_g * flat_a, axis=1, keepdims=True) * flat_a
        if np.linalg.norm(tangent) <= 1e-12 * max(1.0, math.sqrt(value)):
            break
        stalled = False
        while True:
            cand = normalize_atoms(atoms - step * grad)
            new_value = prob.value(cand)
            if new_value <= value:
                break
            if math.isfinite(new_value) and np.max(np.abs(cand - atoms)) <= 1e-14:
                # no representable move lowers the error: stationary to rounding
                stalled = True
                break
            step *= 0.5
            if step < min_step:
                raise NumericalError("step size underflow in convolutional dictionary update")
        if stalled:
            break
        change = (value - new_value) / max(value, 1e-300)
        atoms, value = cand, new_value
        trace.append(value)
        step *= 1.5
        if change < tol:
            break
    meta["objective_trace"] = trace
    return Dictionary(atoms, True, meta)


# --- export --------------------------------------------------------------------------

def export_pgm(dictionary, path, columns=None, border=1):
    """Tile the atoms into one 8-bit binary PGM, each atom min-max scaled."""
    atoms = dictionary.atoms
    if atoms.ndim == 2:
        atoms = atoms[:, None, :]
    K, h, w = atoms.shape
    columns = columns or int(math.ceil(math.sqrt(K)))
    rows = int(math.ceil(K / columns))
    canvas = np.zeros((rows * (h + border) + border, columns * (w + border) + border), dtype=np.uint8)
    for i, atom in enumerate(atoms):
        lo, hi = atom.min(), atom.max()
        img = np.zeros_like(atom) if hi == lo else (atom - lo) / (hi - lo)
        r, col = divmod(i, columns)
        y0 = border + r * (h + border)
        x0 = border + col * (w + border)
        canvas[y0:y0 + h, x0:x0 + w] = np.round(img * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii"))
        fh.write(canvas.tobytes())
    return canvas

