"""Unsupervised feature extractors feeding the linear classifier.

``DL``   global dictionary (atoms as large as the sample), OMP codes.
``PDL``  patch dictionary, OMP codes of every patch concatenated.
``CDL``  convolutional dictionary, l1 coefficient maps, |.| max pooling.
``GFE``  fixed Gabor bank, |response| average pooling.
``PCA``  projection on the leading principal axes.

All extractors work on 1D or 2D samples except GFE (2D only).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DataError, ShapeError
from .dictionary import (Dictionary, cdl_dict_update, init_from_samples, init_random,
                         mod_update)
from .sparse_coding import (ConvOperator, conv_bpdn_batch, default_lambda,
                            extract_patches_batch, omp_dense)

log = logging.getLogger(__name__)

KINDS = ("DL", "PDL", "CDL", "GFE", "PCA")


@dataclass(frozen=True)
class FeatureConfig:
    n_atoms: int | None = None          # per-kind default when None
    patch: int | tuple = 11             # PDL patch / CDL kernel extent per axis
    stride: int | tuple | None = None   # PDL stride; None -> patch - 3
    sparsity: int = 5
    dl_iters: int = 10
    dl_max_vectors: int = 20000
    cdl_iters: int = 6
    cdl_fit_samples: int = 200
    cdl_lambda: float | None = None    # None -> fraction * median max |A^T y|
    cdl_lambda_fraction: float = 0.025
    cdl_coding_iters: int = 20
    cdl_update_iters: int = 10
    pool: int = 2
    gabor_scales: int = 3
    gabor_orientations: int = 5
    gabor_size: int = 11
    gabor_wavelength: float = 4.0
    gabor_sigma_ratio: float = 0.56
    gabor_gamma: float = 0.5
    pca_dims: int = 100

    def atoms_for(self, kind):
        if self.n_atoms is not None:
            return int(self.n_atoms)
        return {"DL": 360, "PDL": 360, "CDL": 15}[kind]


@dataclass
class FeatureExtractor:
    kind: str
    sample_shape: tuple
    config: FeatureConfig
    output_dim: int
    dictionary: Dictionary | None = None
    bank: np.ndarray | None = None
    mean: np.ndarray | None = None
    axes: np.ndarray | None = None
    lmbda: float | None = None
    meta: dict = field(default_factory=dict)

    def transform(self, samples):
        return transform(self, samples)


# --- helpers ---------------------------------------------------------------------

def _per_axis(value, ndim):
    return tuple(int(v) for v in np.broadcast_to(value, (ndim,)))


def patch_shape(config, sample_shape):
    return tuple(min(p, n) for p, n in zip(_per_axis(config.patch, len(sample_shape)), sample_shape))


def patch_stride(config, sample_shape):
    if config.stride is not None:
        return _per_axis(config.stride, len(sample_shape))
    return tuple(max(1, p - 3) for p in patch_shape(config, sample_shape))


def patch_grid(sample_shape, pshape, stride):
    return tuple((n - p) // s + 1 for n, p, s in zip(sample_shape, pshape, stride))


def pooled_shape(shape, cell):
    return tuple(math.ceil(n / cell) for n in shape)


def pool(maps, ndim, cell, how):
    """Non-overlapping ``cell``-wide max or mean pooling over the last ``ndim`` axes.

    Edges that do not fill a cell are zero-padded.
    """
    lead = maps.shape[:-ndim]
    N = maps.shape[-ndim:]
    out_shape = pooled_shape(N, cell)
    pad = [(0, 0)] * len(lead) + [(0, o * cell - n) for o, n in zip(out_shape, N)]
    if any(p[1] for p in pad):
        maps = np.pad(maps, pad)
    new_shape = lead
    for o in out_shape:
        new_shape = new_shape + (o, cell)
    blocks = maps.reshape(new_shape)
    red = tuple(len(lead) + 2 * i + 1 for i in range(ndim))
    if how == "max":
        return blocks.max(axis=red)
    if how == "mean":
        return blocks.mean(axis=red)
    raise ValueError(f"unknown pooling {how!r}")


def gabor_bank(scales=3, orientations=5, size=11, wavelength=4.0, sigma_ratio=0.56, gamma=0.5):
    """Real, zero-mean, unit-norm Gabor kernels on a ``size`` x ``size`` grid.

    Scale ``s`` uses wavelength ``wavelength * 2**(s/2)`` and envelope width
    ``sigma_ratio`` times that; orientation ``o`` is ``o * pi / orientations``.
    Kernels are ordered scale-major.
    """
    if size % 2 != 1:
        raise ValueError(f"Gabor kernel size must be odd, got {size}")
    half = size // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    kernels = []
    for s in range(scales):
        lam = wavelength * 2.0 ** (s / 2.0)
        sigma = sigma_ratio * lam
        for o in range(orientations):
            kernels.append(gabor_kernel(xx, yy, o * np.pi / orientations, lam, sigma, gamma))
    return np.stack(kernels)


def gabor_kernel(xx, yy, theta, wavelength, sigma, gamma):
    xr = xx * np.cos(theta) + yy * np.sin(theta)
    yr = -xx * np.sin(theta) + yy * np.cos(theta)
    g = np.exp(-(xr ** 2 + gamma ** 2 * yr ** 2) / (2.0 * sigma ** 2)) * np.cos(2.0 * np.pi * xr / wavelength)
    g = g - g.mean()
    return g / np.linalg.norm(g)


# --- fitting -------------------------------------------------------------------------

def _fit_vector_dictionary(vectors, n_atoms, sparsity, iters, rng):
    D = init_from_samples(vectors, n_atoms, vectors.shape[1:], rng)
    for _ in range(iters):
        X = omp_dense(vectors, D.matrix, sparsity)
        D = mod_update(vectors, X, D)
    return D


def fit(kind, samples, config=None, rng=None):
    """Learn (or build) the extractor ``kind`` from unlabeled ``samples``."""
    if kind not in KINDS:
        raise ValueError(f"unknown extractor {kind!r}; choose from {KINDS}")
    config = config or FeatureConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise DataError("cannot fit an extractor on zero samples")
    shape = tuple(samples.shape[1:])
    n = len(samples)

    if kind == "DL":
        K = config.atoms_for(kind)
        vectors = samples.reshape(n, -1)
        if n > config.dl_max_vectors:
            vectors = vectors[np.sort(rng.choice(n, config.dl_max_vectors, replace=False))]
        D = _fit_vector_dictionary(vectors, K, config.sparsity, config.dl_iters, rng)
        return FeatureExtractor(kind, shape, config, K, dictionary=D)

    if kind == "PDL":
        K = config.atoms_for(kind)
        pshape = patch_shape(config, shape)
        stride = patch_stride(config, shape)
        patches = extract_patches_batch(samples, pshape, stride)
        n_patches = patches.shape[1]
        vectors = patches.reshape(-1, math.prod(pshape))
        if len(vectors) > config.dl_max_vectors:
            vectors = vectors[np.sort(rng.choice(len(vectors), config.dl_max_vectors, replace=False))]
        D = _fit_vector_dictionary(vectors, K, config.sparsity, config.dl_iters, rng)
        D = Dictionary(D.atoms.reshape((K,) + pshape), True, D.meta)
        return FeatureExtractor(kind, shape, config, K * n_patches, dictionary=D,
                                meta={"stride": stride, "n_patches": n_patches})

    if kind == "CDL":
        K = config.atoms_for(kind)
        kshape = patch_shape(config, shape)
        sub = samples
        if n > config.cdl_fit_samples:
            sub = samples[np.sort(rng.choice(n, config.cdl_fit_samples, replace=False))]
        D = init_random(K, kshape, rng)
        if config.cdl_lambda is None:
            lmbda = float(np.median(default_lambda(sub, D.atoms, config.cdl_lambda_fraction)))
        else:
            lmbda = float(config.cdl_lambda)
        for _ in range(config.cdl_iters):
            maps, _ = conv_bpdn_batch(sub, D.atoms, lmbda, config.cdl_coding_iters, 1e-8)
            D = cdl_dict_update(sub, maps, D, config.cdl_update_iters, 1e-8)
        dim = K * math.prod(pooled_shape(shape, config.pool))
        return FeatureExtractor(kind, shape, config, dim, dictionary=D, lmbda=lmbda)

    if kind == "GFE":
        if len(shape) != 2:
            raise ShapeError("Gabor features need 2D samples")
        bank = gabor_bank(config.gabor_scales, config.gabor_orientations, config.gabor_size,
                          config.gabor_wavelength, config.gabor_sigma_ratio, config.gabor_gamma)
        dim = len(bank) * math.prod(pooled_shape(shape, config.pool))
        return FeatureExtractor(kind, shape, config, dim, bank=bank)

    # PCA
    d = config.pca_dims
    if n < d:
        raise DataError(f"PCA with {d} components needs at least {d} samples, got {n}")
    X = samples.reshape(n, -1)
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, bias=True)
    vals, vecs = np.linalg.eigh(cov)
    axes = vecs[:, ::-1][:, :d].T
    # make the largest-magnitude loading of every axis positive
    flip = np.sign(axes[np.arange(d), np.argmax(np.abs(axes), axis=1)])
    axes = axes * np.where(flip == 0, 1.0, flip)[:, None]
    return FeatureExtractor(kind, shape, config, d, mean=mean, axes=axes,
                            meta={"explained_variance": vals[::-1][:d].tolist()})


# --- transform -----------------------------------------------------------------------

def transform(extractor, samples):
    """Feature matrix ``(n, output_dim)`` for a batch (or a single sample)."""
    samples = np.asarray(samples, dtype=np.float64)
    single = samples.shape == extractor.sample_shape
    if single:
        samples = samples[None]
    if tuple(samples.shape[1:]) != extractor.sample_shape:
        raise ShapeError(f"sample shape {samples.shape[1:]} does not match fitted {extractor.sample_shape}")
    n = len(samples)
    cfg = extractor.config
    ndim = len(extractor.sample_shape)
    kind = extractor.kind

    if kind == "DL":
        out = omp_dense(samples.reshape(n, -1), extractor.dictionary.matrix, cfg.sparsity)
    elif kind == "PDL":
        D = extractor.dictionary
        patches = extract_patches_batch(samples, D.atom_shape, extractor.meta["stride"])
        codes = omp_dense(patches.reshape(-1, math.prod(D.atom_shape)), D.matrix, cfg.sparsity)
        out = codes.reshape(n, -1)
    elif kind == "CDL":
        out = np.empty((n, extractor.output_dim))
        step = 256
        for start in range(0, n, step):
            maps, _ = conv_bpdn_batch(samples[start:start + step], extractor.dictionary.atoms,
                                      extractor.lmbda, cfg.cdl_coding_iters, 1e-8)
            pooled = pool(np.abs(maps), ndim, cfg.pool, "max")
            out[start:start + step] = pooled.reshape(len(maps), -1)
    elif kind == "GFE":
        op = ConvOperator(extractor.bank, extractor.sample_shape)
        out = np.empty((n, extractor.output_dim))
        step = 512
        for start in range(0, n, step):
            resp = np.abs(op.adjoint(samples[start:start + step]))
            out[start:start + step] = pool(resp, ndim, cfg.pool, "mean").reshape(len(resp), -1)
    else:
        out = (samples.reshape(n, -1) - extractor.mean) @ extractor.axes.T
    return out[0] if single else out
