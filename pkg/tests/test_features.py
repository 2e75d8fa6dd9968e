import math

import numpy as np
import pytest

from oracles import conv_same_loop
from shiftsparse.core import DataError, ShapeError
from shiftsparse.dictionary import init_random
from shiftsparse.features import (FeatureConfig, fit, gabor_bank, gabor_kernel, pool, pooled_shape,
                                  transform)
from shiftsparse.sparse_coding import ConvOperator


def _digits(n=40, shape=(28, 28), seed=0):
    rng = np.random.default_rng(seed)
    X = np.zeros((n,) + shape)
    w = min(6, shape[0] // 2)
    for i in range(n):
        y, x = rng.integers(0, shape[0] - w + 1), rng.integers(0, shape[1] - w + 1)
        X[i, y:y + w, x:x + w] = rng.uniform(0.2, 1.0, (w, w))
    return X


# --- Gabor bank -------------------------------------------------------------------

def test_gabor_bank_size_and_normalization():
    bank = gabor_bank()
    assert bank.shape == (15, 11, 11)
    assert np.all(np.abs(bank.sum(axis=(1, 2))) < 1e-10)
    assert np.allclose(np.sqrt(np.sum(bank ** 2, axis=(1, 2))), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        gabor_bank(size=10)


def test_gabor_half_turn_symmetry():
    yy, xx = np.mgrid[-5:6, -5:6].astype(float)
    for theta in np.linspace(0, np.pi, 7, endpoint=False):
        a = gabor_kernel(xx, yy, theta, 4.0, 2.24, 0.5)
        b = gabor_kernel(xx, yy, theta + np.pi, 4.0, 2.24, 0.5)
        assert np.allclose(a, b, atol=1e-12)


def test_gabor_kernel_formula_before_normalization():
    yy, xx = np.mgrid[-5:6, -5:6].astype(float)
    theta, lam, sigma, gamma = np.pi / 5, 4 * 2 ** 0.5, 0.56 * 4 * 2 ** 0.5, 0.5
    raw = np.zeros((11, 11))
    for i in range(11):
        for j in range(11):
            x, y = j - 5, i - 5
            xr = x * math.cos(theta) + y * math.sin(theta)
            yr = -x * math.sin(theta) + y * math.cos(theta)
            raw[i, j] = math.exp(-(xr ** 2 + gamma ** 2 * yr ** 2) / (2 * sigma ** 2)) * math.cos(2 * math.pi * xr / lam)
    raw -= raw.mean()
    raw /= np.linalg.norm(raw)
    assert np.allclose(gabor_bank()[6], raw, atol=1e-12)


# --- pooling ------------------------------------------------------------------

def test_pool_max_and_mean_with_padding():
    m = np.arange(9.0).reshape(3, 3)
    assert pool(m, 2, 2, "max").tolist() == [[4.0, 5.0], [7.0, 8.0]]
    assert pool(m, 2, 2, "mean").tolist() == [[2.0, 1.75], [3.25, 2.0]]
    assert pooled_shape((28, 28), 2) == (14, 14)
    assert pool(np.arange(5.0), 1, 2, "max").tolist() == [1.0, 3.0, 4.0]
    with pytest.raises(ValueError):
        pool(m, 2, 2, "median")


# --- GFE --------------------------------------------------------------------------

def test_gfe_dimension_zero_input_and_loop_oracle():
    ex = fit("GFE", _digits(3))
    assert ex.output_dim == 2940 and len(ex.bank) == 15 and ex.bank.shape[1:] == (11, 11)
    assert np.array_equal(ex.transform(np.zeros((28, 28))), np.zeros(2940))
    img = np.random.default_rng(1).random((9, 8))
    small = fit("GFE", img[None], FeatureConfig(gabor_scales=1, gabor_orientations=2, gabor_size=5))
    feats = small.transform(img)
    resp = np.zeros((2, 9, 8))
    for k, g in enumerate(small.bank):
        for p in np.ndindex(9, 8):
            s = 0.0
            for m in np.ndindex(5, 5):
                q = (p[0] + m[0] - 2, p[1] + m[1] - 2)
                if 0 <= q[0] < 9 and 0 <= q[1] < 8:
                    s += g[m] * img[q]
            resp[k][p] = abs(s)
    padded = np.zeros((2, 10, 8))
    padded[:, :9] = resp
    expect = padded.reshape(2, 5, 2, 4, 2).mean(axis=(2, 4)).ravel()
    assert np.allclose(feats, expect, atol=1e-12)
    with pytest.raises(ShapeError):
        fit("GFE", np.zeros((3, 20)))


# --- PCA --------------------------------------------------------------------------

def test_pca_plane_and_mean():
    rng = np.random.default_rng(2)
    basis = rng.standard_normal((2, 6))
    X = rng.standard_normal((50, 2)) @ basis + rng.standard_normal(6)
    ex = fit("PCA", X, FeatureConfig(pca_dims=2))
    Z = ex.transform(X)
    recon = Z @ ex.axes + ex.mean
    assert np.max(np.abs(recon - X)) < 1e-10
    assert np.allclose(ex.transform(X.mean(axis=0)), 0.0, atol=1e-12)
    assert ex.output_dim == 2 and Z.shape == (50, 2)
    with pytest.raises(DataError):
        fit("PCA", X[:3], FeatureConfig(pca_dims=5))


# --- DL / PDL -----------------------------------------------------------------------

def test_dl_and_pdl_dimensions():
    X = _digits(60, (12, 12))
    cfg = FeatureConfig(n_atoms=20, patch=6, dl_iters=2, sparsity=3)
    dl = fit("DL", X, cfg, np.random.default_rng(0))
    assert dl.output_dim == 20 and dl.transform(X).shape == (60, 20)
    assert np.all(np.count_nonzero(dl.transform(X), axis=1) <= 3)
    pdl = fit("PDL", X, cfg, np.random.default_rng(0))
    # stride 3 on 12 with 6-wide patches gives a 3x3 grid
    assert pdl.output_dim == 20 * 9 and pdl.transform(X).shape == (60, 180)
    assert pdl.transform(X[0]).shape == (180,)


def test_pdl_with_full_patch_equals_dl():
    X = _digits(50, (10, 10))
    cfg = FeatureConfig(n_atoms=12, patch=10, dl_iters=3, sparsity=2)
    dl = fit("DL", X, cfg, np.random.default_rng(3))
    pdl = fit("PDL", X, cfg, np.random.default_rng(3))
    assert np.array_equal(dl.dictionary.matrix, pdl.dictionary.matrix)
    assert np.array_equal(dl.transform(X), pdl.transform(X))


def test_unknown_kind_and_shape_mismatch():
    with pytest.raises(ValueError):
        fit("HOG", np.zeros((2, 4)))
    with pytest.raises(DataError):
        fit("DL", np.zeros((0, 4)))
    ex = fit("GFE", _digits(2))
    with pytest.raises(ShapeError):
        ex.transform(np.zeros((2, 27, 28)))


# --- CDL --------------------------------------------------------------------------

def test_cdl_dimension_on_digits():
    cfg = FeatureConfig(cdl_iters=1, cdl_fit_samples=5, cdl_coding_iters=5, cdl_update_iters=2)
    ex = fit("CDL", _digits(8), cfg)
    assert ex.output_dim == 15 * 14 * 14 == 2940
    assert ex.transform(_digits(3, seed=1)).shape == (3, 2940)
    assert ex.lmbda > 0


def _shift_similarity(a, b):
    return float(np.max(np.abs(np.correlate(np.pad(a, len(b)), b, "full"))))


def test_cdl_recovers_generating_atoms():
    rng = np.random.default_rng(0)
    truth = init_random(2, (8,), rng).atoms
    maps = np.zeros((60, 2, 64))
    for i in range(60):
        for k in range(2):
            pos = rng.choice(np.arange(6, 58), 2, replace=False)
            maps[i, k, pos] = rng.choice([-1, 1], 2) * rng.uniform(1, 2, 2)
    Y = ConvOperator(truth, (64,)).forward(maps)
    assert np.allclose(Y[0], conv_same_loop(maps[0], truth, (64,)), atol=1e-12)
    cfg = FeatureConfig(n_atoms=2, patch=8, cdl_iters=40, cdl_fit_samples=60, cdl_lambda=0.05,
                        cdl_coding_iters=100, cdl_update_iters=20)
    ex = fit("CDL", Y, cfg, np.random.default_rng(0))
    # atoms are identifiable only up to sign, order and a shift within the support
    sims = np.array([[_shift_similarity(a, t) for t in truth] for a in ex.dictionary.atoms])
    assert max(sims[0, 0] + sims[1, 1], sims[0, 1] + sims[1, 0]) / 2 > 0.9
    assert min(sims.max(axis=0)) > 0.9


def test_cdl_top_activation_is_translation_invariant():
    # frame wide enough that no coding iterate reaches the border
    rng = np.random.default_rng(5)
    cfg = FeatureConfig(n_atoms=3, patch=5, cdl_iters=2, cdl_fit_samples=10)
    base = np.zeros((10, 40, 40))
    base[:, 16:22, 16:22] = rng.random((10, 6, 6))
    ex = fit("CDL", base, cfg, rng)
    motif = rng.random((6, 6))
    tops = []
    for dy, dx in [(0, 0), (2, 0), (0, 4), (4, 2), (-4, -2)]:
        img = np.zeros((40, 40))
        img[16 + dy:22 + dy, 16 + dx:22 + dx] = motif
        tops.append(ex.transform(img).reshape(3, 20, 20).max(axis=(1, 2)))
    for t in tops[1:]:
        assert np.allclose(t, tops[0], atol=1e-6)


def test_every_kind_matches_output_dim():
    X = _digits(30, (14, 14))
    cfg = FeatureConfig(n_atoms=6, patch=5, dl_iters=1, cdl_iters=1, cdl_fit_samples=5,
                        cdl_coding_iters=3, cdl_update_iters=1, pca_dims=4)
    for kind in ("DL", "PDL", "CDL", "GFE", "PCA"):
        ex = fit(kind, X, cfg, np.random.default_rng(0))
        assert transform(ex, X[:4]).shape == (4, ex.output_dim)
