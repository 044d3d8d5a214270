"""Shared fixtures and independent numeric oracles for the test suite.

Oracles here intentionally avoid the library's tape: they use plain
numpy/scipy so that agreement is evidence, not a tautology.
"""

import numpy as np
import pytest

from invgp import ndgrad as ng
from invgp import kernels as kr


def se_kernel_np(x, x2, lengthscales, variance):
    """Plain-numpy squared-exponential ARD kernel, (N, M)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x2 = np.atleast_2d(np.asarray(x2, dtype=np.float64))
    ell = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (x.shape[1],))
    d = (x[:, None, :] - x2[None, :, :]) / ell
    return variance * np.exp(-0.5 * (d ** 2).sum(-1))


def exact_log_marginal(x, y, lengthscales, variance, noise_var):
    """Dense GP log marginal likelihood, summed over output columns."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[0] != np.atleast_2d(x).shape[0]:
        y = y.T
    n = y.shape[0]
    k = se_kernel_np(x, x, lengthscales, variance) + noise_var * np.eye(n)
    l = np.linalg.cholesky(k)
    total = 0.0
    for c in range(y.shape[1]):
        alpha = np.linalg.solve(l, y[:, c])
        total += (-0.5 * alpha @ alpha
                  - np.log(np.diag(l)).sum()
                  - 0.5 * n * np.log(2 * np.pi))
    return total


def rotate_coords_np(h, w, angle):
    """Normalized sampling grid for a pure rotation, (h*w, 2)."""
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w),
                         indexing="ij")
    ca, sa = np.cos(angle), np.sin(angle)
    gx = ca * xs - sa * ys
    gy = sa * xs + ca * ys
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def bilinear_np(image, coords):
    """Plain-numpy bilinear lookup with zero padding; image (H,W), coords
    normalized (P,2) as (x, y)."""
    h, w = image.shape
    col = (coords[:, 0] + 1) * 0.5 * (w - 1)
    row = (coords[:, 1] + 1) * 0.5 * (h - 1)
    x0, y0 = np.floor(col).astype(int), np.floor(row).astype(int)
    out = np.zeros(len(coords))
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            wgt = (np.where(dx, col - x0, 1 - (col - x0))
                   * np.where(dy, row - y0, 1 - (row - y0)) * valid)
            out += wgt * image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return out


def rotate_image_np(image, angle):
    """Rotate one (H, W) image by ``angle`` with the oracle bilinear lookup."""
    h, w = image.shape
    return bilinear_np(image, rotate_coords_np(h, w, angle)).reshape(h, w)


def gauss_legendre_pairs(lo, hi, n=17):
    """Nodes/weights for a 2-D tensor quadrature over [lo,hi]^2, normalized
    so the weights integrate the *average* (they sum to 1)."""
    nodes, weights = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    w = weights / weights.sum()
    return x, w


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_spec():
    return kr.KernelSpec(2, lengthscales=0.9, variance=1.3)


def make_param(name, value, group="gp_hyper"):
    return ng.Param(name, np.asarray(value, dtype=np.float64), group)
