"""Kernel module tests: SE-ARD values against a numpy oracle, deep-kernel
composition, and Monte-Carlo invariant kernels against quadrature."""

import numpy as np
import pytest

from invgp import features as ft
from invgp import kernels as kr
from invgp import ndgrad as ng
from invgp import transforms as tf

from conftest import gauss_legendre_pairs, rotate_image_np, se_kernel_np


def _eval(fn, *args, **kwargs):
    t = ng.Tape()
    return fn(t, *args, **kwargs).value


# ---------------------------------------------------------------------------
# base SE-ARD kernel


def test_k_base_matches_numpy_oracle(rng):
    x = rng.normal(size=(5, 3))
    x2 = rng.normal(size=(4, 3))
    spec = kr.KernelSpec(3, lengthscales=[0.5, 1.1, 2.0], variance=1.7)
    got = _eval(kr.k_base, x, x2, spec)
    want = se_kernel_np(x, x2, [0.5, 1.1, 2.0], 1.7)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_k_base_symmetric_and_unit_diagonal(rng):
    x = rng.normal(size=(6, 2))
    spec = kr.KernelSpec(2, lengthscales=0.8, variance=2.5)
    k = _eval(kr.k_base, x, x, spec)
    np.testing.assert_allclose(k, k.T, atol=1e-14)
    np.testing.assert_allclose(np.diag(k), 2.5, rtol=1e-14)
    diag = _eval(kr.k_base_diag, x, spec)
    np.testing.assert_allclose(diag, 2.5, rtol=1e-14)


def test_k_base_gram_is_psd(rng):
    x = rng.normal(size=(40, 4))
    spec = kr.KernelSpec(4, lengthscales=0.7, variance=1.0)
    k = _eval(kr.k_base, x, x, spec)
    eigs = np.linalg.eigvalsh(0.5 * (k + k.T))
    assert eigs.min() > -1e-10


def test_ard_lengthscales_change_anisotropy(rng):
    # a long lengthscale in dim 0 makes the kernel insensitive to it
    spec = kr.KernelSpec(2, lengthscales=[100.0, 0.1], variance=1.0)
    a = np.array([[0.0, 0.0]])
    moved0 = np.array([[1.0, 0.0]])
    moved1 = np.array([[0.0, 1.0]])
    k0 = _eval(kr.k_base, a, moved0, spec)[0, 0]
    k1 = _eval(kr.k_base, a, moved1, spec)[0, 0]
    assert k0 > 0.99 and k1 < 1e-5


def test_spec_rejects_nonpositive_hypers():
    with pytest.raises(ValueError):
        kr.KernelSpec(2, lengthscales=-1.0)
    with pytest.raises(ValueError):
        kr.KernelSpec(2, variance=0.0)
    with pytest.raises(ValueError):
        kr.KernelSpec(2, orbit=tf.rotation_orbit(0.1), s_o=0)


def test_k_base_rejects_dim_mismatch(rng):
    spec = kr.KernelSpec(3)
    t = ng.Tape()
    with pytest.raises(ValueError, match="feature dim"):
        kr.k_base(t, rng.normal(size=(2, 4)), rng.normal(size=(2, 3)), spec)


def test_variance_fixed_marks_param_frozen():
    spec = kr.KernelSpec(2, variance_fixed=True)
    assert not spec.log_variance.trainable
    assert kr.KernelSpec(2).log_variance.trainable


def test_k_base_hyper_gradients(rng):
    x = rng.normal(size=(4, 2))
    spec = kr.KernelSpec(2, lengthscales=[0.9, 1.4], variance=1.2)

    def loss():
        return ng.sum_(kr.k_base(ng.Tape(), x, x, spec))

    report = ng.grad_check(loss, spec.params(), step=1e-6, rtol=1e-5)
    assert report.passed, report


# ---------------------------------------------------------------------------
# deep kernel


def _tiny_extractor():
    return ft.FeatureExtractor(
        input_shape=(4, 4, 1),
        layers=[{"type": "dense", "units": 3, "activation": "relu"}],
        head_classes=2,
        seed=7,
    )


def test_k_deep_is_base_kernel_on_features(rng):
    fe = _tiny_extractor()
    spec = kr.KernelSpec(3, lengthscales=0.6, variance=1.1, feature_map=fe)
    x = rng.normal(size=(5, 4, 4, 1))
    t = ng.Tape()
    feats = fe.forward(t, x, mode="feature").value
    got = _eval(kr.k_deep, x, x, spec)
    want = se_kernel_np(feats, feats, 0.6, 1.1)
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_k_deep_gradients_reach_network_weights(rng):
    fe = _tiny_extractor()
    spec = kr.KernelSpec(3, lengthscales=0.6, variance=1.1, feature_map=fe)
    x = rng.normal(size=(3, 4, 4, 1))
    t = ng.Tape()
    loss = ng.sum_(kr.k_deep(t, x, x, spec))
    grads = ng.backward(loss, params=spec.params())
    nn_norm = sum(np.abs(grads[p.id]).sum() for p in fe.params())
    assert nn_norm > 0


# ---------------------------------------------------------------------------
# invariant kernels: exact group (sign flips)


def _sign_spec(s_o=2):
    return kr.KernelSpec(2, lengthscales=0.9, variance=1.3,
                         orbit=tf.SignFlipOrbit(), s_o=s_o)


def test_sign_flip_kernel_is_exactly_invariant(rng):
    spec = _sign_spec()
    x = rng.normal(size=(4, 2))
    x2 = rng.normal(size=(3, 2))
    k = _eval(kr.k_invariant_mc, x, x2, spec, rng=rng)
    k_flipped = _eval(kr.k_invariant_mc, -x, x2, spec, rng=rng)
    np.testing.assert_allclose(k, k_flipped, rtol=1e-12)


def test_sign_flip_kernel_matches_enumeration_oracle(rng):
    spec = _sign_spec()
    x = rng.normal(size=(3, 2))
    x2 = rng.normal(size=(4, 2))
    want = 0.25 * sum(
        se_kernel_np(sa * x, sb * x2, 0.9, 1.3)
        for sa in (1.0, -1.0) for sb in (1.0, -1.0))
    got = _eval(kr.k_invariant_mc, x, x2, spec, rng=rng)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_degenerate_orbit_recovers_plain_kernel(rng):
    x = rng.normal(size=(3, 4, 4, 1))
    orbit = tf.rotation_orbit(0.0)
    spec = kr.KernelSpec(16, lengthscales=1.0, variance=1.0, orbit=orbit, s_o=3)
    plain = kr.KernelSpec(16, lengthscales=1.0, variance=1.0)
    got = _eval(kr.k_invariant_mc, x, x, spec, rng=np.random.default_rng(0))
    want = _eval(kr.k_base, x.reshape(3, -1), x.reshape(3, -1), plain)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_shared_draw_gram_is_psd(rng):
    orbit = tf.rotation_orbit(0.6)
    spec = kr.KernelSpec(36, lengthscales=2.0, variance=1.0, orbit=orbit, s_o=5)
    x = rng.uniform(size=(12, 6, 6, 1))
    k = _eval(kr.k_invariant_mc, x, x, spec, rng=rng, shared=True)
    np.testing.assert_allclose(k, k.T, atol=1e-12)
    assert np.linalg.eigvalsh(0.5 * (k + k.T)).min() > -1e-10


def test_shared_draw_requires_identical_arguments(rng):
    spec = kr.KernelSpec(36, orbit=tf.rotation_orbit(0.3), s_o=2)
    x = rng.uniform(size=(3, 6, 6, 1))
    t = ng.Tape()
    with pytest.raises(ValueError, match="shared"):
        kr.k_invariant_mc(t, x, x.copy(), spec, rng=rng, shared=True)


# ---------------------------------------------------------------------------
# invariant kernels: continuous rotation orbit vs quadrature


ANGLE = 0.5


def _rot_spec(s_o, lengthscale=2.0):
    return kr.KernelSpec(36, lengthscales=lengthscale, variance=1.0,
                         orbit=tf.rotation_orbit(ANGLE), s_o=s_o)


def _quad_rotations(images):
    """Oracle rotations of (N,H,W) images at 17 Gauss-Legendre nodes."""
    nodes, weights = gauss_legendre_pairs(-ANGLE, ANGLE, n=17)
    rots = np.stack([
        np.stack([rotate_image_np(img, th) for th in nodes]) for img in images
    ])  # (N, Q, H, W)
    return rots.reshape(rots.shape[0], rots.shape[1], -1), weights


def test_invariant_mc_mean_matches_quadrature(rng):
    images = rng.uniform(size=(2, 6, 6))
    rots, w = _quad_rotations(images)
    want = np.einsum(
        "p,q,pq->", w, w,
        se_kernel_np(rots[0], rots[1], 2.0, 1.0))
    spec = _rot_spec(s_o=4)
    x = images[:1][..., None]
    x2 = images[1:][..., None]
    draws = np.array([
        _eval(kr.k_invariant_mc, x, x2, spec,
              rng=np.random.default_rng(1000 + i))[0, 0]
        for i in range(400)
    ])
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - want) < 4 * se + 1e-9, (draws.mean(), want, se)


def test_invariant_diag_mc_is_unbiased_for_double_integral(rng):
    images = rng.uniform(size=(1, 6, 6))
    rots, w = _quad_rotations(images)
    want = np.einsum("p,q,pq->", w, w, se_kernel_np(rots[0], rots[0], 2.0, 1.0))
    spec = _rot_spec(s_o=3)
    x = images[..., None]
    draws = np.array([
        _eval(kr.k_invariant_diag_mc, x, spec,
              rng=np.random.default_rng(2000 + i))[0]
        for i in range(400)
    ])
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - want) < 4 * se + 1e-9
    # the naive single-draw diagonal k(x,x)=variance would overshoot: the
    # unbiased two-draw estimate must sit strictly below it on average
    assert draws.mean() < 1.0 - 4 * se


def test_cross_covariance_matches_quadrature(rng):
    images = rng.uniform(size=(1, 6, 6))
    rots, w = _quad_rotations(images)
    z = rng.normal(scale=0.4, size=(2, 36)) + images.reshape(1, -1)
    want = se_kernel_np(z, rots[0], 2.0, 1.0) @ w  # (2,)
    spec = _rot_spec(s_o=4)
    x = images[..., None]
    draws = np.stack([
        _eval(kr.k_cross_zx, z, x, spec, rng=np.random.default_rng(3000 + i))[:, 0]
        for i in range(400)
    ])
    se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - want) < 4 * se + 1e-9)


def test_cross_covariance_without_orbit_is_base_kernel(rng):
    spec = kr.KernelSpec(4, lengthscales=0.8, variance=1.5)
    z = rng.normal(size=(3, 4))
    x = rng.normal(size=(5, 4))
    got = _eval(kr.k_cross_zx, z, x, spec)
    np.testing.assert_allclose(got, se_kernel_np(z, x, 0.8, 1.5), rtol=1e-12)


def test_inducing_gram_ignores_orbit_parameters(rng):
    # K_zz lives in feature space: no orbit-parameter gradient may leak in
    orbit = tf.rotation_orbit(0.4)
    spec = kr.KernelSpec(4, orbit=orbit, s_o=3)
    z = rng.normal(size=(5, 4))
    t = ng.Tape()
    loss = ng.sum_(kr.k_base(t, z, z, spec))
    grads = ng.backward(loss, params=spec.params())
    for p in orbit.params():
        np.testing.assert_array_equal(grads[p.id], 0.0)


def test_invariant_kernel_gradients_with_frozen_draws(rng):
    orbit = tf.OrbitDistribution(
        tf.NEUTRAL - np.array([0.3, 0.05, 0.05, 0.02, 0.02, 0.1, 0.1]),
        tf.NEUTRAL + np.array([0.3, 0.05, 0.05, 0.02, 0.02, 0.1, 0.1]),
        np.ones(7, dtype=bool))
    spec = kr.KernelSpec(16, lengthscales=1.5, variance=1.1, orbit=orbit, s_o=2)
    x = rng.uniform(size=(3, 4, 4, 1))
    eps = rng.uniform(size=(3 * 2, 7))
    eps2 = rng.uniform(size=(3 * 2, 7))

    def loss():
        return ng.sum_(kr.k_invariant_mc(ng.Tape(), x, x, spec, eps=eps, eps2=eps2))

    report = ng.grad_check(loss, spec.params(), step=1e-6, rtol=1e-4)
    assert report.passed, report
