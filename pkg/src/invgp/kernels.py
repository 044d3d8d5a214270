"""SE-ARD base kernel, deep-kernel composition, and Monte-Carlo invariant
kernels with the inter-domain cross-covariance k(z, x).

Inducing inputs always live in feature space, so K_zz only ever touches the
base kernel; the orbit enters through k(z,x) and k_f(x,x) estimates.
"""

from __future__ import annotations

import numpy as np

from . import ndgrad as ng


class KernelSpec:
    """SE-ARD kernel, optionally composed with a feature extractor and orbit.

    Hyperparameters are stored as logs to keep positivity unconstrained.
    ``variance_fixed`` freezes the kernel variance (the "F" configurations).
    """

    def __init__(self, input_dim, lengthscales=1.0, variance=1.0,
                 variance_fixed=False, feature_map=None, orbit=None, s_o=1,
                 name="kernel"):
        ls = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (input_dim,))
        if np.any(ls <= 0) or variance <= 0:
            raise ValueError("lengthscales and variance must be positive")
        if orbit is not None and s_o < 1:
            raise ValueError("s_o must be >= 1 when an orbit is present")
        self.input_dim = input_dim
        self.log_lengthscales = ng.Param(f"{name}.log_lengthscales", np.log(ls), "gp_hyper")
        self.log_variance = ng.Param(f"{name}.log_variance", np.log(variance),
                                     "gp_hyper", trainable=not variance_fixed)
        self.feature_map = feature_map
        self.orbit = orbit
        self.s_o = s_o

    def params(self):
        out = [self.log_lengthscales, self.log_variance]
        if self.feature_map is not None:
            out += self.feature_map.params()
        if self.orbit is not None:
            out += self.orbit.params()
        return out

    def _hyper_nodes(self, tape):
        ell = ng.exp(tape.leaf(self.log_lengthscales))
        var = ng.exp(tape.leaf(self.log_variance))
        return ell, var

    def features(self, tape, x):
        """Apply the feature extractor (identity when absent)."""
        if self.feature_map is None:
            if isinstance(x, np.ndarray):
                x = tape.constant(x.reshape(x.shape[0], -1))
            return x
        return self.feature_map.forward(tape, x, mode="feature")


def _lift(tape, x):
    return tape.constant(np.asarray(x, dtype=np.float64)) if isinstance(x, np.ndarray) else x


def k_base(tape, x, x2, spec):
    """SE-ARD Gram matrix between feature-space inputs: (N,D) x (M,D) -> (N,M)."""
    x = _lift(tape, x)
    x2 = _lift(tape, x2)
    if x.shape[1] != spec.input_dim or x2.shape[1] != spec.input_dim:
        raise ValueError(
            f"feature dim mismatch: {x.shape[1]}/{x2.shape[1]} vs {spec.input_dim}")
    ell, var = spec._hyper_nodes(tape)
    xs = x / ell
    x2s = x2 / ell
    n1 = ng.sum_(ng.square(xs), axis=1, keepdims=True)
    n2 = ng.sum_(ng.square(x2s), axis=1, keepdims=True)
    d2 = n1 + ng.transpose(n2) - 2.0 * (xs @ ng.transpose(x2s))
    return var * ng.exp(-0.5 * d2)


def k_base_diag(tape, x, spec):
    """Diagonal of k_base(x, x): constant at the kernel variance."""
    x = _lift(tape, x)
    _, var = spec._hyper_nodes(tape)
    return var * tape.constant(np.ones(x.shape[0]))


def _pairwise_batched(tape, a, b, spec):
    """Blockwise SE-ARD: (N,S,D) x (N,T,D) -> (N,S,T), one block per point."""
    ell, var = spec._hyper_nodes(tape)
    a = a / ell
    b = b / ell
    na = ng.sum_(ng.square(a), axis=2, keepdims=True)  # (N,S,1)
    nb = ng.sum_(ng.square(b), axis=2, keepdims=True)  # (N,T,1)
    cross = a @ ng.transpose(b, (0, 2, 1))  # (N,S,T)
    d2 = na + ng.transpose(nb, (0, 2, 1)) - 2.0 * cross
    return var * ng.exp(-0.5 * d2)


def k_deep(tape, x, x2, spec):
    """Base kernel on extracted features; gradients flow into the net weights."""
    return k_base(tape, spec.features(tape, x), spec.features(tape, x2), spec)


def orbit_features(tape, x, spec, rng=None, eps=None):
    """Features of orbit samples: raw batch (N,...) -> node (N, S_o, D)."""
    warped, eps = spec.orbit.transformed(tape, x, spec.s_o, rng=rng, eps=eps)
    n = np.asarray(x).shape[0]
    flat = warped.reshape((n * spec.s_o, -1))
    feats = spec.features(tape, flat) if spec.feature_map is None else \
        spec.feature_map.forward(tape, warped, mode="feature")
    return feats.reshape((n, spec.s_o, feats.shape[-1])), eps


def k_invariant_mc(tape, x, x2, spec, rng=None, shared=False, eps=None, eps2=None):
    """Monte-Carlo estimate of the orbit-averaged kernel, (N,...) x (M,...).

    ``shared=False`` draws independent orbit samples per argument and is
    unbiased for the double orbit integral. ``shared=True`` reuses one draw
    per data point on both sides (requires x is x2): biased off-diagonal but
    the resulting Gram is exactly PSD; this is the sum-kernel regime used by
    the SGPR probe.
    """
    if spec.orbit is None:
        return k_deep(tape, x, x2, spec)
    fa, eps = orbit_features(tape, x, spec, rng=rng, eps=eps)
    if shared:
        if x2 is not x:
            raise ValueError("shared-draw regime requires both arguments identical")
        fb = fa
    else:
        fb, eps2 = orbit_features(tape, x2, spec, rng=rng, eps=eps2)
    n, s, d = fa.shape
    m = fb.shape[0]
    big = k_base(tape, fa.reshape((n * s, d)), fb.reshape((m * s, d)), spec)
    blocks = big.reshape((n, s, m, s))
    return ng.mean(blocks, axis=(1, 3))


def k_invariant_diag_mc(tape, x, spec, rng=None, eps=None, eps2=None):
    """Unbiased per-point estimate of k_f(x,x) from two independent orbit draws."""
    if spec.orbit is None:
        return k_base_diag(tape, spec.features(tape, x), spec)
    fa, eps = orbit_features(tape, x, spec, rng=rng, eps=eps)
    fb, eps2 = orbit_features(tape, x, spec, rng=rng, eps=eps2)
    return k_diag_from_features(tape, fa, fb, spec)


def k_diag_from_features(tape, fa, fb, spec):
    """Unbiased k_f(x,x) diagonal from two independent orbit-feature draws."""
    blocks = _pairwise_batched(tape, fa, fb, spec)  # (N,S,S)
    return ng.mean(blocks, axis=(1, 2))


def k_cross_zx(tape, z, x, spec, rng=None, eps=None):
    """Inter-domain cross-covariance estimate: (M,D) x (N,...) -> (M,N).

    Unbiased for the integral of k_base(z, h(x_a)) over the orbit density.
    """
    z = _lift(tape, z)
    if spec.orbit is None:
        return k_base(tape, z, spec.features(tape, x), spec)
    feats, eps = orbit_features(tape, x, spec, rng=rng, eps=eps)
    return k_cross_from_features(tape, z, feats, spec)


def k_cross_from_features(tape, z, feats, spec):
    """k(z, x) estimate from already-extracted orbit features (N,S,D) -> (M,N)."""
    n, s, d = feats.shape
    big = k_base(tape, z, feats.reshape((n * s, d)), spec)  # (M, N*S)
    return ng.mean(big.reshape((big.shape[0], n, s)), axis=2)
