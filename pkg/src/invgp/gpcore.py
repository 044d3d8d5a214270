"""Sparse variational GP machinery.

Inducing variables are observations of the non-invariant latent g in feature
space, so K_zz never touches the orbit (inter-domain construction). The
Gaussian route uses the closed-form expected log-likelihood with unbiased
Monte-Carlo moment estimates; the sample-based route lower-bounds any
log-concave likelihood using pathwise (Matheron) posterior samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as kr
from . import ndgrad as ng

# first factorization attempt is clean; escalation inside ng.cholesky starts
# at 1e-6 and multiplies by 10 up to the cap when the clean attempt fails
DEFAULT_JITTER = 0.0
MATHERON_BUDGET = 4096


class InducingState:
    """Inducing inputs z plus per-output variational Gaussians N(m_c, S_c).

    S_c is parameterized by an unconstrained square matrix whose strict lower
    triangle is used as-is and whose diagonal passes through exp, keeping the
    Cholesky factor's diagonal strictly positive.
    """

    def __init__(self, z, n_outputs=1, init_variance=0.01, name="gp",
                 train_z=True):
        z = np.asarray(z, dtype=np.float64)
        m, d = z.shape
        self.num_inducing = m
        self.n_outputs = n_outputs
        self.z = ng.Param(f"{name}.z", z, "gp_variational", trainable=train_z)
        self.m = ng.Param(f"{name}.m", np.zeros((m, n_outputs)), "gp_variational")
        raw = np.zeros((n_outputs, m, m))
        raw[:, np.arange(m), np.arange(m)] = 0.5 * np.log(init_variance)
        self.l_raw = ng.Param(f"{name}.l_raw", raw, "gp_variational")

    def params(self):
        return [self.z, self.m, self.l_raw]

    def scale_factors(self, tape):
        """Effective lower-triangular factors L, shape (C, M, M)."""
        raw = tape.leaf(self.l_raw)
        m = self.num_inducing
        strict = np.tril(np.ones((m, m)), -1)
        eye = np.eye(m)
        diag = ng.exp(raw * eye) * eye  # exp applied on the diagonal only
        return raw * tape.constant(strict) + diag


class GaussianLikelihood:
    kind = "gaussian"

    def __init__(self, variance=0.1, fixed=False, name="lik"):
        if variance <= 0:
            raise ValueError("noise variance must be positive")
        self.log_noise = ng.Param(f"{name}.log_noise", np.log(variance),
                                  "likelihood", trainable=not fixed)

    def params(self):
        return [self.log_noise]

    def noise(self, tape):
        return ng.exp(tape.leaf(self.log_noise))


class SoftmaxLikelihood:
    kind = "softmax"

    def __init__(self, n_classes):
        if n_classes < 2:
            raise ValueError("softmax needs at least 2 classes")
        self.n_classes = n_classes

    def params(self):
        return []


@dataclass
class PredictiveMoments:
    mu: ng.Node          # (N, C) posterior mean estimate
    tau: ng.Node         # (N, C) posterior variance estimate, clamped at 0
    mu_sq: ng.Node       # (N, C) unbiased estimate of mu**2
    tau_clamp_count: int


def init_qu_at_prior(inducing, spec, jitter=1e-10):
    """Set q(u) = N(0, K_zz) in place so the initial KL term is zero.

    Starting from a near-diagonal covariance can put the early bound many
    orders of magnitude below its optimum when K_zz is ill-conditioned,
    wasting most of the step budget on the KL term.
    """
    kzz = kr.k_base(ng.Tape(), inducing.z.value, inducing.z.value, spec).value
    lk = np.linalg.cholesky(kzz + jitter * np.eye(len(kzz)))
    raw = np.tril(lk, -1)
    idx = np.arange(len(kzz))
    raw[idx, idx] = np.log(np.diag(lk))
    inducing.m.value = np.zeros_like(inducing.m.value)
    inducing.l_raw.value = np.repeat(raw[None], inducing.n_outputs, axis=0)


def _chol_kzz(tape, spec, inducing):
    z = tape.leaf(inducing.z)
    kzz = kr.k_base(tape, z, z, spec)
    return z, ng.cholesky(kzz, jitter=DEFAULT_JITTER)


def predictive_moments(tape, x, spec, inducing, rng=None, eps=None):
    """Unbiased estimates of (mu, mu^2, tau) of q(f) at a batch.

    With an orbit, k(z,x) is estimated twice with independent orbit draws; mu
    uses the first, mu^2 the product of both (squaring one estimate would
    bias it upward), tau pairs the two draws in its quadratic form, and the
    k_f(x,x) diagonal reuses the same two feature draws (each term of the
    bound stays unbiased by linearity of expectation, and the orbit features
    are by far the dominant cost). ``eps`` is a tuple of two frozen draw
    arrays for deterministic re-evaluation.
    """
    e1, e2 = eps if eps is not None else (None, None)
    z, lk = _chol_kzz(tape, spec, inducing)
    if spec.orbit is None:
        kzx_a = kr.k_cross_zx(tape, z, x, spec, rng=rng, eps=e1)
        kzx_b = kzx_a
        fa = fb = None
    else:
        fa, _ = kr.orbit_features(tape, x, spec, rng=rng, eps=e1)
        fb, _ = kr.orbit_features(tape, x, spec, rng=rng, eps=e2)
        kzx_a = kr.k_cross_from_features(tape, z, fa, spec)
        kzx_b = kr.k_cross_from_features(tape, z, fb, spec)
    alpha_a = _kzz_solve(lk, kzx_a)  # (M, N)
    alpha_b = alpha_a if spec.orbit is None else _kzz_solve(lk, kzx_b)

    m = tape.leaf(inducing.m)  # (M, C)
    mu = ng.transpose(alpha_a) @ m
    mu_sq = mu * mu if spec.orbit is None else (ng.transpose(alpha_a) @ m) * (ng.transpose(alpha_b) @ m)

    if spec.orbit is None:
        kff = kr.k_base_diag(tape, spec.features(tape, x), spec)
    else:
        kff = kr.k_diag_from_features(tape, fa, fb, spec)

    # tau_c = kff - alpha_a^T K_zx_b + alpha_a^T S_c alpha_b
    quad_prior = ng.sum_(alpha_a * kzx_b, axis=0)  # (N,)
    ls = inducing.scale_factors(tape)  # (C, M, M)
    n = kzx_a.shape[1]
    c = inducing.n_outputs
    la = ng.transpose(ls, (0, 2, 1)) @ alpha_a  # (C, M, N)
    lb = la if spec.orbit is None else ng.transpose(ls, (0, 2, 1)) @ alpha_b
    quad_s = ng.transpose(ng.sum_(la * lb, axis=1))  # (N, C)
    tau_raw = kff.reshape((n, 1)) - quad_prior.reshape((n, 1)) + quad_s
    clamps = int(np.sum(tau_raw.value < 0.0))
    tau = ng.clamp(tau_raw, lo=0.0)
    return PredictiveMoments(mu=mu, tau=tau, mu_sq=mu_sq, tau_clamp_count=clamps)


def _kzz_solve(lk, b):
    """K_zz^{-1} b via the Cholesky factor."""
    tmp = ng.triangular_solve(lk, b)
    return ng.triangular_solve(lk, tmp, trans=True)


def kl_term(tape, spec, inducing):
    """Sum over outputs of KL( N(m_c, S_c) || N(0, K_zz) ); always >= 0."""
    z, lk = _chol_kzz(tape, spec, inducing)
    m_count = inducing.num_inducing
    diag_idx = (np.arange(m_count), np.arange(m_count))
    logdet_kzz = 2.0 * ng.sum_(ng.log(ng.getitem(lk, diag_idx)))
    ls = inducing.scale_factors(tape)
    mvec = tape.leaf(inducing.m)
    total = None
    for c in range(inducing.n_outputs):
        ls_c = ls[c, :, :].reshape((m_count, m_count))
        a = ng.triangular_solve(lk, ls_c)
        trace = ng.sum_(ng.square(a))
        quad = ng.sum_(ng.square(ng.triangular_solve(lk, mvec[:, c])))
        logdet_s = 2.0 * ng.sum_(ng.log(ng.getitem(ls_c, diag_idx)))
        klc = 0.5 * (trace + quad - float(m_count) - logdet_s + logdet_kzz)
        total = klc if total is None else total + klc
    return total


def gaussian_expected_loglik(tape, y, moments, noise):
    """Closed-form per-point expected Gaussian log-likelihood, summed over
    outputs: -1/2 log(2 pi s2) - (y^2 - 2 y mu + mu_sq + tau) / (2 s2)."""
    y = tape.constant(np.asarray(y, dtype=np.float64)) if isinstance(y, np.ndarray) else y
    c = y.shape[1]
    quad = ng.square(y) - 2.0 * (y * moments.mu) + moments.mu_sq + moments.tau
    per_point = -0.5 * np.log(2.0 * np.pi) * c - 0.5 * c * ng.log(noise) \
        - ng.sum_(quad, axis=1) / (2.0 * noise)
    return per_point


def matheron_sample(tape, feats, spec, inducing, s_g, rng=None, noise=None):
    """Pathwise posterior samples of g at feature-space points.

    Draws an exact joint prior over [points; z], then corrects through the
    inducing variables: g = f_prior + K_xz K_zz^{-1} (u_q - u_prior).
    Returns a node of shape (s_g, T, C). ``noise`` freezes the Gaussian
    draws: a dict with "prior" (T+M, s_g*C) and "u" (C, M, s_g).
    """
    feats = kr._lift(tape, feats)
    t = feats.shape[0]
    m_count = inducing.num_inducing
    c = inducing.n_outputs
    if t + m_count > MATHERON_BUDGET:
        raise ValueError(
            f"joint prior of size {t + m_count} exceeds the dense budget {MATHERON_BUDGET}")
    if noise is None:
        noise = matheron_noise(t, m_count, c, s_g, rng)

    z = tape.leaf(inducing.z)
    joint = ng.concat([feats, z], axis=0)
    kj = kr.k_base(tape, joint, joint, spec)
    lj = ng.cholesky(kj, jitter=DEFAULT_JITTER)
    fj = lj @ tape.constant(noise["prior"])  # (T+M, s_g*C)
    f_prior = fj[:t, :].reshape((t, s_g, c))
    u_prior = fj[t:, :].reshape((m_count, s_g, c))

    kxz = kj[:t, t:]  # (T, M)
    kzz = kj[t:, t:]
    lk = ng.cholesky(kzz, jitter=DEFAULT_JITTER)

    ls = inducing.scale_factors(tape)  # (C, M, M)
    mvec = tape.leaf(inducing.m)  # (M, C)
    outs = []
    for ci in range(c):
        u_q = mvec[:, ci].reshape((m_count, 1)) + ls[ci, :, :].reshape(
            (m_count, m_count)) @ tape.constant(noise["u"][ci])  # (M, s_g)
        resid = u_q - u_prior[:, :, ci].reshape((m_count, s_g))
        v = _kzz_solve(lk, resid)  # (M, s_g)
        g = f_prior[:, :, ci].reshape((t, s_g)) + kxz @ v  # (T, s_g)
        outs.append(ng.transpose(g))  # (s_g, T)
    return ng.stack(outs, axis=2)  # (s_g, T, C)


def matheron_noise(t, m_count, c, s_g, rng):
    """Standard-normal draws for matheron_sample, in a freezable bundle."""
    return {
        "prior": rng.standard_normal((t + m_count, s_g * c)),
        "u": rng.standard_normal((c, m_count, s_g)),
    }


def sample_bound_loglik(tape, y, x, spec, inducing, likelihood, s_g, s_a,
                        rng=None, eps=None, noise=None):
    """Per-point sample-based lower bound on the expected log-likelihood.

    Estimates E_q(g) E_orbit log p(y | mean_i g(h(x_a^i))) with s_g pathwise
    posterior samples, s_a orbit-average replicates, and spec.s_o orbit
    samples inside each average. Valid (lower-bounding) for log-concave
    likelihoods; the gap shrinks as s_o grows.
    """
    n = np.asarray(x).shape[0]
    s_o = spec.s_o if spec.orbit is not None else 1
    if spec.orbit is not None:
        saved_so = spec.s_o
        spec.s_o = s_a * s_o
        feats3, eps = kr.orbit_features(tape, x, spec, rng=rng, eps=eps)
        spec.s_o = saved_so
        feats = feats3.reshape((n * s_a * s_o, feats3.shape[-1]))
    else:
        feats = spec.features(tape, x)
        s_a = 1
    g = matheron_sample(tape, feats, spec, inducing, s_g, rng=rng, noise=noise)
    c = inducing.n_outputs
    fhat = ng.mean(g.reshape((s_g, n, s_a, s_o, c)), axis=3)  # (s_g, N, s_a, C)

    if likelihood.kind == "gaussian":
        yv = np.asarray(y, dtype=np.float64).reshape((1, n, 1, c))
        noise_var = likelihood.noise(tape)
        sq = ng.square(tape.constant(yv) - fhat)
        logp = -0.5 * np.log(2.0 * np.pi) * c - 0.5 * c * ng.log(noise_var) \
            - ng.sum_(sq, axis=3) / (2.0 * noise_var)  # (s_g, N, s_a)
    elif likelihood.kind == "softmax":
        logits = fhat - ng.logsumexp(fhat, axis=3, keepdims=True)
        labels = np.asarray(y, dtype=np.int64).reshape(-1)
        picked = ng.getitem(
            ng.transpose(logits, (1, 3, 0, 2)),
            (np.arange(n)[:, None, None], labels[:, None, None],
             np.arange(s_g)[None, :, None], np.arange(s_a)[None, None, :]),
        )  # (N, s_g, s_a)
        logp = ng.transpose(picked, (1, 0, 2))
    else:
        raise ValueError(f"unsupported likelihood {likelihood.kind!r}")
    return ng.mean(logp, axis=(0, 2))  # (N,)


def elbo(tape, x, y, n_total, spec, inducing, likelihood, mode,
         s_g=1, s_a=1, rng=None, frozen=None):
    """Minibatch evidence lower bound: (N/B) sum of expected log-lik - KL.

    mode "closed_gaussian" uses the unbiased closed-form Gaussian route;
    mode "sample_bound" uses the pathwise sample bound (Gaussian or Softmax).
    ``frozen`` optionally carries {"eps": ..., "noise": ...} to pin all
    sampling for gradient checks and paired runs.
    """
    batch = np.asarray(x).shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    frozen = frozen or {}
    if mode == "closed_gaussian":
        if likelihood.kind != "gaussian":
            raise ValueError("closed_gaussian mode requires a Gaussian likelihood")
        moments = predictive_moments(tape, x, spec, inducing, rng=rng,
                                     eps=frozen.get("eps"))
        ell = gaussian_expected_loglik(tape, np.asarray(y, dtype=np.float64),
                                       moments, likelihood.noise(tape))
        clamps = moments.tau_clamp_count
    elif mode == "sample_bound":
        ell = sample_bound_loglik(tape, y, x, spec, inducing, likelihood,
                                  s_g, s_a, rng=rng,
                                  eps=frozen.get("eps"),
                                  noise=frozen.get("noise"))
        clamps = 0
    else:
        raise ValueError(f"unknown elbo mode {mode!r}")
    kl = kl_term(tape, spec, inducing)
    bound = (float(n_total) / batch) * ng.sum_(ell) - kl
    bound.info["tau_clamp_count"] = clamps
    bound.info["kl"] = float(kl.value)
    bound.info["ell"] = float(ell.value.sum())
    return bound


# ---------------------------------------------------------------------------
# collapsed SGPR bound (Titsias) for Gaussian regression


def sgpr_bound(tape, feats, y, spec, z, noise_var):
    """Collapsed sparse-GP-regression lower bound with optimal q(u).

    ``feats`` is (N, D) plain features or (N, S, D) shared orbit-sample sets
    (the sum-kernel regime: kernel entries are averages over the S samples).
    ``y`` is (N, C) regression targets sharing the kernel across columns.
    Returns the bound node; intermediate factors land in node.info for
    building predictors.
    """
    feats_arr = feats if isinstance(feats, ng.Node) else np.asarray(feats, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n, c = y.shape
    z = kr._lift(tape, z)
    m_count = z.shape[0]

    kuu = kr.k_base(tape, z, z, spec)
    lk = ng.cholesky(kuu, jitter=DEFAULT_JITTER)
    kuf, kff_sum = _sum_kernel_terms(tape, z, feats_arr, spec)

    sigma = ng.sqrt(tape.constant(noise_var)) if not isinstance(noise_var, ng.Node) else ng.sqrt(noise_var)
    a = ng.triangular_solve(lk, kuf) / sigma  # (M, N)
    b = a @ ng.transpose(a) + tape.constant(np.eye(m_count))
    lb = ng.cholesky(b, jitter=0.0)
    yn = tape.constant(y)
    cvec = ng.triangular_solve(lb, a @ yn) / sigma  # (M, C)

    diag_idx = (np.arange(m_count), np.arange(m_count))
    logdet_b = 2.0 * ng.sum_(ng.log(ng.getitem(lb, diag_idx)))
    s2 = sigma * sigma
    bound = (
        -0.5 * c * n * np.log(2.0 * np.pi)
        - 0.5 * c * logdet_b
        - 0.5 * c * float(n) * ng.log(s2)
        - 0.5 * ng.sum_(ng.square(yn)) / s2
        + 0.5 * ng.sum_(ng.square(cvec))
        - 0.5 * c * kff_sum / s2
        + 0.5 * c * ng.sum_(ng.square(a))
    )
    bound.info["factors"] = {"lk": lk.value, "lb": lb.value, "c": cvec.value,
                             "z": z.value}
    return bound


def _sum_kernel_terms(tape, z, feats, spec):
    """(K_uf, sum of diag K_ff) under the shared-orbit sum kernel."""
    if isinstance(feats, ng.Node) or feats.ndim == 2:
        kuf = kr.k_base(tape, z, feats, spec)
        kff_sum = ng.sum_(kr.k_base_diag(tape, feats, spec))
        return kuf, kff_sum
    n, s, d = feats.shape
    flat = feats.reshape(n * s, d)
    big = kr.k_base(tape, z, flat, spec)
    kuf = ng.mean(big.reshape((big.shape[0], n, s)), axis=2)
    blocks = kr._pairwise_batched(tape, tape.constant(feats), tape.constant(feats), spec)
    kff_sum = ng.sum_(ng.mean(blocks, axis=(1, 2)))
    return kuf, kff_sum


def sgpr_predict_mean(bound_node, spec, test_feats):
    """Posterior mean of the collapsed SGPR model at test inputs.

    ``test_feats`` is (N*, D) or (N*, S, D) shared orbit samples; evaluation
    is numpy-only using the factors cached on the bound node.
    """
    fac = bound_node.info["factors"]
    tape = ng.Tape()
    feats = np.asarray(test_feats, dtype=np.float64)
    kus, _ = _sum_kernel_terms(tape, tape.constant(fac["z"]), feats, spec)
    from scipy.linalg import solve_triangular
    tmp1 = solve_triangular(fac["lk"], kus.value, lower=True)
    tmp2 = solve_triangular(fac["lb"], tmp1, lower=True)
    return tmp2.T @ fac["c"]
