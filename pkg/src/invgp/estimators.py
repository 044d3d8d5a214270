"""Scikit-learn style estimator wrappers around the invariant sparse GP.

These cover the common cases — regression and classification on flat or
image-shaped inputs, with an optional learnable affine orbit — behind
``fit`` / ``predict`` / ``score`` with ``get_params`` / ``set_params``.
Anything more exotic (deep kernels, custom schedules, coordinate ascent)
uses the library modules directly.
"""

from __future__ import annotations

import numpy as np

from . import gpcore as gp
from . import kernels as kr
from . import model as mdl
from . import training as tr
from . import transforms as tf


def check_inputs(x, y=None, image_shape=None):
    """Validate and coerce inputs to float64; returns (x, y).

    ``x`` may be (N, D) flat or (N, H, W, C) images when image_shape is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        x = x.reshape(len(x), -1)
    if image_shape is not None:
        x = x.reshape((x.shape[0],) + tuple(image_shape))
    if not np.all(np.isfinite(x)):
        raise ValueError("inputs contain non-finite values")
    if y is None:
        return x, None
    y = np.asarray(y)
    if len(y) != x.shape[0]:
        raise ValueError(
            f"inputs and targets disagree on N: {x.shape[0]} vs {len(y)}")
    return x, y


class _BaseInvariantGP:
    _param_names = ("n_inducing", "lengthscale", "variance", "orbit",
                    "orbit_angle", "s_o", "steps", "lr", "noise_variance",
                    "noise_fixed", "seed")

    def __init__(self, n_inducing=50, lengthscale=1.0, variance=1.0,
                 orbit="none", orbit_angle=0.02, s_o=20, steps=500, lr=0.01,
                 noise_variance=0.1, noise_fixed=False, seed=0):
        self.n_inducing = n_inducing
        self.lengthscale = lengthscale
        self.variance = variance
        self.orbit = orbit          # "none" | "rotation" | "sign_flip"
        self.orbit_angle = orbit_angle
        self.s_o = s_o
        self.steps = steps
        self.lr = lr
        self.noise_variance = noise_variance
        self.noise_fixed = noise_fixed
        self.seed = seed

    # -- sklearn plumbing ---------------------------------------------------

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for key, val in params.items():
            if key not in self._param_names:
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, val)
        return self

    # -- shared fitting machinery -------------------------------------------

    def _build_orbit(self):
        if self.orbit == "none":
            return None, None
        if self.orbit == "sign_flip":
            return tf.SignFlipOrbit(), 2
        if self.orbit == "rotation":
            return tf.rotation_orbit(self.orbit_angle), self.s_o
        raise ValueError(f"unknown orbit kind {self.orbit!r}")

    def _fit_model(self, x, y, n_outputs, classification):
        orbit, s_o = self._build_orbit()
        self.image_shape_ = x.shape[1:] if x.ndim == 4 else None
        flat = x.reshape(x.shape[0], -1)
        spec = kr.KernelSpec(flat.shape[1], lengthscales=self.lengthscale,
                             variance=self.variance, orbit=orbit,
                             s_o=s_o or 1)
        z0, _ = tr.greedy_variance_init(flat, spec,
                                        min(self.n_inducing, flat.shape[0]))
        inducing = gp.InducingState(z0, n_outputs)
        gp.init_qu_at_prior(inducing, spec)
        lik = gp.GaussianLikelihood(self.noise_variance, fixed=self.noise_fixed)
        model = mdl.InvariantGPModel(spec, inducing, lik,
                                     elbo_mode="closed_gaussian",
                                     classification=classification)
        phase = tr.Phase(("gp_variational", "gp_hyper", "orbit", "likelihood"),
                         steps=self.steps, lr=self.lr)
        xin = x if orbit is not None and x.ndim == 4 else flat
        self.history_ = tr.coordinate_ascent(
            model, tr.TrainSchedule([phase]), xin, y, n_total=x.shape[0],
            seed=self.seed)
        self.model_ = model
        self.elbo_ = self.history_[-1]["elbo"]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def _predict_input(self, x):
        x, _ = check_inputs(x)
        if self.image_shape_ is not None:
            return x.reshape((x.shape[0],) + tuple(self.image_shape_))
        return x.reshape(x.shape[0], -1)


class InvariantGPRegressor(_BaseInvariantGP):
    """Sparse variational GP regression with an optional learnable orbit."""

    def fit(self, x, y):
        x, y = check_inputs(x, y)
        y = np.asarray(y, dtype=np.float64)
        y2 = y.reshape(-1, 1) if y.ndim == 1 else y
        self._y_was_flat = y.ndim == 1
        return self._fit_model(x, y2, y2.shape[1], classification=False)

    def predict(self, x):
        self._check_fitted()
        mu = self.model_.predict_mean(self._predict_input(x))
        return mu[:, 0] if self._y_was_flat else mu

    def score(self, x, y):
        """R^2 of the posterior-mean predictions."""
        y = np.asarray(y, dtype=np.float64)
        pred = self.predict(x)
        resid = ((y - pred) ** 2).sum()
        total = ((y - y.mean()) ** 2).sum()
        return float(1.0 - resid / total) if total > 0 else 0.0


class InvariantGPClassifier(_BaseInvariantGP):
    """Gaussian-on-one-hot GP classification, argmax over class means."""

    def fit(self, x, y):
        x, y = check_inputs(x, y)
        labels = np.asarray(y).reshape(-1).astype(int)
        if labels.min() < 0:
            raise ValueError("labels must be non-negative integers")
        self.classes_ = np.unique(labels)
        lut = {c: i for i, c in enumerate(self.classes_)}
        onehot = np.eye(len(self.classes_))[[lut[c] for c in labels]]
        return self._fit_model(x, onehot, len(self.classes_),
                               classification=True)

    def predict(self, x):
        self._check_fitted()
        mu = self.model_.predict_mean(self._predict_input(x))
        return self.classes_[np.argmax(mu, axis=1)]

    def predict_proba(self, x):
        """Softmax over per-class predictive means (a calibration-free
        convenience, not the model's likelihood)."""
        self._check_fitted()
        mu = self.model_.predict_mean(self._predict_input(x))
        e = np.exp(mu - mu.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def score(self, x, y):
        return float(np.mean(self.predict(x) == np.asarray(y).reshape(-1)))
