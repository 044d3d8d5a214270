"""Model container tying kernel, inducing state, likelihood, and orbit
together, plus the single-file checkpoint format."""

from __future__ import annotations

import json
import struct

import numpy as np

from . import gpcore as gp
from . import kernels as kr
from . import ndgrad as ng

CHECKPOINT_MAGIC = b"NDCK"


class InvariantGPModel:
    """Sparse variational GP, optionally invariant and/or deep-kernel.

    ``elbo_mode`` is "closed_gaussian" or "sample_bound". For classification
    with a Gaussian likelihood, targets are one-hot rows in {0,1}; with
    Softmax, integer labels.
    """

    def __init__(self, spec, inducing, likelihood, elbo_mode="closed_gaussian",
                 s_g=1, s_a=1, classification=False):
        self.spec = spec
        self.inducing = inducing
        self.likelihood = likelihood
        self.elbo_mode = elbo_mode
        self.s_g = s_g
        self.s_a = s_a
        self.classification = classification

    @property
    def orbit(self):
        return self.spec.orbit

    def params(self):
        seen = {}
        for p in self.spec.params() + self.inducing.params() + self.likelihood.params():
            seen.setdefault(p.id, p)
        return list(seen.values())

    def project(self):
        if self.spec.orbit is not None:
            self.spec.orbit.project()

    def elbo_node(self, tape, xb, yb, n_total, rng, frozen=None):
        return gp.elbo(tape, xb, yb, n_total, self.spec, self.inducing,
                       self.likelihood, self.elbo_mode, s_g=self.s_g,
                       s_a=self.s_a, rng=rng, frozen=frozen)

    # -- prediction ---------------------------------------------------------

    def predict_mean(self, x, s_o_eval=None, rng=None, batch=256):
        """Orbit-averaged posterior mean of f at inputs, (N, C) numpy array."""
        x = np.asarray(x, dtype=np.float64)
        if rng is None:
            rng = np.random.default_rng(0)
        outs = []
        saved = self.spec.s_o
        if s_o_eval is not None and self.spec.orbit is not None:
            self.spec.s_o = s_o_eval
        try:
            for start in range(0, x.shape[0], batch):
                xb = x[start : start + batch]
                tape = ng.Tape()
                z = tape.leaf(self.inducing.z)
                kzz = kr.k_base(tape, z, z, self.spec)
                lk = ng.cholesky(kzz, jitter=gp.DEFAULT_JITTER)
                kzx = kr.k_cross_zx(tape, z, xb, self.spec, rng=rng)
                alpha = gp._kzz_solve(lk, kzx)
                mu = ng.transpose(alpha) @ tape.leaf(self.inducing.m)
                outs.append(mu.value)
                tape.release()
        finally:
            self.spec.s_o = saved
        return np.concatenate(outs, axis=0)

    def predict_labels(self, x, s_o_eval=None, rng=None):
        return np.argmax(self.predict_mean(x, s_o_eval=s_o_eval, rng=rng), axis=1)

    def accuracy(self, x, labels, s_o_eval=None, rng=None):
        pred = self.predict_labels(x, s_o_eval=s_o_eval, rng=rng)
        return float(np.mean(pred == np.asarray(labels).reshape(-1)))

    def evaluate(self, x, y, labels=None, s_o_eval=None, rng=None):
        """Test metrics: accuracy (classification), MSE, predictive log-lik."""
        mu = self.predict_mean(x, s_o_eval=s_o_eval, rng=rng)
        out = {}
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape == mu.shape:
            out["mse"] = float(np.mean((mu - y) ** 2))
        if self.classification and labels is not None:
            labels = np.asarray(labels).reshape(-1)
            out["accuracy"] = float(np.mean(np.argmax(mu, axis=1) == labels))
        if self.likelihood.kind == "gaussian" and y.shape == mu.shape:
            s2 = float(np.exp(self.likelihood.log_noise.value))
            out["log_lik"] = float(np.mean(
                -0.5 * np.log(2 * np.pi * s2) - (y - mu) ** 2 / (2 * s2)))
        elif self.likelihood.kind == "softmax" and labels is not None:
            logits = mu - mu.max(axis=1, keepdims=True)
            logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            out["log_lik"] = float(np.mean(logp[np.arange(len(labels)),
                                                np.asarray(labels).reshape(-1)]))
        return out


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 manifest length, manifest JSON, NDG1 tensor blobs


def save_checkpoint(path, params, step=0, rng_state=None, extra=None):
    manifest = {
        "params": [
            {"id": p.id, "group": p.group, "shape": list(p.value.shape),
             "trainable": bool(p.trainable)}
            for p in params
        ],
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            ng.write_tensor(fh, p.value)


def load_checkpoint(path):
    """Returns (manifest dict, {param id: array})."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (length,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(length).decode())
        values = {}
        for entry in manifest["params"]:
            values[entry["id"]] = ng.read_tensor(fh)
    return manifest, values


def restore_params(params, values, strict=True):
    for p in params:
        if p.id in values:
            if values[p.id].shape != p.value.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {p.id}: "
                    f"{values[p.id].shape} vs {p.value.shape}")
            p.value[...] = values[p.id]
        elif strict:
            raise KeyError(f"param {p.id} missing from checkpoint")
