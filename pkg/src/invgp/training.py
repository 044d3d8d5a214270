"""Optimizers, phase schedules, coordinate-ascent control, and greedy-variance
inducing initialization."""

from __future__ import annotations

from dataclasses import dataclass, field
import warnings

import numpy as np

from . import kernels as kr
from . import ndgrad as ng
from .rand import substream


class AdamState:
    """First/second moment accumulators; default betas per the usual Adam."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {p.id: np.zeros_like(p.value) for p in params}
        self.v = {p.id: np.zeros_like(p.value) for p in params}

    def ensure(self, params):
        for p in params:
            if p.id not in self.m:
                self.m[p.id] = np.zeros_like(p.value)
                self.v[p.id] = np.zeros_like(p.value)


def adam_step(state, params, grads, lr, ascend=False, lr_multipliers=None):
    """One Adam update with bias correction over the given params.

    ``ascend=True`` follows +gradient (ELBO maximization). Params that are
    not trainable are untouched. A non-finite gradient aborts the whole step.
    """
    state.ensure(params)
    active = [p for p in params if p.trainable]
    for p in active:
        g = grads[p.id]
        if not np.all(np.isfinite(g)):
            raise ng.NumericsError(
                f"non-finite gradient for param {p.id!r}; step aborted", p.id)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p in active:
        g = -grads[p.id] if ascend else grads[p.id]
        state.m[p.id] = b1 * state.m[p.id] + (1 - b1) * g
        state.v[p.id] = b2 * state.v[p.id] + (1 - b2) * g * g
        mhat = state.m[p.id] / (1 - b1 ** t)
        vhat = state.v[p.id] / (1 - b2 ** t)
        step_lr = lr * (lr_multipliers or {}).get(p.group, 1.0)
        p.value -= step_lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class Phase:
    """One coordinate-ascent phase: which groups train, for how long."""

    groups: tuple
    steps: int
    lr: float
    lr_decay: str = "none"          # "none" | "steps" | "cyclic"
    decay_fractions: tuple = (0.5, 0.75)
    decay_factor: float = 10.0
    cyclic_levels: tuple = (0.01, 0.1, 1.0, 0.1, 0.01)

    def __post_init__(self):
        if not self.groups:
            raise ValueError("phase must train a nonempty group set")

    def lr_at(self, step):
        if self.lr_decay == "none":
            return self.lr
        if self.lr_decay == "steps":
            lr = self.lr
            for frac in self.decay_fractions:
                if step >= frac * self.steps:
                    lr /= self.decay_factor
            return lr
        if self.lr_decay == "cyclic":
            k = len(self.cyclic_levels)
            idx = min(int(step * k / max(self.steps, 1)), k - 1)
            return self.lr * self.cyclic_levels[idx]
        raise ValueError(f"unknown lr_decay {self.lr_decay!r}")


GP_GROUPS = ("gp_variational", "gp_hyper", "orbit", "likelihood")
NN_GROUPS = ("nn_weights",)


@dataclass
class TrainSchedule:
    phases: list
    cycles: int = 1
    toggle_rule: str = "fixed_steps"   # or "validation_plateau"
    patience: int = 5
    eval_every: int = 200

    def total_steps(self):
        return self.cycles * sum(ph.steps for ph in self.phases)


def coordinate_ascent(model, schedule, x, y, n_total=None, seed=0,
                      val_data=None, metrics_hook=None, batch_size=None,
                      orbit_lr_multiplier=1.0):
    """Alternating maximization of the ELBO over parameter-group phases.

    GP phases train the variational/hyper/orbit/likelihood groups; NN phases
    train only the network weights with everything else frozen. Emits one
    metrics record per step (plus validation accuracy when checkpointed).
    Returns the metrics list; the model is trained in place.
    """
    if schedule.toggle_rule == "validation_plateau" and val_data is None:
        raise ValueError("validation_plateau toggling requires val_data")
    n = x.shape[0]
    n_total = n_total or n
    batch_size = batch_size or min(n, 200)
    data_rng = substream(seed, "data")
    mc_rng = substream(seed, "orbit")
    params = model.params()
    adam = AdamState(params)
    metrics = []
    step = 0
    for cycle in range(schedule.cycles):
        for phase_idx, phase in enumerate(schedule.phases):
            active = [p for p in params if p.group in phase.groups]
            best_metric = -np.inf
            misses = 0
            for local in range(phase.steps):
                sel = data_rng.choice(n, size=min(batch_size, n), replace=False)
                tape = ng.Tape()
                bound = model.elbo_node(tape, x[sel], y[sel], n_total, mc_rng)
                grads = ng.backward(bound, params=active)
                adam_step(adam, active, grads, phase.lr_at(local), ascend=True,
                          lr_multipliers={"orbit": orbit_lr_multiplier})
                model.project()
                tape.release()  # frees this step's intermediates immediately
                rec = {
                    "step": step,
                    "phase": phase_idx,
                    "cycle": cycle,
                    "groups": list(phase.groups),
                    "elbo": float(bound.value),
                    "kl": bound.info.get("kl"),
                    "ell": bound.info.get("ell"),
                    "tau_clamp_count": bound.info.get("tau_clamp_count", 0),
                }
                if model.orbit is not None and hasattr(model.orbit, "effective_range"):
                    lo, hi = model.orbit.effective_range()
                    rec["phi_min"] = lo.tolist()
                    rec["phi_max"] = hi.tolist()
                do_eval = val_data is not None and (
                    local % schedule.eval_every == schedule.eval_every - 1
                    or local == phase.steps - 1)
                if do_eval:
                    acc = model.accuracy(val_data[0], val_data[1],
                                         rng=substream(seed, "valeval", step))
                    rec["val_acc"] = acc
                    if schedule.toggle_rule == "validation_plateau":
                        if acc > best_metric + 1e-12:
                            best_metric = acc
                            misses = 0
                        else:
                            misses += 1
                metrics.append(rec)
                if metrics_hook is not None:
                    metrics_hook(rec)
                step += 1
                if (schedule.toggle_rule == "validation_plateau"
                        and misses >= schedule.patience):
                    break
    return metrics


def greedy_variance_init(features, spec, m):
    """Pick m inducing rows by maximal residual conditional prior variance.

    Incremental pivoted Cholesky of the Nystrom residual; ties break at the
    lowest index. If the residual collapses below 1e-12 before m picks
    (duplicate features), returns fewer rows with a warning.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if m > n:
        raise ValueError(f"m={m} exceeds number of candidates {n}")
    tape = ng.Tape()
    diag = kr.k_base_diag(tape, features, spec).value.copy()
    ell = np.exp(spec.log_lengthscales.value)
    var = np.exp(spec.log_variance.value)
    xs = features / ell

    chosen = []
    cols = np.zeros((m, n))
    resid = diag.copy()
    for j in range(m):
        pick = int(np.argmax(resid))
        if resid[pick] < 1e-12:
            warnings.warn(
                f"residual variance collapsed after {j} picks (duplicate "
                "features); returning fewer inducing points")
            cols = cols[:j]
            break
        d2 = ((xs - xs[pick]) ** 2).sum(axis=1)
        k_col = var * np.exp(-0.5 * d2)
        c = (k_col - cols[:j, pick] @ cols[:j]) / np.sqrt(resid[pick])
        cols[j] = c
        resid = np.maximum(resid - c * c, 0.0)
        chosen.append(pick)
    return features[chosen].copy(), chosen


def nystrom_residual_trace(features, spec, chosen):
    """Trace of K_ff - Q_ff given selected inducing rows (test oracle aid)."""
    features = np.asarray(features, dtype=np.float64)
    tape = ng.Tape()
    kff_diag = kr.k_base_diag(tape, features, spec).value
    if len(chosen) == 0:
        return float(kff_diag.sum())
    zi = features[chosen]
    kzz = kr.k_base(tape, zi, zi, spec).value + 1e-12 * np.eye(len(chosen))
    kzx = kr.k_base(tape, zi, features, spec).value
    l = np.linalg.cholesky(kzz)
    a = np.linalg.solve(l, kzx)
    return float((kff_diag - (a * a).sum(axis=0)).sum())
