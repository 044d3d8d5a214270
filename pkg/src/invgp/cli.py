"""Experiment runner: JSON configs with presets, subcommands for extractor
pretraining, invariance training, evaluation, the sparse-regression probe
sweep, and plot-table emission.

Subcommands: pretrain, train, eval, probe, plot.
Flags: --config PATH, --seed INT, --out DIR, --paper-scale.
Env: INVGP_THREADS caps the BLAS worker count.

Outputs per run directory: metrics.ndjson, checkpoint.bin, manifest.json,
and RFC-4180 CSV tables. A lockfile guards against concurrent writers.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys

import numpy as np

from . import data as dt
from . import features as ft
from . import gpcore as gp
from . import kernels as kr
from . import model as mdl
from . import ndgrad as ng
from . import training as tr
from . import transforms as tf
from .rand import substream


class ConfigError(ValueError):
    """Invalid experiment config; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# configuration

PRESETS = {
    # 12-point sign-symmetric 1-D toy; paired invariant vs non-invariant runs.
    "toy-fig1": {
        "dataset": {"name": "sign_toy", "n_train": 12, "n_test": 50},
        "model": {
            "type": "shallow",
            "likelihood": "gaussian",
            "lik_variance": 0.1,
            "lik_variance_fixed": False,
            "kernel": {"lengthscale": 0.5, "variance": 1.0, "variance_fixed": False},
            "orbit": {"kind": "sign_flip"},
            "inducing": 8,
            "elbo_mode": "closed_gaussian",
        },
        "counts": {"s_o": 2, "s_g": 1, "s_a": 1, "batch": 12, "s_o_eval": 2},
        "schedule": {
            "phases": [{"groups": ["gp_variational", "gp_hyper", "likelihood"],
                        "steps": 1000, "lr": 0.05, "lr_decay": "steps"}],
            "cycles": 1,
        },
    },
    # 312-image digit subset, shallow invariant GP on pixels, small learnable
    # rotation range started near zero.
    "mnist312": {
        "dataset": {"name": "digits16", "n_train": 312, "n_test": 500},
        "model": {
            "type": "shallow",
            "likelihood": "gaussian",
            "lik_variance": 0.05,
            "lik_variance_fixed": True,
            "kernel": {"lengthscale": 5.0, "variance": 1.0, "variance_fixed": False},
            "orbit": {"kind": "affine", "phi_init": 0.02,
                      "components": ["angle"], "angle_param": "direct"},
            "inducing": 100,
            "elbo_mode": "closed_gaussian",
        },
        "counts": {"s_o": 30, "s_g": 1, "s_a": 1, "batch": 64, "s_o_eval": 30},
        "schedule": {
            "phases": [{"groups": ["gp_variational", "gp_hyper", "orbit"],
                        "steps": 400, "lr": 0.003, "lr_decay": "steps"}],
            "cycles": 1,
        },
    },
    # Rotated digits, deep kernel, Gaussian likelihood fixed at 0.05,
    # lr 3e-3 with step decay for the GP phase and cyclic decay for the
    # network phase.
    "rotmnist-gaussian-M8": {
        "dataset": {"name": "rotdigits", "n_train": 1000, "n_test": 500},
        "model": {
            "type": "deep",
            "likelihood": "gaussian",
            "lik_variance": 0.05,
            "lik_variance_fixed": True,
            "kernel": {"lengthscale": 50.0, "variance": 1.0, "variance_fixed": False},
            "orbit": {"kind": "affine", "phi_init": 0.02,
                      "components": ["angle"], "angle_param": "direct"},
            "inducing": 100,
            "elbo_mode": "closed_gaussian",
            "extractor": {"arch": "table_conv", "scale": 0.2, "feature_dim": 20},
        },
        "counts": {"s_o": 30, "s_g": 1, "s_a": 1, "batch": 64, "s_o_eval": 30},
        "schedule": {
            "phases": [
                {"groups": ["gp_variational", "gp_hyper", "orbit"],
                 "steps": 250, "lr": 0.003, "lr_decay": "steps"},
                {"groups": ["nn_weights"],
                 "steps": 150, "lr": 0.003, "lr_decay": "cyclic"},
            ],
            "cycles": 2,
        },
        "pretrain": {"epochs": 3, "batch": 64, "lr": 0.001},
    },
    # Same data with a Softmax likelihood trained through the sample bound.
    "rotmnist-softmax-M9": {
        "dataset": {"name": "rotdigits", "n_train": 1000, "n_test": 500},
        "model": {
            "type": "deep",
            "likelihood": "softmax",
            "kernel": {"lengthscale": 50.0, "variance": 1.0, "variance_fixed": False},
            "orbit": {"kind": "affine", "phi_init": 0.02,
                      "components": ["angle"], "angle_param": "direct"},
            "inducing": 100,
            "elbo_mode": "sample_bound",
            "extractor": {"arch": "table_conv", "scale": 0.2, "feature_dim": 20},
        },
        "counts": {"s_o": 10, "s_g": 2, "s_a": 2, "batch": 32, "s_o_eval": 30},
        "schedule": {
            "phases": [
                {"groups": ["gp_variational", "gp_hyper", "orbit"],
                 "steps": 250, "lr": 0.003, "lr_decay": "steps"},
                {"groups": ["nn_weights"],
                 "steps": 150, "lr": 0.003, "lr_decay": "cyclic"},
            ],
            "cycles": 2,
        },
        "pretrain": {"epochs": 3, "batch": 64, "lr": 0.001},
    },
    # Probe sweep: extractors pretrained with augmentation at several
    # transformation levels, then a collapsed sparse regression fit per
    # evaluation level with the shared-draw sum kernel.
    "probe-cifar-desk": {
        "dataset": {"name": "digits16", "n_train": 600, "n_test": 400},
        "model": {
            "type": "deep",
            "likelihood": "gaussian",
            "lik_variance": 0.01,
            "lik_variance_fixed": True,
            "kernel": {"lengthscale": 5.0, "variance": 1.0, "variance_fixed": False},
            "orbit": {"kind": "level", "level": 0.01},
            "inducing": 100,
            "elbo_mode": "closed_gaussian",
            "extractor": {"arch": "table_conv", "scale": 0.2, "feature_dim": 20},
        },
        "counts": {"s_o": 10, "s_g": 1, "s_a": 1, "batch": 64, "s_o_eval": 10},
        "schedule": {"phases": [{"groups": ["gp_variational"], "steps": 1,
                                 "lr": 0.003, "lr_decay": "none"}], "cycles": 1},
        "pretrain": {"epochs": 4, "batch": 64, "lr": 0.001},
        "probe": {"levels": [0.01, 0.1, 0.2, 0.3],
                  "pretrain_levels": [0.01, "adapted"],
                  "orbit_samples": 10, "inducing": 100},
    },
}

_PAPER_SCALE_OVERRIDES = {
    "inducing": 1200,
    "s_o": 120,
    "n_train": None,  # full dataset
    "probe_inducing": 1000,
}

_COMPONENT_INDEX = {"angle": 0, "scale_x": 1, "scale_y": 2, "shear_x": 3,
                    "shear_y": 4, "shift_x": 5, "shift_y": 6}


def parse_config(obj, paper_scale=False):
    """Merge a raw config dict over its preset and validate it.

    Returns a fully-resolved dict; raises ConfigError naming the bad field.
    Parsing a serialized parsed config is a fixed point.
    """
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = {}
    preset = obj.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                "preset", f"unknown preset {preset!r}; options: {sorted(PRESETS)}")
        cfg = copy.deepcopy(PRESETS[preset])
    cfg = _deep_merge(cfg, {k: v for k, v in obj.items() if k != "preset"})
    cfg["preset"] = preset

    for section in ("dataset", "model", "counts", "schedule"):
        if section not in cfg or not isinstance(cfg[section], dict):
            raise ConfigError(section, "missing or not an object")

    ds = cfg["dataset"]
    if ds.get("name") not in ("sign_toy", "digits16", "rotdigits", "idx"):
        raise ConfigError("dataset.name", f"unknown dataset {ds.get('name')!r}")
    if ds["name"] == "idx":
        for key in ("images_path", "labels_path"):
            path = ds.get(key)
            if not path:
                raise ConfigError(f"dataset.{key}", "required for idx datasets")
            if not os.path.exists(path):
                raise ConfigError(f"dataset.{key}", f"file not found: {path}")

    m = cfg["model"]
    if m.get("type") not in ("shallow", "deep"):
        raise ConfigError("model.type", "must be 'shallow' or 'deep'")
    if m["type"] == "deep" and "extractor" not in m:
        raise ConfigError("model.extractor", "required when model.type is 'deep'")
    if m["type"] == "shallow" and "extractor" in m:
        raise ConfigError("model.extractor", "not allowed for shallow models")
    if m.get("likelihood") not in ("gaussian", "softmax"):
        raise ConfigError("model.likelihood", "must be 'gaussian' or 'softmax'")
    if m.get("elbo_mode", "closed_gaussian") not in ("closed_gaussian", "sample_bound"):
        raise ConfigError("model.elbo_mode", "must be 'closed_gaussian' or 'sample_bound'")
    if m["likelihood"] == "softmax" and m.get("elbo_mode") != "sample_bound":
        raise ConfigError("model.elbo_mode",
                          "softmax likelihoods require the sample_bound mode")
    if int(m.get("inducing", 0)) < 1:
        raise ConfigError("model.inducing", "must be >= 1")
    orbit = m.get("orbit", {"kind": "none"})
    if orbit.get("kind") not in ("none", "affine", "sign_flip", "level"):
        raise ConfigError("model.orbit.kind", f"unknown kind {orbit.get('kind')!r}")
    if orbit.get("kind") == "affine":
        comps = orbit.get("components", list(_COMPONENT_INDEX))
        bad = [c for c in comps if c not in _COMPONENT_INDEX]
        if bad:
            raise ConfigError("model.orbit.components", f"unknown components {bad}")
        if orbit.get("angle_param", "direct") not in ("direct", "reciprocal"):
            raise ConfigError("model.orbit.angle_param",
                              "must be 'direct' or 'reciprocal'")
    m["orbit"] = orbit

    for key in ("s_o", "s_g", "s_a", "batch", "s_o_eval"):
        if int(cfg["counts"].get(key, 1)) < 1:
            raise ConfigError(f"counts.{key}", "must be >= 1")

    sched = cfg["schedule"]
    if not sched.get("phases"):
        raise ConfigError("schedule.phases", "at least one phase is required")
    for i, ph in enumerate(sched["phases"]):
        if not ph.get("groups"):
            raise ConfigError(f"schedule.phases[{i}].groups", "must be non-empty")
        if int(ph.get("steps", 0)) < 1:
            raise ConfigError(f"schedule.phases[{i}].steps", "must be >= 1")

    if "probe" in cfg:
        pr = cfg["probe"]
        levels = pr.get("levels")
        if not levels:
            raise ConfigError("probe.levels", "must be a non-empty list")
        if any(float(v) < 0 for v in levels):
            raise ConfigError("probe.levels", "levels must be >= 0")
        pr.setdefault("orbit_samples", 10)
        pr.setdefault("inducing", 100)
        pr.setdefault("pretrain_levels", [min(float(v) for v in levels), "adapted"])

    cfg.setdefault("seed", 0)
    if paper_scale:
        m["inducing"] = _PAPER_SCALE_OVERRIDES["inducing"]
        cfg["counts"]["s_o"] = _PAPER_SCALE_OVERRIDES["s_o"]
        ds.pop("n_train", None)
        if "probe" in cfg:
            cfg["probe"]["inducing"] = _PAPER_SCALE_OVERRIDES["probe_inducing"]
    return cfg


def _deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def serialize_config(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# experiment assembly


def load_dataset(cfg, seed):
    ds = cfg["dataset"]
    name = ds["name"]
    if name == "sign_toy":
        return dt.make_sign_symmetric_toy(
            n_train=int(ds.get("n_train", 12)), n_test=int(ds.get("n_test", 50)),
            seed=seed)
    if name == "idx":
        full = dt.load_idx(ds["images_path"], ds["labels_path"])
    else:
        full = dt.load_digits16()
    if name == "rotdigits":
        full = dt.make_rotated(full, seed=substream(seed, "data", "rotate")
                               .integers(2**31))
    rng = np.random.default_rng(substream(seed, "data", "split").integers(2**31))
    idx = rng.permutation(len(full.inputs))
    n_test = int(ds.get("n_test", 500))
    n_train = ds.get("n_train")
    test_idx, train_pool = idx[:n_test], idx[n_test:]
    test = dt.Dataset(full.inputs[test_idx], full.targets[test_idx],
                      name=full.name, split="test", seed=seed,
                      n_classes=full.n_classes)
    pool = dt.Dataset(full.inputs[train_pool], full.targets[train_pool],
                      name=full.name, split="train", seed=seed,
                      n_classes=full.n_classes)
    if n_train is not None and int(n_train) < len(pool.inputs):
        pool = dt.stratified_subset(pool, int(n_train), seed=seed)
    return pool, test


def build_orbit(morbit, seed=0):
    kind = morbit.get("kind", "none")
    if kind == "none":
        return None
    if kind == "sign_flip":
        return tf.SignFlipOrbit()
    if kind == "level":
        return tf.level_orbit(float(morbit.get("level", 0.01)))
    comps = morbit.get("components", list(_COMPONENT_INDEX))
    init = float(morbit.get("phi_init", 0.02))
    mask = np.zeros(7, dtype=bool)
    for c in comps:
        mask[_COMPONENT_INDEX[c]] = True
    span = np.where(mask, init, 0.0)
    return tf.OrbitDistribution(tf.NEUTRAL - span, tf.NEUTRAL + span,
                                active_mask=mask,
                                angle_param=morbit.get("angle_param", "direct"))


def build_model(cfg, train: dt.Dataset, seed):
    m = cfg["model"]
    counts = cfg["counts"]
    x = np.asarray(train.inputs, dtype=np.float64)
    classification = train.n_classes is not None
    n_out = train.n_classes if classification else (
        train.targets.shape[1] if train.targets.ndim > 1 else 1)

    extractor = None
    if m["type"] == "deep":
        ext_cfg = m["extractor"]
        if ext_cfg.get("arch", "table_conv") != "table_conv":
            raise ConfigError("model.extractor.arch", "only 'table_conv' is known")
        extractor = ft.FeatureExtractor(
            tuple(x.shape[1:]),
            ft.table_mnist_architecture(tuple(x.shape[1:]),
                                        scale=float(ext_cfg.get("scale", 0.2)),
                                        feature_dim=ext_cfg.get("feature_dim")),
            head_classes=n_out if classification else None,
            seed=int(substream(seed, "init", "nn").integers(2**31)))
        feat_dim = extractor.output_dim
    else:
        feat_dim = int(np.prod(x.shape[1:]))

    orbit = build_orbit(m["orbit"], seed)
    spec = kr.KernelSpec(
        feat_dim,
        lengthscales=float(m["kernel"].get("lengthscale", 1.0)),
        variance=float(m["kernel"].get("variance", 1.0)),
        variance_fixed=bool(m["kernel"].get("variance_fixed", False)),
        feature_map=extractor, orbit=orbit, s_o=int(counts.get("s_o", 1)))

    n_ind = min(int(m["inducing"]), x.shape[0])
    if extractor is None:
        flat = x.reshape(x.shape[0], -1)
        z0, _ = tr.greedy_variance_init(flat, spec, n_ind)
    else:
        tape = ng.Tape()
        feats = extractor.forward(tape, x[: min(1024, x.shape[0])]).value
        z0, _ = tr.greedy_variance_init(feats, spec, n_ind)
    inducing = gp.InducingState(z0, n_out if classification else n_out)
    gp.init_qu_at_prior(inducing, spec)

    if m["likelihood"] == "gaussian":
        lik = gp.GaussianLikelihood(float(m.get("lik_variance", 0.01)),
                                    fixed=bool(m.get("lik_variance_fixed", False)))
    else:
        lik = gp.SoftmaxLikelihood(n_out)
    return mdl.InvariantGPModel(
        spec, inducing, lik, elbo_mode=m.get("elbo_mode", "closed_gaussian"),
        s_g=int(counts.get("s_g", 1)), s_a=int(counts.get("s_a", 1)),
        classification=classification), extractor


def build_schedule(cfg):
    sc = cfg["schedule"]
    phases = [tr.Phase(tuple(ph["groups"]), int(ph["steps"]), float(ph["lr"]),
                       lr_decay=ph.get("lr_decay", "none"))
              for ph in sc["phases"]]
    return tr.TrainSchedule(phases, cycles=int(sc.get("cycles", 1)),
                            toggle_rule=sc.get("toggle_rule", "fixed_steps"),
                            patience=int(sc.get("patience", 5)),
                            eval_every=int(sc.get("eval_every", 200)))


def training_targets(train: dt.Dataset, model):
    if not model.classification:
        y = train.targets
        return y.reshape(-1, 1) if y.ndim == 1 else y
    labels = np.asarray(train.targets).reshape(-1).astype(int)
    if model.likelihood.kind == "softmax":
        return labels
    return np.eye(train.n_classes)[labels]


# ---------------------------------------------------------------------------
# output plumbing


class RunDir:
    """Output directory with an exclusive lockfile and standard artifacts."""

    def __init__(self, path):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.lock = os.path.join(path, ".lock")
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output dir {path} is locked by another writer ({self.lock})")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.lock)
        except FileNotFoundError:
            pass

    def file(self, name):
        return os.path.join(self.path, name)

    def write_json(self, name, obj):
        with open(self.file(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def metrics_writer(self):
        return open(self.file("metrics.ndjson"), "w")

    def write_csv(self, name, header, rows):
        with open(self.file(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            w.writerows(rows)


def _jsonable(rec):
    out = {}
    for k, v in rec.items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            out[k] = v.item()
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(cfg, out_dir, seed):
    if cfg["model"]["type"] != "deep":
        raise ConfigError("model.type", "pretrain requires a deep model")
    train, _ = load_dataset(cfg, seed)
    model, extractor = build_model(cfg, train, seed)
    pt = cfg.get("pretrain", {})
    rng = np.random.default_rng(substream(seed, "pretrain").integers(2**31))
    labels = np.asarray(train.targets).reshape(-1).astype(int)
    with RunDir(out_dir) as run:
        with run.metrics_writer() as mw:
            def hook(rec):
                mw.write(json.dumps(_jsonable(rec)) + "\n")
            ft.pretrain(extractor, train.inputs, labels,
                        epochs=int(pt.get("epochs", 3)),
                        batch_size=int(pt.get("batch", 64)),
                        lr=float(pt.get("lr", 0.001)), rng=rng,
                        metrics_hook=hook)
        mdl.save_checkpoint(run.file("checkpoint.bin"), extractor.all_params(),
                            step=0, rng_state={"seed": seed},
                            extra={"kind": "extractor"})
        run.write_json("manifest.json", {
            "command": "pretrain", "seed": seed, "config": cfg,
            "dataset": train.manifest()})
    return 0


def cmd_train(cfg, out_dir, seed, pretrained=None):
    train, test = load_dataset(cfg, seed)
    model, extractor = build_model(cfg, train, seed)
    if extractor is not None and pretrained:
        _, values = mdl.load_checkpoint(pretrained)
        mdl.restore_params(extractor.params(), values, strict=False)
    schedule = build_schedule(cfg)
    y = training_targets(train, model)
    val = None
    if schedule.toggle_rule == "validation_plateau":
        tr_ds, val_ds = dt.train_val_split(train, seed=seed)
        train, y = tr_ds, training_targets(tr_ds, model)
        val = (val_ds.inputs, np.asarray(val_ds.targets).reshape(-1).astype(int))
    with RunDir(out_dir) as run:
        with run.metrics_writer() as mw:
            def hook(rec):
                mw.write(json.dumps(_jsonable(rec)) + "\n")
            tr.coordinate_ascent(model, schedule, train.inputs, y,
                                 n_total=len(train.inputs), seed=seed,
                                 val_data=val, metrics_hook=hook,
                                 batch_size=int(cfg["counts"].get("batch", 64)))
        mdl.save_checkpoint(run.file("checkpoint.bin"), model.params(),
                            step=schedule.total_steps(),
                            rng_state={"seed": seed}, extra={"kind": "model"})
        metrics = _evaluate(model, test, cfg)
        run.write_json("manifest.json", {
            "command": "train", "seed": seed, "config": cfg,
            "dataset": train.manifest(), "final": metrics})
    print(json.dumps(metrics))
    return 0


def _evaluate(model, test, cfg):
    s_o_eval = int(cfg["counts"].get("s_o_eval", cfg["counts"].get("s_o", 1)))
    if model.classification:
        labels = np.asarray(test.targets).reshape(-1).astype(int)
        y = labels if model.likelihood.kind == "softmax" else np.eye(
            test.n_classes)[labels]
        return model.evaluate(test.inputs, y, labels=labels, s_o_eval=s_o_eval)
    y = test.targets.reshape(-1, 1) if test.targets.ndim == 1 else test.targets
    return model.evaluate(test.inputs, y, s_o_eval=s_o_eval)


def cmd_eval(cfg, out_dir, seed, checkpoint):
    train, test = load_dataset(cfg, seed)
    model, _ = build_model(cfg, train, seed)
    _, values = mdl.load_checkpoint(checkpoint)
    mdl.restore_params(model.params(), values)
    metrics = _evaluate(model, test, cfg)
    with RunDir(out_dir) as run:
        run.write_json("manifest.json", {
            "command": "eval", "seed": seed, "config": cfg,
            "checkpoint": checkpoint, "metrics": metrics})
    print(json.dumps(metrics))
    return 0


def cmd_probe(cfg, out_dir, seed):
    """Sweep (pretraining level, evaluation level) and fit a collapsed
    sparse regression with shared-draw averaged features at each cell."""
    if "probe" not in cfg:
        raise ConfigError("probe", "missing probe section")
    pr = cfg["probe"]
    levels = [float(v) for v in pr["levels"]]
    train, test = load_dataset(cfg, seed)
    labels_tr = np.asarray(train.targets).reshape(-1).astype(int)
    labels_te = np.asarray(test.targets).reshape(-1).astype(int)
    y_tr = np.eye(train.n_classes)[labels_tr]

    pt = cfg.get("pretrain", {})
    pretrain_levels = []
    for lv in pr["pretrain_levels"]:
        pretrain_levels.append("adapted" if lv == "adapted" else float(lv))

    extractors = {}

    def extractor_at(level):
        if level not in extractors:
            extractors[level] = _pretrain_at_level(
                cfg, train, labels_tr, level, pt, seed)
        return extractors[level]

    rows = []
    for plv in pretrain_levels:
        for nu in levels:
            ext = extractor_at(nu if plv == "adapted" else plv)
            acc = _probe_cell(ext, train.inputs, y_tr, test.inputs, labels_te,
                              nu, int(pr["orbit_samples"]),
                              int(pr["inducing"]),
                              float(cfg["model"].get("lik_variance", 0.01)),
                              cfg["model"]["kernel"], seed)
            rows.append([plv, nu, acc])
    with RunDir(out_dir) as run:
        run.write_csv("probe.csv", ["pretrain_level", "eval_nu", "accuracy"],
                      rows)
        run.write_json("manifest.json", {
            "command": "probe", "seed": seed, "config": cfg})
    for r in rows:
        print(f"{r[0]},{r[1]},{r[2]:.4f}")
    return 0


def _pretrain_at_level(cfg, train, labels, level, pt, seed):
    """Train an extractor on inputs augmented at one transformation level."""
    ext_cfg = cfg["model"]["extractor"]
    shape = tuple(np.asarray(train.inputs).shape[1:])
    ext = ft.FeatureExtractor(
        shape, ft.table_mnist_architecture(
            shape, scale=float(ext_cfg.get("scale", 0.2)),
            feature_dim=ext_cfg.get("feature_dim")),
        head_classes=train.n_classes,
        seed=int(substream(seed, "init", "nn", f"{level}").integers(2**31)))
    rng = np.random.default_rng(
        substream(seed, "probe", "pretrain", f"{level}").integers(2**31))
    x = np.asarray(train.inputs, dtype=np.float64)
    if level > 0:
        orbit = tf.level_orbit(level, trainable=False)
        tape = ng.Tape()
        warped, _ = orbit.transformed(tape, x, 1, rng=rng)
        x = warped.value.reshape(x.shape)
    ft.pretrain(ext, x, labels, epochs=int(pt.get("epochs", 3)),
                batch_size=int(pt.get("batch", 64)),
                lr=float(pt.get("lr", 0.001)), rng=rng)
    return ext


def _probe_cell(ext, x_tr, y_tr, x_te, labels_te, nu, s_o, n_ind, noise_var,
                kernel_cfg, seed):
    """Accuracy of the collapsed sparse regression at one (extractor, nu)."""
    rng = np.random.default_rng(
        substream(seed, "probe", "cell", f"{nu}").integers(2**31))
    spec = kr.KernelSpec(ext.output_dim,
                         lengthscales=float(kernel_cfg.get("lengthscale", 5.0)),
                         variance=float(kernel_cfg.get("variance", 1.0)),
                         feature_map=ext,
                         orbit=tf.level_orbit(nu, trainable=False) if nu > 0 else None,
                         s_o=s_o)

    def shared_feats(x):
        tape = ng.Tape()
        if spec.orbit is None:
            return ext.forward(tape, np.asarray(x, dtype=np.float64)).value
        f3, _ = kr.orbit_features(tape, np.asarray(x, dtype=np.float64), spec,
                                  rng=rng)
        return f3.value

    f_tr = shared_feats(x_tr)
    flat = f_tr.mean(axis=1) if f_tr.ndim == 3 else f_tr
    z0, _ = tr.greedy_variance_init(flat, spec, min(n_ind, len(flat)))
    tape = ng.Tape()
    bound = gp.sgpr_bound(tape, f_tr, y_tr, spec, z0, noise_var)
    f_te = shared_feats(x_te)
    mean = gp.sgpr_predict_mean(bound, spec, f_te)
    return float((mean.argmax(axis=1) == labels_te).mean())


def cmd_plot(metrics_files, out_dir, max_points=2000):
    """Flatten metric streams into one tidy long-format CSV.

    One row per (run, step, series, value); per-orbit-range components become
    separate series. Series longer than ``max_points`` are downsampled with
    both endpoints preserved.
    """
    series = {}
    for path in metrics_files:
        run = os.path.splitext(os.path.basename(path))[0]
        if run == "metrics":
            run = os.path.basename(os.path.dirname(os.path.abspath(path)))
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(
                        f"{path}:{lineno}: malformed NDJSON line: {exc}") from exc
                step = rec.get("step", rec.get("epoch", lineno))
                for key, val in rec.items():
                    if key in ("step", "epoch", "phase", "groups", "cycle"):
                        continue
                    if isinstance(val, list):
                        for i, comp in enumerate(val):
                            series.setdefault((run, f"{key}.{i}"), []).append(
                                (step, float(comp)))
                    elif isinstance(val, (int, float)) and not isinstance(val, bool):
                        series.setdefault((run, key), []).append(
                            (step, float(val)))
    rows = []
    for (run, name), pts in sorted(series.items()):
        for step, val in downsample(pts, max_points):
            rows.append([run, step, name, val])
    with RunDir(out_dir) as run_dir:
        run_dir.write_csv("series.csv", ["run", "step", "series", "value"],
                          rows)
    print(f"wrote {len(rows)} rows across {len(series)} series")
    return 0


def downsample(points, max_points):
    """Thin a (step, value) list to at most max_points, keeping endpoints."""
    if len(points) <= max_points:
        return points
    idx = np.linspace(0, len(points) - 1, max_points).round().astype(int)
    idx[0], idx[-1] = 0, len(points) - 1
    return [points[i] for i in sorted(set(idx.tolist()))]


# ---------------------------------------------------------------------------
# entry point


def _apply_thread_cap():
    cap = os.environ.get("INVGP_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(cap))
    except ImportError:
        pass


def main(argv=None):
    _apply_thread_cap()
    parser = argparse.ArgumentParser(
        prog="invgp", description="invariance-learning GP experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "train", "eval", "probe"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--paper-scale", action="store_true")
        if name == "train":
            p.add_argument("--pretrained", default=None,
                           help="extractor checkpoint for deep models")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("plot")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True)
    args = parser.parse_args(argv)

    try:
        if args.command == "plot":
            return cmd_plot(args.metrics, args.out)
        with open(args.config) as fh:
            raw = json.load(fh)
        cfg = parse_config(raw, paper_scale=args.paper_scale)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        cfg["seed"] = seed
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.out, seed)
        if args.command == "train":
            return cmd_train(cfg, args.out, seed, pretrained=args.pretrained)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, seed, args.checkpoint)
        if args.command == "probe":
            return cmd_probe(cfg, args.out, seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
