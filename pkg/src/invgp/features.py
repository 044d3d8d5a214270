"""Small convolutional / dense feature extractors on the gradient tape.

Architectures are lists of layer configs, e.g.::

    [{"type": "conv", "filters": 20, "kernel": 5, "padding": "same"},
     {"type": "maxpool", "size": 2, "stride": 2},
     {"type": "dense", "units": 50, "activation": "relu"},
     {"type": "dropout", "rate": 0.5}]

Convolutions run as im2col gathers plus one matmul, so the whole forward
pass stays inside the closed primitive set and is differentiable in the
weights. A temporary softmax head (``head_classes``) is appended in
pretraining mode only.
"""

from __future__ import annotations

import numpy as np

from . import ndgrad as ng


def _activation(node, kind):
    if kind in (None, "none", "linear"):
        return node
    if kind == "relu":
        return ng.relu(node)
    raise ValueError(f"unknown activation {kind!r}")


class FeatureExtractor:
    """Feed-forward net h_w mapping inputs to D-dimensional features."""

    def __init__(self, input_shape, layers, head_classes=None, seed=0, name="nn"):
        self.input_shape = tuple(input_shape)
        self.layers = [dict(cfg) for cfg in layers]
        self.head_classes = head_classes
        self.name = name
        self._params: list[ng.Param] = []
        self._head_params: list[ng.Param] = []
        self._build(seed)

    def _add_param(self, pid, value, head=False):
        p = ng.Param(f"{self.name}.{pid}", value, "nn_weights")
        (self._head_params if head else self._params).append(p)
        return p

    def _build(self, seed):
        rng = np.random.default_rng(seed)
        shape = self.input_shape  # (H,W,C) or (D,)
        for i, cfg in enumerate(self.layers):
            kind = cfg["type"]
            if kind == "conv":
                if len(shape) != 3:
                    raise ValueError("conv layer needs (H,W,C) input")
                h, w, c = shape
                k = cfg["kernel"]
                f = cfg["filters"]
                fan_in = k * k * c
                wgt = rng.standard_normal((fan_in, f)) * np.sqrt(2.0 / fan_in)
                cfg["_w"] = self._add_param(f"conv{i}.w", wgt)
                cfg["_b"] = self._add_param(f"conv{i}.b", 0.01 * rng.standard_normal(f))
                pad = k // 2 if cfg.get("padding", "same") == "same" else 0
                cfg["_pad"] = pad
                ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
                cfg["_in_shape"] = shape
                cfg["_idx"] = _im2col_indices(h + 2 * pad, w + 2 * pad, c, k, ho, wo)
                shape = (ho, wo, f)
            elif kind == "maxpool":
                h, w, c = shape
                s = cfg.get("size", 2)
                shape = (h // s, w // s, c)
                cfg["_in_shape"] = (h, w, c)
            elif kind == "dense":
                d_in = int(np.prod(shape))
                units = cfg["units"]
                wgt = rng.standard_normal((d_in, units)) * np.sqrt(2.0 / d_in)
                cfg["_w"] = self._add_param(f"dense{i}.w", wgt)
                cfg["_b"] = self._add_param(f"dense{i}.b", 0.01 * rng.standard_normal(units))
                shape = (units,)
            elif kind == "dropout":
                cfg["_rate"] = float(cfg["rate"])
            else:
                raise ValueError(f"unknown layer type {kind!r}")
        self.output_dim = int(np.prod(shape))
        if self.head_classes is not None:
            wgt = rng.standard_normal((self.output_dim, self.head_classes)) * np.sqrt(
                2.0 / self.output_dim)
            self._head_w = self._add_param("head.w", wgt, head=True)
            self._head_b = self._add_param("head.b", np.zeros(self.head_classes), head=True)

    def params(self):
        """Feature-map weights only; the pretraining head is excluded."""
        return list(self._params)

    def head_params(self):
        return list(self._head_params)

    def all_params(self):
        return self._params + self._head_params

    def forward(self, tape, x, mode="feature", rng=None):
        """Run the net. ``mode="feature"`` is deterministic and returns (N,D)
        features; ``mode="pretrain"`` applies dropout and the softmax head,
        returning (N, head_classes) logits."""
        if mode not in ("feature", "pretrain"):
            raise ValueError(f"unknown mode {mode!r}")
        if isinstance(x, np.ndarray):
            x = tape.constant(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        if len(self.input_shape) == 3 and x.ndim == 2:
            x = x.reshape((n,) + self.input_shape)
        elif x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != {self.input_shape}")
        for cfg in self.layers:
            kind = cfg["type"]
            if kind == "conv":
                x = self._conv(tape, x, cfg)
                x = _activation(x, cfg.get("activation", "relu"))
            elif kind == "maxpool":
                x = self._maxpool(x, cfg)
            elif kind == "dense":
                x = x.reshape((n, -1))
                x = x @ tape.leaf(cfg["_w"]) + tape.leaf(cfg["_b"])
                x = _activation(x, cfg.get("activation", "relu"))
            elif kind == "dropout":
                if mode == "pretrain":
                    if rng is None:
                        raise ValueError("dropout in pretrain mode needs an rng")
                    rate = cfg["_rate"]
                    mask = (rng.uniform(size=x.shape) >= rate) / (1.0 - rate)
                    x = x * tape.constant(mask)
        x = x.reshape((n, -1))
        if mode == "pretrain":
            if self.head_classes is None:
                raise ValueError("pretrain mode requires head_classes")
            x = x @ tape.leaf(self._head_w) + tape.leaf(self._head_b)
        return x

    def _conv(self, tape, x, cfg):
        pad = cfg["_pad"]
        if pad:
            x = ng.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        return ng.conv2d(x, tape.leaf(cfg["_w"]), tape.leaf(cfg["_b"]),
                         cfg["kernel"])

    def _maxpool(self, x, cfg):
        s = cfg.get("size", 2)
        n = x.shape[0]
        h, w, c = x.shape[1:]
        ho, wo = h // s, w // s
        if h % s or w % s:
            x = x[:, : ho * s, : wo * s, :]
        x = x.reshape((n, ho, s, wo, s, c))
        return ng.max_(x, axis=(2, 4))


def _im2col_indices(hp, wp, c, k, ho, wo):
    """Flat gather indices into a padded (hp,wp,c) image: (ho*wo, k*k*c)."""
    idx = np.arange(hp * wp * c).reshape(hp, wp, c)
    patches = np.empty((ho * wo, k * k * c), dtype=np.int64)
    pos = 0
    for i in range(ho):
        for j in range(wo):
            patches[pos] = idx[i : i + k, j : j + k, :].ravel()
            pos += 1
    return patches


def log_softmax(logits):
    return logits - ng.logsumexp(logits, axis=1, keepdims=True)


def nll_loss(tape, extractor, x, labels, rng=None):
    """Mean categorical negative log-likelihood with the pretraining head."""
    logits = extractor.forward(tape, x, mode="pretrain", rng=rng)
    logp = log_softmax(logits)
    n = logits.shape[0]
    picked = ng.getitem(logp, (np.arange(n), np.asarray(labels, dtype=np.int64)))
    return -ng.mean(picked)


def pretrain(extractor, inputs, labels, epochs, batch_size, lr, rng,
             metrics_hook=None):
    """Adam minimization of the categorical NLL; returns per-epoch losses.

    Aborts with the last finite parameter state if the loss goes non-finite.
    """
    from .training import AdamState, adam_step

    params = extractor.all_params()
    adam = AdamState(params)
    n = inputs.shape[0]
    losses = []
    snapshot = {p.id: p.value.copy() for p in params}
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        nb = 0
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            tape = ng.Tape()
            loss = nll_loss(tape, extractor, inputs[sel], labels[sel], rng=rng)
            value = float(loss.value)
            if not np.isfinite(value):
                for p in params:
                    p.value[...] = snapshot[p.id]
                raise FloatingPointError(
                    f"pretraining diverged at epoch {epoch}; restored last finite state")
            grads = ng.backward(loss, params=params)
            adam_step(adam, params, grads, lr)
            tape.release()
            epoch_loss += value
            nb += 1
        snapshot = {p.id: p.value.copy() for p in params}
        losses.append(epoch_loss / max(nb, 1))
        if metrics_hook is not None:
            metrics_hook({"epoch": epoch, "nll": losses[-1]})
    return losses


def table_mnist_architecture(input_shape, scale=1.0, feature_dim=None):
    """The small conv net used for digit experiments, optionally scaled down.

    Full scale: conv(20,5)-pool-conv(50,5)-pool-dense(500)-dense(50).
    """
    f1 = max(2, int(round(20 * scale)))
    f2 = max(2, int(round(50 * scale)))
    d1 = max(8, int(round(500 * scale)))
    d2 = feature_dim if feature_dim is not None else max(4, int(round(50 * scale)))
    return [
        {"type": "conv", "filters": f1, "kernel": 5, "padding": "same", "activation": "relu"},
        {"type": "maxpool", "size": 2, "stride": 2},
        {"type": "conv", "filters": f2, "kernel": 5, "padding": "same", "activation": "relu"},
        {"type": "maxpool", "size": 2, "stride": 2},
        {"type": "dense", "units": d1, "activation": "relu"},
        {"type": "dense", "units": d2, "activation": "relu"},
    ]
