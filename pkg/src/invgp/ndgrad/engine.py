"""Reverse-mode gradient engine over dense float64 numpy arrays.

A ``Tape`` records primitive operations as they execute; ``backward`` replays
the record in reverse to accumulate gradients of a scalar loss into every
registered parameter. The primitive set is closed: matmul, triangular solve,
Cholesky, elementwise (exp, log, sqr, sqrt, neg, add, mul, div, sin, cos,
clamp), reductions (sum, mean, max, logsumexp), broadcasting add/mul, take,
pad, reshape/transpose/concat/getitem. Everything else in the library is
composed from these.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "Tape",
    "Node",
    "Param",
    "NumericsError",
    "CholeskyError",
    "backward",
]


class NumericsError(RuntimeError):
    """NaN/Inf encountered during the reverse sweep. Carries the node name."""

    def __init__(self, message, node_name=None):
        super().__init__(message)
        self.node_name = node_name


class CholeskyError(RuntimeError):
    """Cholesky failed even at the jitter cap."""


PARAM_GROUPS = ("gp_variational", "gp_hyper", "orbit", "nn_weights", "likelihood")


class Param:
    """A named, trainable tensor belonging to one optimizer group."""

    def __init__(self, id: str, value, group: str, trainable: bool = True):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown param group {group!r}")
        self.id = id
        self.value = np.asarray(value, dtype=np.float64)
        self.group = group
        self.trainable = trainable

    def __repr__(self):
        return f"Param({self.id!r}, shape={self.value.shape}, group={self.group})"


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of primitive nodes; single-writer per evaluation."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}

    def _register(self, node):
        node.idx = len(self.nodes)
        self.nodes.append(node)
        return node

    def release(self):
        """Drop recorded nodes and break their reference cycles.

        Nodes, their parent tuples, and their vjp closures form cycles with
        the tape, so the intermediate arrays of a whole evaluation otherwise
        stay alive until the generational collector gets around to them —
        for image-batch losses that is hundreds of megabytes per step.
        """
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes.clear()
        self._param_nodes.clear()

    def leaf(self, param: Param) -> "Node":
        """Register a Param as a leaf; repeated calls return the same node."""
        existing = self._param_nodes.get(id(param))
        if existing is not None:
            return existing
        node = Node(self, param.value, (), None, name=f"param:{param.id}")
        node.param = param
        self._param_nodes[id(param)] = node
        return node

    def constant(self, value) -> "Node":
        return Node(self, _as_array(value), (), None, name="const")

    def apply(self, value, parents, vjp, name="custom") -> "Node":
        """Create a node for a primitive computed outside this module.

        ``vjp(g)`` must return one gradient array per parent (or None).
        """
        return Node(self, value, tuple(parents), vjp, name=name)


class Node:
    """One recorded primitive: its value, parents, and a vector-Jacobian hook."""

    __slots__ = ("tape", "value", "parents", "vjp", "name", "idx", "param", "info")

    def __init__(self, tape, value, parents, vjp, name):
        self.tape = tape
        self.value = _as_array(value)
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.param = None
        self.info = {}
        tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, np.integer)) or exponent < 1:
            raise TypeError("only positive integer powers are supported")
        out = self
        for _ in range(int(exponent) - 1):
            out = mul(out, self)
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Node({self.name}, shape={self.value.shape})"


def _lift(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return like.tape.constant(x)


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and broadcasting primitives


def add(a, b):
    a = a if isinstance(a, Node) else _lift(a, b)
    b = _lift(b, a)
    va, vb = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)

    return Node(a.tape, va + vb, (a, b), vjp, "add")


def sub(a, b):
    a = a if isinstance(a, Node) else _lift(a, b)
    b = _lift(b, a)
    va, vb = a.value, b.value

    def vjp(g):
        return _unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)

    return Node(a.tape, va - vb, (a, b), vjp, "sub")


def mul(a, b):
    a = a if isinstance(a, Node) else _lift(a, b)
    b = _lift(b, a)
    va, vb = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)

    return Node(a.tape, va * vb, (a, b), vjp, "mul")


def div(a, b):
    a = a if isinstance(a, Node) else _lift(a, b)
    b = _lift(b, a)
    va, vb = a.value, b.value

    def vjp(g):
        return (
            _unbroadcast(g / vb, va.shape),
            _unbroadcast(-g * va / (vb * vb), vb.shape),
        )

    return Node(a.tape, va / vb, (a, b), vjp, "div")


def neg(a):
    return Node(a.tape, -a.value, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.value)
    return Node(a.tape, out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return Node(a.tape, np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a):
    out = np.sqrt(a.value)
    return Node(a.tape, out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def square(a):
    return Node(a.tape, a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "sqr")


def sin(a):
    return Node(a.tape, np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),), "sin")


def cos(a):
    return Node(a.tape, np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),), "cos")


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is zero outside the active range."""
    out = np.clip(a.value, lo, hi)
    mask = np.ones_like(a.value)
    if lo is not None:
        mask = mask * (a.value >= lo)
    if hi is not None:
        mask = mask * (a.value <= hi)

    def vjp(g):
        return (g * mask,)

    return Node(a.tape, out, (a,), vjp, "clamp")


def relu(a):
    return clamp(a, lo=0.0)


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Node(a.tape, out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.value.shape[i] for i in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis=None, keepdims=False):
    out = a.value.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g_e = np.expand_dims(g, axis)
            out_e = np.expand_dims(out, axis)
        else:
            g_e, out_e = g, out
        mask = (a.value == out_e).astype(np.float64)
        # split gradient between ties so it stays a valid subgradient
        mask /= mask.sum(axis=axis, keepdims=True)
        return (mask * g_e,)

    return Node(a.tape, out, (a,), vjp, "max")


def logsumexp(a, axis=None, keepdims=False):
    m = a.value.max(axis=axis, keepdims=True)
    shifted = sub(a, a.tape.constant(m))
    s = log(sum_(exp(shifted), axis=axis, keepdims=True))
    out = add(s, a.tape.constant(m))
    if not keepdims and axis is not None:
        out = reshape(out, np.squeeze(out.value, axis=axis).shape)
    elif not keepdims:
        out = reshape(out, ())
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    old = a.value.shape
    return Node(
        a.tape, a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape"
    )


def transpose(a, axes=None):
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return Node(a.tape, np.transpose(a.value, axes), (a,), vjp, "transpose")


def getitem(a, key):
    out = a.value[key]
    basic = all(isinstance(k, (slice, int)) for k in
                (key if isinstance(key, tuple) else (key,)))

    def vjp(g):
        full = np.zeros_like(a.value)
        if basic:  # no duplicate positions, so plain assignment suffices
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return Node(a.tape, out, (a,), vjp, "getitem")


def concat(nodes, axis=0):
    tape = nodes[0].tape
    values = [n.value for n in nodes]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(nodes))
        )

    return Node(tape, np.concatenate(values, axis=axis), tuple(nodes), vjp, "concat")


def stack(nodes, axis=0):
    expanded = [reshape(n, n.value.shape[:axis] + (1,) + n.value.shape[axis:]) for n in nodes]
    return concat(expanded, axis=axis)


def scatter_add(shape0, rest_size, indices, grads):
    """Sum ``grads`` (n, rest_size) rows into a (shape0, rest_size) array.

    A bincount-based scatter; much faster than np.add.at for the large,
    repeated index sets produced by gathers.
    """
    flat = indices[:, None] * rest_size + np.arange(rest_size)[None, :]
    out = np.bincount(flat.ravel(), weights=grads.ravel(),
                      minlength=shape0 * rest_size)
    return out.reshape(shape0, rest_size)


def take(a, indices, axis=0):
    """Gather slices along ``axis`` with a fixed integer index array."""
    indices = np.asarray(indices)
    out = np.take(a.value, indices, axis=axis)

    def vjp(g):
        moved_shape = (a.value.shape[axis],) + tuple(
            s for i, s in enumerate(a.value.shape) if i != axis)
        gg = g.reshape(a.value.shape[:axis] + indices.shape + a.value.shape[axis + 1:])
        gg = np.moveaxis(
            gg,
            tuple(range(axis, axis + indices.ndim)),
            tuple(range(indices.ndim)),
        )
        gg = gg.reshape((indices.size, -1))
        rest = int(np.prod(moved_shape[1:])) if len(moved_shape) > 1 else 1
        full = scatter_add(moved_shape[0], rest, indices.ravel().astype(np.int64), gg)
        return (np.moveaxis(full.reshape(moved_shape), 0, axis),)

    return Node(a.tape, out, (a,), vjp, "take")


def conv2d(x, w, b, kernel):
    """Valid convolution of pre-padded ``x`` (N,Hp,Wp,C) with ``w`` (k*k*C,F).

    Weight rows are ordered (di, dj, c), matching an im2col expansion of the
    input; the forward and reverse sweeps loop over the k*k kernel offsets so
    the (N*L, k*k*C) column matrix is never materialized.
    """
    xv, wv = x.value, w.value
    n, hp, wp, c = xv.shape
    k = kernel
    ho, wo = hp - k + 1, wp - k + 1
    f = wv.shape[1]
    acc = np.tile(b.value, (n * ho * wo, 1))
    for di in range(k):
        for dj in range(k):
            patch = xv[:, di:di + ho, dj:dj + wo, :].reshape(-1, c)
            rows = (di * k + dj) * c
            acc += patch @ wv[rows:rows + c]
    out = acc.reshape(n, ho, wo, f)

    def vjp(g):
        gflat = g.reshape(-1, f)
        gx = np.zeros_like(xv)
        gw = np.empty_like(wv)
        for di in range(k):
            for dj in range(k):
                rows = (di * k + dj) * c
                patch = xv[:, di:di + ho, dj:dj + wo, :].reshape(-1, c)
                gw[rows:rows + c] = patch.T @ gflat
                gx[:, di:di + ho, dj:dj + wo, :] += (
                    gflat @ wv[rows:rows + c].T).reshape(n, ho, wo, c)
        return gx, gw, gflat.sum(axis=0)

    return Node(x.tape, out, (x, w, b), vjp, "conv2d")


def pad(a, pad_width):
    """Zero-pad; ``pad_width`` as for np.pad."""
    out = np.pad(a.value, pad_width)
    slices = tuple(
        slice(p[0], p[0] + s) for p, s in zip(pad_width, a.value.shape)
    )

    def vjp(g):
        return (g[slices],)

    return Node(a.tape, out, (a,), vjp, "pad")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a = a if isinstance(a, Node) else _lift(a, b)
    b = _lift(b, a)
    va, vb = a.value, b.value

    def vjp(g):
        if va.ndim == 1 and vb.ndim == 1:
            return g * vb, g * va
        if va.ndim == 1:  # (k,) @ (..., k, n)
            ga = (np.expand_dims(g, -2) @ np.swapaxes(vb, -1, -2)).squeeze(-2)
            gb = np.expand_dims(va, -1) @ np.expand_dims(g, -2)
            return _unbroadcast(ga, va.shape), _unbroadcast(gb, vb.shape)
        if vb.ndim == 1:  # (..., m, k) @ (k,)
            ga = np.expand_dims(g, -1) @ np.expand_dims(vb, -2)
            gb = np.swapaxes(va, -1, -2) @ np.expand_dims(g, -1)
            return _unbroadcast(ga, va.shape), _unbroadcast(gb.squeeze(-1), vb.shape)
        ga = g @ np.swapaxes(vb, -1, -2)
        gb = np.swapaxes(va, -1, -2) @ g
        return _unbroadcast(ga, va.shape), _unbroadcast(gb, vb.shape)

    return Node(a.tape, va @ vb, (a, b), vjp, "matmul")


def cholesky(a, jitter=0.0, max_jitter=1e-2):
    """Lower Cholesky of a symmetric matrix with x10 jitter escalation.

    The jitter actually used is recorded in ``node.info["jitter"]``. Raises
    CholeskyError if the factorization still fails at ``max_jitter``.
    """
    A = a.value
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got {A.shape}")
    L, used = _chol_with_escalation(A, jitter, max_jitter)

    def vjp(g):
        # standard Cholesky adjoint: Abar = Phi(L^T Lbar) conjugated by L^{-1}
        M = np.tril(L.T @ g)
        M = M - 0.5 * np.diag(np.diag(M))
        W = solve_triangular(L, M, lower=True, trans="T")
        Abar = solve_triangular(L, W.T, lower=True, trans="T").T
        return (0.5 * (Abar + Abar.T),)

    node = Node(a.tape, L, (a,), vjp, "cholesky")
    node.info["jitter"] = used
    return node


def _chol_with_escalation(A, jitter, max_jitter):
    n = A.shape[0]
    eye = np.eye(n)
    j = jitter
    while True:
        try:
            L = np.linalg.cholesky(A + j * eye if j > 0 else A)
            return L, j
        except np.linalg.LinAlgError:
            if j == 0:
                j = 1e-6
            else:
                j *= 10.0
            if j > max_jitter * (1 + 1e-12):
                raise CholeskyError(
                    f"Cholesky failed at jitter cap {max_jitter:g}; "
                    "kernel matrix is ill-conditioned"
                ) from None


def triangular_solve(l, b, lower=True, trans=False):
    """Solve L x = b (or L^T x = b when trans) for triangular L."""
    L, B = l.value, b.value
    tflag = "T" if trans else "N"
    X = solve_triangular(L, B, lower=lower, trans=tflag)

    def vjp(g):
        g = g.reshape(X.shape)
        gb = solve_triangular(L, g, lower=lower, trans="N" if trans else "T")
        X2 = X.reshape(X.shape[0], -1)
        gb2 = gb.reshape(gb.shape[0], -1)
        gl = -(X2 @ gb2.T) if trans else -(gb2 @ X2.T)
        tri = np.tril if lower else np.triu
        return tri(gl), gb.reshape(B.shape)

    return Node(l.tape, X, (l, b), vjp, "triangular_solve")


# ---------------------------------------------------------------------------
# reverse sweep


def backward(loss: Node, params=None, check_finite=True):
    """Gradients of a scalar loss node w.r.t. every registered Param.

    Returns a dict mapping param id to a gradient array. Params listed in
    ``params`` but untouched by the loss get zero gradients.
    """
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    if check_finite and not np.all(np.isfinite(loss.value)):
        raise NumericsError("non-finite loss value", loss.name)
    tape = loss.tape
    grads = [None] * len(tape.nodes)
    grads[loss.idx] = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.idx + 1]):
        g = grads[node.idx]
        if g is None or node.vjp is None:
            continue
        if check_finite and not np.all(np.isfinite(g)):
            raise NumericsError(
                f"non-finite gradient flowing into node {node.name!r}", node.name
            )
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if grads[parent.idx] is None:
                grads[parent.idx] = np.array(pg, dtype=np.float64, copy=True)
            else:
                grads[parent.idx] += pg
        grads[node.idx] = None  # free memory as we go

    out = {}
    for node in tape._param_nodes.values():
        g = grads[node.idx]
        out[node.param.id] = np.zeros_like(node.value) if g is None else g
    if params is not None:
        for p in params:
            if p.id not in out:
                out[p.id] = np.zeros_like(p.value)
    return out
