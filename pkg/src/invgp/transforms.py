"""Learnable augmentation distributions over affine image transforms.

An orbit distribution is a uniform density over a 7-parameter affine family
(rotation, x/y scale, x/y shear, x/y translation). Samples are drawn by the
reparameterization nu = lo + (hi - lo) * eps with eps ~ U(0,1), so warped
images stay differentiable in the range endpoints.
"""

from __future__ import annotations

import numpy as np

from . import ndgrad as ng

# component layout: (angle, scale_x, scale_y, shear_x, shear_y, trans_x, trans_y)
NEUTRAL = np.array([0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
COMPONENT_NAMES = ("angle", "scale_x", "scale_y", "shear_x", "shear_y", "trans_x", "trans_y")

# componentwise box the projection step keeps parameters inside
_LOWER = np.array([-np.pi, 0.05, 0.05, -2.0, -2.0, -1.0, -1.0])
_UPPER = np.array([np.pi, 3.0, 3.0, 2.0, 2.0, 1.0, 1.0])


class OrbitDistribution:
    """Uniform distribution over affine transforms with learnable ranges.

    ``angle_param="reciprocal"`` stores the reciprocal of the angle endpoints
    (the learnable values are xi = 1/alpha); it requires a symmetric angle
    range and is used for the parameterization-independence experiment.
    """

    def __init__(self, phi_min, phi_max, active_mask=None, angle_param="direct",
                 name="orbit", trainable=True):
        if angle_param not in ("direct", "reciprocal"):
            raise ValueError(f"unknown angle_param {angle_param!r}")
        phi_min = np.array(phi_min, dtype=np.float64)
        phi_max = np.array(phi_max, dtype=np.float64)
        if phi_min.shape != (7,) or phi_max.shape != (7,):
            raise ValueError("phi_min/phi_max must be 7-vectors")
        if active_mask is None:
            active_mask = np.ones(7, dtype=bool)
        self.active_mask = np.asarray(active_mask, dtype=bool)
        self.angle_param = angle_param
        self.phi_min = ng.Param(f"{name}.phi_min", phi_min, "orbit", trainable=trainable)
        self.phi_max = ng.Param(f"{name}.phi_max", phi_max, "orbit", trainable=trainable)
        self.project()

    # -- parameter plumbing -------------------------------------------------

    def params(self):
        return [self.phi_min, self.phi_max]

    def project(self):
        """Restore invariants in place after an optimizer step.

        Enforces phi_min <= phi_max (in effective-angle space for the
        reciprocal mode), pins inactive components to neutral, and clips to
        the componentwise box.
        """
        lo, hi = self.phi_min.value, self.phi_max.value
        inactive = ~self.active_mask
        if self.angle_param == "reciprocal":
            # stored angle slots are (-xi, xi); keep xi >= 1/pi so the
            # effective angle stays within +-pi
            xi = max(abs(hi[0]), 1.0 / np.pi)
            hi[0] = xi
            lo[0] = -xi
            rest = slice(1, None)
            np.clip(lo[rest], _LOWER[rest], _UPPER[rest], out=lo[rest])
            np.clip(hi[rest], _LOWER[rest], _UPPER[rest], out=hi[rest])
            lo[rest] = np.minimum(lo[rest], hi[rest])
        else:
            np.clip(lo, _LOWER, _UPPER, out=lo)
            np.clip(hi, _LOWER, _UPPER, out=hi)
            np.minimum(lo, hi, out=lo)
        lo[inactive] = NEUTRAL[inactive]
        hi[inactive] = NEUTRAL[inactive]

    def effective_range(self):
        """(lo, hi) endpoints in transform space, resolving the reciprocal map."""
        lo = self.phi_min.value.copy()
        hi = self.phi_max.value.copy()
        if self.angle_param == "reciprocal":
            lo[0], hi[0] = -1.0 / hi[0], 1.0 / hi[0]
        return lo, hi

    def angle_range(self) -> float:
        """Effective half-width |alpha| of the rotation range, in radians."""
        lo, hi = self.effective_range()
        return 0.5 * (hi[0] - lo[0])

    # -- sampling -----------------------------------------------------------

    def _endpoint_nodes(self, tape):
        lo = tape.leaf(self.phi_min)
        hi = tape.leaf(self.phi_max)
        if self.angle_param == "reciprocal":
            # stored angle endpoints are (-xi, xi); effective are (-1/xi, 1/xi)
            mask = np.zeros(7)
            mask[0] = 1.0
            lo = lo * (1.0 - mask) + _reciprocal_angle(lo, mask)
            hi = hi * (1.0 - mask) + _reciprocal_angle(hi, mask)
        act = self.active_mask.astype(np.float64)
        lo = lo * act + (1.0 - act) * NEUTRAL
        hi = hi * act + (1.0 - act) * NEUTRAL
        return lo, hi

    def sample_nu(self, tape, s_o, rng=None, eps=None):
        """Draw s_o transform parameter 7-vectors; returns (nu node, eps array).

        Pass ``eps`` back in to freeze the draws (used by grad checks and
        common-random-number comparisons).
        """
        if s_o < 1:
            raise ValueError("s_o must be >= 1")
        if np.any(self.phi_min.value > self.phi_max.value + 1e-12) and self.angle_param == "direct":
            raise ValueError("phi_min > phi_max: projection invariant is broken")
        if eps is None:
            eps = rng.uniform(0.0, 1.0, size=(s_o, 7))
        lo, hi = self._endpoint_nodes(tape)
        nu = lo + (hi - lo) * tape.constant(eps)
        return nu, eps

    def transformed(self, tape, images, s_o, rng=None, eps=None):
        """Warped copies of a batch: (N,H,W,C) -> node (N*s_o, H, W, C).

        Each image gets its own s_o independent transform draws; sample i of
        image n sits at row n*s_o + i.
        """
        images = np.asarray(images, dtype=np.float64)
        n, h, w, c = images.shape
        if eps is None:
            eps = rng.uniform(0.0, 1.0, size=(n * s_o, 7))
        nu, eps = self.sample_nu(tape, n * s_o, eps=eps)
        mats = affine_matrix(nu)
        expanded = tape.constant(np.repeat(images, s_o, axis=0))
        out = warp(expanded, mats)
        return out, eps

    # -- serialization ------------------------------------------------------

    def to_json(self):
        return {
            "phi_min": self.phi_min.value.tolist(),
            "phi_max": self.phi_max.value.tolist(),
            "active_mask": [bool(b) for b in self.active_mask],
            "angle_param": self.angle_param,
        }

    @classmethod
    def from_json(cls, obj, name="orbit", trainable=True):
        return cls(obj["phi_min"], obj["phi_max"], obj["active_mask"],
                   obj["angle_param"], name=name, trainable=trainable)


def _reciprocal_angle(node, mask):
    # 1/value on the angle slot only; the off-slot dummy avoids div by zero
    safe = node * mask + (1.0 - mask)
    return (1.0 / safe) * mask


def rotation_orbit(angle, angle_param="direct", name="orbit", trainable=True):
    """Rotation-only orbit with symmetric range +-angle."""
    mask = np.zeros(7, dtype=bool)
    mask[0] = True
    if angle_param == "reciprocal":
        xi = 1.0 / angle
        lo, hi = NEUTRAL.copy(), NEUTRAL.copy()
        lo[0], hi[0] = -xi, xi
    else:
        lo, hi = NEUTRAL.copy(), NEUTRAL.copy()
        lo[0], hi[0] = -angle, angle
    return OrbitDistribution(lo, hi, mask, angle_param, name=name, trainable=trainable)


def level_orbit(level, name="orbit", trainable=True):
    """Transformation-level orbit: neutral +- level * (pi,1,1,1,1,1,1)."""
    scale = np.array([np.pi, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    return OrbitDistribution(NEUTRAL - level * scale, NEUTRAL + level * scale,
                             name=name, trainable=trainable)


class SignFlipOrbit:
    """Exact two-element orbit {x, -x} for real-vector inputs (not learnable).

    With s_o == 2 the samples enumerate the group, so orbit averages are
    exact rather than Monte Carlo.
    """

    def params(self):
        return []

    def project(self):
        pass

    def transformed(self, tape, x, s_o, rng=None, eps=None):
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if s_o == 2:
            signs = np.tile([1.0, -1.0], n)
        else:
            if eps is None:
                eps = rng.uniform(0.0, 1.0, size=n * s_o)
            signs = np.where(eps < 0.5, 1.0, -1.0)
        out = np.repeat(x, s_o, axis=0) * signs[:, None]
        return tape.constant(out), eps


# ---------------------------------------------------------------------------
# affine geometry


def affine_matrix(nu):
    """(S,7) transform parameters -> (S,2,3) matrices on [-1,1]^2 coordinates.

    Composition order is fixed as translation . rotation . shear . scale;
    learned parameter values are only meaningful relative to this order.
    """
    if isinstance(nu, np.ndarray):
        tape = ng.Tape()
        nu = tape.constant(nu)
    single = nu.ndim == 1
    if single:
        nu = nu.reshape((1, 7))
    a = nu[:, 0]
    sx, sy = nu[:, 1], nu[:, 2]
    px, py = nu[:, 3], nu[:, 4]
    tx, ty = nu[:, 5], nu[:, 6]
    c, s = ng.cos(a), ng.sin(a)
    # R @ Shear @ Scale with Shear = [[1,px],[py,1]], Scale = diag(sx,sy)
    m00 = c * sx - s * py * sx
    m01 = c * px * sy - s * sy
    m10 = s * sx + c * py * sx
    m11 = s * px * sy + c * sy
    row0 = ng.stack([m00, m01, tx], axis=1)
    row1 = ng.stack([m10, m11, ty], axis=1)
    mats = ng.stack([row0, row1], axis=1)
    if single:
        mats = mats.reshape((2, 3))
    return mats


def base_grid(h, w):
    """Homogeneous output-pixel coordinates, (h*w, 3), in [-1,1]^2."""
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)], axis=1)


def warp(images, mats):
    """Warp a batch of images by per-image affine matrices.

    Output pixel at normalized coordinate c is the bilinear sample of the
    input at M @ (c, 1); out-of-bounds samples read as zero. Differentiable
    in both pixels and matrices.
    """
    if isinstance(images, np.ndarray):
        tape = mats.tape if isinstance(mats, ng.Node) else ng.Tape()
        images = tape.constant(images)
    if isinstance(mats, np.ndarray):
        mats = images.tape.constant(mats)
    b, h, w, c = images.shape
    grid = images.tape.constant(base_grid(h, w))  # (P,3)
    coords = grid @ ng.transpose(mats, (0, 2, 1))  # (B,P,2)
    sampled = grid_sample(images, coords)  # (B,P,C)
    return sampled.reshape((b, h, w, c))


def grid_sample(images, coords):
    """Bilinear sampling primitive: (B,H,W,C) x (B,P,2) -> (B,P,C).

    coords are normalized: x=-1 is the left pixel center, x=+1 the right.
    """
    tape = images.tape
    img = images.value
    xy = coords.value
    b, h, w, c = img.shape
    p = xy.shape[1]

    col = (xy[..., 0] + 1.0) * 0.5 * (w - 1)  # (B,P)
    row = (xy[..., 1] + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(col).astype(np.int64)
    y0 = np.floor(row).astype(np.int64)
    wx = col - x0
    wy = row - y0

    img_flat = img.reshape(b * h * w, c)
    base = (np.arange(b)[:, None] * (h * w)).astype(np.int64)  # (B,1)

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)).astype(np.float64)
            xc = np.clip(xi, 0, w - 1)
            yc = np.clip(yi, 0, h - 1)
            flat = base + yc * w + xc  # (B,P)
            val = img_flat[flat.ravel()].reshape(b, p, c)
            wgt = (wx if dx else (1.0 - wx)) * (wy if dy else (1.0 - wy)) * valid
            corners.append((flat, valid, val, wgt, dx, dy))

    out = np.zeros((b, p, c))
    for flat, valid, val, wgt, dx, dy in corners:
        out += wgt[..., None] * val

    def vjp(g):
        g_img = np.zeros(b * h * w * c)
        g_col = np.zeros((b, p))
        g_row = np.zeros((b, p))
        for flat, valid, val, wgt, dx, dy in corners:
            contrib = (wgt[..., None] * g).reshape(b * p, c)
            pos = (flat.reshape(-1, 1) * c + np.arange(c)[None, :]).ravel()
            g_img += np.bincount(pos, weights=contrib.ravel(),
                                 minlength=b * h * w * c)
            gdot = (g * val).sum(axis=-1)  # (B,P)
            dwx = (1.0 if dx else -1.0) * (wy if dy else (1.0 - wy)) * valid
            dwy = (wx if dx else (1.0 - wx)) * (1.0 if dy else -1.0) * valid
            g_col += gdot * dwx
            g_row += gdot * dwy
        g_coords = np.stack([g_col * 0.5 * (w - 1), g_row * 0.5 * (h - 1)], axis=-1)
        return g_img.reshape(img.shape), g_coords

    return tape.apply(out, (images, coords), vjp, name="grid_sample")
