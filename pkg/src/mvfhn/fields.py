"""Truncated-domain grids, discrete fields, norms, and noise assembly.

The unbounded spatial domain is truncated to [-L, L]^n (n = 1 or 2) with
homogeneous Dirichlet closure: ghost values outside the last grid point
are zero.  All physical norms use trapezoidal quadrature weights, which
sum to the domain volume (2L)^n.  Ensemble-level code works on stacked
arrays of shape (M, *grid.shape) through the ``*_array`` helpers; the
dataclass wrappers are the unit-of-meaning for single fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import StructuralError


class SpatialGrid:
    """Uniform tensor grid on [-L, L]^n with trapezoidal quadrature.

    Parameters
    ----------
    dimension : 1 or 2
    half_width : L, in space units
    points_per_axis : N >= 8; 2-D grids cap at 128 per axis
    """

    def __init__(self, dimension=1, half_width=8.0, points_per_axis=256):
        if dimension not in (1, 2):
            raise StructuralError("dimension must be 1 or 2")
        if points_per_axis < 8:
            raise StructuralError("points_per_axis must be >= 8")
        if dimension == 2 and points_per_axis > 128:
            raise StructuralError("2-D grids are capped at 128 points per axis")
        if half_width <= 0:
            raise StructuralError("half_width must be positive")
        self.dimension = int(dimension)
        self.half_width = float(half_width)
        self.points_per_axis = int(points_per_axis)
        self.spacing = 2.0 * self.half_width / (self.points_per_axis - 1)

        axis = np.linspace(-self.half_width, self.half_width,
                           self.points_per_axis)
        w_axis = np.full(self.points_per_axis, self.spacing)
        w_axis[0] = w_axis[-1] = 0.5 * self.spacing
        if self.dimension == 1:
            self.x = axis
            self.radius = np.abs(axis)
            self.weights = w_axis
            # coefficient callables receive the signed coordinate in 1-D
            self.coord = axis
        else:
            X, Y = np.meshgrid(axis, axis, indexing="ij")
            self.x = X
            self.y = Y
            self.radius = np.sqrt(X**2 + Y**2)
            self.weights = np.outer(w_axis, w_axis)
            # 2-D coefficient profiles must be radial
            self.coord = self.radius
        self.shape = self.weights.shape
        self.size = self.weights.size

    @property
    def grid_id(self):
        return f"grid:{self.dimension}d:L={self.half_width:g}:N={self.points_per_axis}"

    def __eq__(self, other):
        return (isinstance(other, SpatialGrid)
                and self.grid_id == other.grid_id)

    def __hash__(self):
        return hash(self.grid_id)

    def __repr__(self):
        return f"SpatialGrid({self.dimension}, {self.half_width}, {self.points_per_axis})"


@dataclass
class GridField:
    """A real field sampled on a grid; stand-in for an L^2 element."""

    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise StructuralError(
                f"field shape {self.values.shape} != grid shape {self.grid.shape}")

    def copy(self):
        return GridField(self.grid, self.values.copy())


@dataclass
class FieldPair:
    """State k = (u, v) of one ensemble member."""

    u: GridField
    v: GridField

    def __post_init__(self):
        if self.u.grid != self.v.grid:
            raise StructuralError("u and v live on different grids")
        if not (np.all(np.isfinite(self.u.values))
                and np.all(np.isfinite(self.v.values))):
            raise StructuralError("FieldPair entries must be finite")

    @property
    def grid(self):
        return self.u.grid

    def copy(self):
        return FieldPair(self.u.copy(), self.v.copy())


@dataclass
class WienerIncrement:
    """Truncated Wiener increments: K independent N(0, dt) modes."""

    dW: np.ndarray
    dt: float

    def __post_init__(self):
        self.dW = np.asarray(self.dW, dtype=float)
        if self.dt <= 0:
            raise StructuralError("dt must be positive")


# ---------------------------------------------------------------------------
# Differential operators and norms (array level)
# ---------------------------------------------------------------------------

def laplacian_array(values, grid):
    """Second-order central-difference Laplacian with Dirichlet closure.

    Works on a single field or a stack (..., *grid.shape); the stencil is
    applied along the trailing spatial axes with zero ghost values.
    """
    h2 = grid.spacing**2
    out = -2.0 * grid.dimension * values.copy()
    if grid.dimension == 1:
        out[..., :-1] += values[..., 1:]
        out[..., 1:] += values[..., :-1]
    else:
        out[..., :-1, :] += values[..., 1:, :]
        out[..., 1:, :] += values[..., :-1, :]
        out[..., :, :-1] += values[..., :, 1:]
        out[..., :, 1:] += values[..., :, :-1]
    return out / h2


def l2_sq_array(values, grid):
    """Squared quadrature L^2 norm; reduces the trailing spatial axes."""
    flat = values.reshape(values.shape[:values.ndim - grid.weights.ndim] + (-1,))
    return flat**2 @ grid.weights.ravel()


def grad_sq_array(values, grid):
    """Squared L^2 norm of the forward-difference gradient (midpoint rule)."""
    h = grid.spacing
    if grid.dimension == 1:
        d = np.diff(values, axis=-1) / h
        lead = values.shape[:-1]
        return (d.reshape(lead + (-1,))**2).sum(axis=-1) * h
    dx = np.diff(values, axis=-2) / h
    dy = np.diff(values, axis=-1) / h
    lead = values.shape[:-2]
    sx = (dx.reshape(lead + (-1,))**2).sum(axis=-1)
    sy = (dy.reshape(lead + (-1,))**2).sum(axis=-1)
    return (sx + sy) * h * h


def lp_array(values, grid, p):
    flat = values.reshape(values.shape[:values.ndim - grid.weights.ndim] + (-1,))
    return (np.abs(flat)**p @ grid.weights.ravel())**(1.0 / p)


def l2_norm(fld: GridField) -> float:
    """Quadrature L^2 norm."""
    return float(np.sqrt(l2_sq_array(fld.values, fld.grid)))


def h1_norm(fld: GridField) -> float:
    """Discrete H^1 norm: l2^2 plus the forward-difference gradient l2^2."""
    g = fld.grid
    return float(np.sqrt(l2_sq_array(fld.values, g) + grad_sq_array(fld.values, g)))


def lp_norm(fld: GridField, p) -> float:
    """Quadrature L^p norm."""
    return float(lp_array(fld.values, fld.grid, p))


def laplacian(fld: GridField) -> GridField:
    if fld.grid.points_per_axis < 3:
        raise StructuralError("laplacian needs at least 3 points per axis")
    return GridField(fld.grid, laplacian_array(fld.values, fld.grid))


def pair_norm_sq(pair: FieldPair) -> float:
    """Squared product-space norm ||u||^2 + ||v||^2."""
    g = pair.grid
    return float(l2_sq_array(pair.u.values, g) + l2_sq_array(pair.v.values, g))


def tail_mass_array(u_values, v_values, grid, radius):
    """Quadrature of |u|^2 + |v|^2 over grid points with |x| >= radius."""
    mask = (grid.radius >= radius).ravel()
    w = grid.weights.ravel() * mask
    lead = u_values.shape[:u_values.ndim - grid.weights.ndim]
    uu = u_values.reshape(lead + (-1,))
    vv = v_values.reshape(lead + (-1,))
    return uu**2 @ w + vv**2 @ w


def tail_mass(pair: FieldPair, radius) -> float:
    """Mass of |u|^2 + |v|^2 beyond |x| >= radius.

    Emits a warning-style StructuralError only for radius >= L, where the
    tail lies entirely outside the truncated domain.
    """
    g = pair.grid
    if radius >= g.half_width:
        import warnings
        warnings.warn("tail radius reaches beyond the truncated domain; "
                      "tail mass there is not represented", stacklevel=2)
    return float(tail_mass_array(pair.u.values, pair.v.values, g, radius))


# ---------------------------------------------------------------------------
# Wiener increments
# ---------------------------------------------------------------------------

def sample_increments(K, dt, stream_id, step_index, master_seed) -> WienerIncrement:
    """K independent N(0, dt) draws keyed by (seed, stream, step, mode).

    Bit-reproducible: the same key always yields the same increments, and
    row ``stream_id`` of :func:`sample_increment_block` is identical.
    """
    if dt <= 0:
        raise StructuralError("dt must be positive")
    dW = rng.normals_for_stream(master_seed, rng.path_step_key(step_index),
                                stream_id, K, math.sqrt(dt))
    return WienerIncrement(dW=dW, dt=float(dt))


def sample_increment_block(K, dt, n_streams, step_index, master_seed):
    """(n_streams, K) increment block; row j == stream j's increments."""
    return rng.normal_block(master_seed, rng.path_step_key(step_index),
                            n_streams, K, math.sqrt(dt))


# ---------------------------------------------------------------------------
# Noise operator assembly
# ---------------------------------------------------------------------------

def sigma_apply_array(t, u_values, m2, dW_block, coeffs, grid):
    """Vectorized sigma noise for a stacked ensemble.

    u_values: (M, *grid.shape); dW_block: (M, K).  Uses the separable fast
    path when the coefficient set declares one (bit-identical to the
    generic mode sum), else loops over modes.
    """
    sep = coeffs.separable
    if sep is not None:
        th = sep.theta1_profile(t, grid.coord)
        s_th = dW_block @ sep.theta1_scales(t)
        s_sig = dW_block @ sep.sigma_scales(t)
        prof = sep.sigma_profile(t, u_values, m2)
        w = coeffs.w_values(grid)
        spatial = (slice(None),) + (None,) * grid.weights.ndim
        return th * s_th[spatial] + w * prof * s_sig[spatial]
    out = np.zeros_like(u_values)
    w = coeffs.w_values(grid)
    spatial = (slice(None),) + (None,) * grid.weights.ndim
    for k in range(coeffs.K):
        mode = coeffs.theta1[k](t, grid.coord) + w * coeffs.sigma[k](t, u_values, m2)
        out += mode * dW_block[:, k][spatial]
    return out


def delta_apply_array(t, v_values, dW_block, coeffs, grid):
    """Vectorized delta noise: sum_k (theta_{2,k}(t,x) + delta_k v) dW_k."""
    sep = coeffs.separable
    spatial = (slice(None),) + (None,) * grid.weights.ndim
    if sep is not None:
        th = sep.theta2_profile(t, grid.coord)
        s_th = dW_block @ sep.theta2_scales(t)
        s_dv = dW_block @ coeffs.delta
        return th * s_th[spatial] + v_values * s_dv[spatial]
    out = np.zeros_like(v_values)
    for k in range(coeffs.K):
        mode = coeffs.theta2[k](t, grid.coord) + coeffs.delta[k] * v_values
        out += mode * dW_block[:, k][spatial]
    return out


def apply_sigma(t, u: GridField, m2, inc: WienerIncrement, coeffs) -> GridField:
    """Apply the u-equation noise operator to one increment vector."""
    if len(inc.dW) != coeffs.K:
        raise StructuralError("increment length != coefficient mode count")
    vals = sigma_apply_array(t, u.values[None], m2, inc.dW[None], coeffs, u.grid)
    return GridField(u.grid, vals[0])


def apply_delta_noise(t, v: GridField, inc: WienerIncrement, coeffs) -> GridField:
    """Apply the v-equation noise operator to one increment vector."""
    if len(inc.dW) != coeffs.K:
        raise StructuralError("increment length != coefficient mode count")
    vals = delta_apply_array(t, v.values[None], inc.dW[None], coeffs, v.grid)
    return GridField(v.grid, vals[0])


def sigma_hs_norm_sq(t, u_values, m2, coeffs, grid):
    """Squared Hilbert-Schmidt norm of the assembled sigma operator."""
    w = coeffs.w_values(grid)
    total = 0.0
    for k in range(coeffs.K):
        mode = coeffs.theta1[k](t, grid.coord) + w * coeffs.sigma[k](t, u_values, m2)
        total += l2_sq_array(mode, grid)
    return float(total)


def delta_hs_norm_sq(t, v_values, coeffs, grid):
    """Squared Hilbert-Schmidt norm of the assembled delta operator."""
    total = 0.0
    for k in range(coeffs.K):
        mode = coeffs.theta2[k](t, grid.coord) + coeffs.delta[k] * v_values
        total += l2_sq_array(mode, grid)
    return float(total)
