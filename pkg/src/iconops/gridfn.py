"""Uniform grids, sampled functions, finite differences, boundary blending.

Conventions used throughout the package:

* coordinates are (t, x) pairs; problems posed in a single variable pin the
  other coordinate to 0 (time-domain ODEs use (t, 0), spatial BVPs use (0, x)),
* 2D values are stored row-major with t as the outer axis,
* all stencils are second order in the interior; the one-sided boundary
  stencils are three-point formulas, exact for polynomials of degree <= 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SizingError(ValueError):
    """Input has too few points or inconsistent dimensions."""


@dataclass(frozen=True)
class Grid1D:
    """Uniform inclusive grid of n points on [start, end]."""

    start: float
    end: float
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise SizingError(f"Grid1D needs n >= 3, got {self.n}")
        if not self.end > self.start:
            raise ValueError(f"Grid1D needs end > start, got [{self.start}, {self.end}]")

    @property
    def h(self) -> float:
        return (self.end - self.start) / (self.n - 1)

    def points(self) -> np.ndarray:
        # one closed formula per point, no cumulative summation; the
        # normalized fraction makes representable ratios like i/(n-1) = 1/2
        # land exactly, and i = n-1 gives `end` exactly
        frac = np.arange(self.n) / (self.n - 1)
        return self.start + (self.end - self.start) * frac


@dataclass(frozen=True)
class Grid2D:
    """Tensor grid; values on it are laid out row-major, t outer, x inner."""

    x_grid: Grid1D
    t_grid: Grid1D

    @property
    def nx(self) -> int:
        return self.x_grid.n

    @property
    def nt(self) -> int:
        return self.t_grid.n

    @property
    def n(self) -> int:
        return self.nx * self.nt

    def coords(self) -> np.ndarray:
        """All (t, x) pairs in storage order, shape (nt*nx, 2)."""
        t = self.t_grid.points()
        x = self.x_grid.points()
        tt, xx = np.meshgrid(t, x, indexing="ij")
        return np.column_stack([tt.ravel(), xx.ravel()])


@dataclass
class FunctionSample:
    """A scalar function sampled on labeled (t, x) coordinates."""

    coords: np.ndarray
    values: np.ndarray
    _skip_checks: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.coords.ndim == 1:
            self.coords = self.coords.reshape(-1, 1)
        if self._skip_checks:
            return
        if self.coords.shape[0] != self.values.shape[0]:
            raise SizingError(
                f"{self.coords.shape[0]} coordinates vs {self.values.shape[0]} values")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("nonfinite coordinates")
        if len(np.unique(self.coords, axis=0)) != len(self.coords):
            raise ValueError("duplicate coordinates within one sample")

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FunctionSample):
            return NotImplemented
        return (self.coords.shape == other.coords.shape
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.values, other.values))


def sample_1d(grid: Grid1D, values, axis: str) -> FunctionSample:
    """Wrap values on a 1D grid as a FunctionSample; axis is 't' or 'x'."""
    pts = grid.points()
    zeros = np.zeros_like(pts)
    if axis == "t":
        coords = np.column_stack([pts, zeros])
    elif axis == "x":
        coords = np.column_stack([zeros, pts])
    else:
        raise ValueError(f"axis must be 't' or 'x', got {axis!r}")
    return FunctionSample(coords, np.asarray(values, dtype=np.float64))


def _fd_along_axis(vals: np.ndarray, h: float, order: int, axis: int) -> np.ndarray:
    """Second-order stencils along one axis of an array (>= 5 points)."""
    v = np.moveaxis(vals, axis, 0)
    if v.shape[0] < 5:
        raise SizingError(f"need >= 5 points along the axis, got {v.shape[0]}")
    out = np.empty_like(v)
    if order == 1:
        out[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
        out[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
        out[-1] = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / (2.0 * h)
    elif order == 2:
        h2 = h * h
        out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / h2
        out[0] = (v[0] - 2.0 * v[1] + v[2]) / h2
        out[-1] = (v[-1] - 2.0 * v[-2] + v[-3]) / h2
    else:
        raise ValueError(f"order must be 1 or 2, got {order}")
    return np.moveaxis(out, 0, axis)


def fd_derivative_1d(values, h: float, order: int) -> np.ndarray:
    """First or second derivative of uniformly sampled values.

    Central differences at interior points, three-point one-sided stencils at
    both ends. Both stencil families are exact on quadratics.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise SizingError(f"expected a 1D value list, got shape {v.shape}")
    if len(v) < 5:
        raise SizingError(f"fd_derivative_1d needs >= 5 values, got {len(v)}")
    if not np.all(np.isfinite(v)):
        raise ValueError("nonfinite input values")
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    return _fd_along_axis(v, h, order, 0)


def fd_partials_2d(u: FunctionSample, grid: Grid2D) -> dict[str, FunctionSample]:
    """All first and second partials of u on the grid.

    Returns {"u_x", "u_t", "u_xx", "u_xt", "u_tt"}. The mixed partial is the
    x-stencil applied first, then the t-stencil (fixed order, see below).
    """
    if grid.nx < 5 or grid.nt < 5:
        raise SizingError(f"fd_partials_2d needs a grid of at least 5x5, got {grid.nt}x{grid.nx}")
    if len(u) != grid.n:
        raise SizingError(f"sample has {len(u)} values for a {grid.n}-point grid")
    vals = u.values.reshape(grid.nt, grid.nx)
    hx = grid.x_grid.h
    ht = grid.t_grid.h
    ux = _fd_along_axis(vals, hx, 1, 1)
    partials = {
        "u_x": ux,
        "u_t": _fd_along_axis(vals, ht, 1, 0),
        "u_xx": _fd_along_axis(vals, hx, 2, 1),
        "u_xt": _fd_along_axis(ux, ht, 1, 0),
        "u_tt": _fd_along_axis(vals, ht, 2, 0),
    }
    coords = u.coords
    return {name: FunctionSample(coords, arr.ravel(), _skip_checks=True)
            for name, arr in partials.items()}


def blend_to_boundaries_1d(u, u0: float, uL: float) -> np.ndarray:
    """Affine correction pinning the endpoint values to u0 and uL.

    v(s) = u(s) + (1-s)(u0 - u[first]) + s(uL - u[last]) with s the normalized
    coordinate. Endpoints are assigned exactly.
    """
    uv = np.asarray(u, dtype=np.float64)
    if uv.ndim != 1 or len(uv) < 2:
        raise SizingError("blend_to_boundaries_1d needs a 1D list of >= 2 values")
    s = np.linspace(0.0, 1.0, len(uv))
    v = uv + (1.0 - s) * (u0 - uv[0]) + s * (uL - uv[-1])
    v[0] = u0
    v[-1] = uL
    return v


def blend_to_time_slices_2d(u: FunctionSample, v0, v1, grid: Grid2D) -> FunctionSample:
    """Affine-in-t correction pinning the t=0 and t=1 slices.

    v(x,t) = u(x,t) + (1-t)[v0(x) - u(x,0)] + t[v1(x) - u(x,1)]. The t-grid
    must span [0,1] since t itself is the interpolation weight. Endpoint
    slices are assigned exactly.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    v1 = np.asarray(v1, dtype=np.float64)
    if v0.shape != (grid.nx,) or v1.shape != (grid.nx,):
        raise SizingError(
            f"slice lengths {v0.shape}/{v1.shape} do not match nx={grid.nx}")
    if grid.t_grid.start != 0.0 or grid.t_grid.end != 1.0:
        raise ValueError("blend_to_time_slices_2d requires the t-grid to span [0, 1]")
    if len(u) != grid.n:
        raise SizingError(f"sample has {len(u)} values for a {grid.n}-point grid")
    vals = u.values.reshape(grid.nt, grid.nx)
    t = grid.t_grid.points()[:, None]
    out = vals + (1.0 - t) * (v0[None, :] - vals[0]) + t * (v1[None, :] - vals[-1])
    out[0] = v0
    out[-1] = v1
    return FunctionSample(u.coords, out.ravel(), _skip_checks=True)
