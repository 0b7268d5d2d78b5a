"""Classical numerical solvers used to manufacture ground-truth data.

All solvers take and return plain float64 arrays on grids from `gridfn`
and are deterministic: no randomness, no global state, no threading.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .gridfn import Grid1D, SizingError


class DivergenceError(RuntimeError):
    """Time integration produced a nonfinite state."""


class SingularSystemError(RuntimeError):
    """Tridiagonal elimination hit a zero pivot."""


def euler_integrate(rhs: Callable[[float, float], float], u0: float,
                    grid: Grid1D) -> np.ndarray:
    """Forward Euler for scalar u' = rhs(t, u); returns u on all grid points."""
    t = grid.points()
    h = grid.h
    u = np.empty(grid.n, dtype=np.float64)
    u[0] = u0
    with np.errstate(over="ignore", invalid="ignore"):  # finiteness checked below
        for i in range(grid.n - 1):
            u[i + 1] = u[i] + h * rhs(t[i], u[i])
            if not np.isfinite(u[i + 1]):
                raise DivergenceError(f"forward Euler diverged at step {i + 1} (t={t[i + 1]:g})")
    return u


@dataclass(frozen=True)
class TridiagonalSystem:
    """Rows: lower[i-1]*x[i-1] + diag[i]*x[i] + upper[i]*x[i+1] = rhs[i]."""

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        for name in ("lower", "diag", "upper", "rhs"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.diag.shape[0]
        if n < 1:
            raise SizingError("tridiagonal system needs at least one row")
        if self.rhs.shape != (n,):
            raise SizingError(f"rhs length {self.rhs.shape} does not match diag length {n}")
        if self.lower.shape != (max(n - 1, 0),) or self.upper.shape != (max(n - 1, 0),):
            raise SizingError(f"off-diagonals must have length {n - 1}")
        for name in ("lower", "diag", "upper", "rhs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"nonfinite entries in {name}")


def thomas_solve(sys: TridiagonalSystem) -> np.ndarray:
    """Thomas elimination, O(n). No pivoting: raises on a zero pivot."""
    n = sys.diag.shape[0]
    cp = np.empty(n - 1) if n > 1 else np.empty(0)
    dp = np.empty(n)
    piv = sys.diag[0]
    if piv == 0.0:
        raise SingularSystemError("zero pivot at row 0")
    dp[0] = sys.rhs[0] / piv
    if n > 1:
        cp[0] = sys.upper[0] / piv
    for i in range(1, n):
        piv = sys.diag[i] - sys.lower[i - 1] * cp[i - 1]
        if piv == 0.0 or not np.isfinite(piv):
            raise SingularSystemError(f"zero pivot at row {i}")
        dp[i] = (sys.rhs[i] - sys.lower[i - 1] * dp[i - 1]) / piv
        if i < n - 1:
            cp[i] = sys.upper[i] / piv
    x = np.empty(n)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


def poisson_solve(c: np.ndarray, u0: float, uL: float, grid: Grid1D) -> np.ndarray:
    """Dirichlet solve of u'' = c on grid via second-order central differences."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (grid.n,):
        raise SizingError(f"source term length {c.shape} does not match grid size {grid.n}")
    h2 = grid.h ** 2
    m = grid.n - 2
    rhs = c[1:-1].copy()
    rhs[0] -= u0 / h2
    rhs[-1] -= uL / h2
    sys = TridiagonalSystem(
        lower=np.full(m - 1, 1.0 / h2),
        diag=np.full(m, -2.0 / h2),
        upper=np.full(m - 1, 1.0 / h2),
        rhs=rhs,
    )
    u = np.empty(grid.n)
    u[0], u[-1] = u0, uL
    u[1:-1] = thomas_solve(sys)
    return u


class LinearRdResult(NamedTuple):
    values: np.ndarray
    conditioning_warning: bool


def linear_rd_solve(k: np.ndarray, c: float, lambda_a: float, u0: float,
                    uL: float, grid: Grid1D) -> LinearRdResult:
    """Dirichlet solve of -lambda_a * u'' + k(x) u = c.

    conditioning_warning is set when some interior k goes negative, which
    breaks the diagonal dominance that otherwise makes the elimination safe
    without pivoting.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (grid.n,):
        raise SizingError(f"reaction coefficient length {k.shape} does not match grid size {grid.n}")
    if not (lambda_a > 0):
        raise ValueError(f"diffusion coefficient must be positive, got {lambda_a}")
    h2 = grid.h ** 2
    m = grid.n - 2
    rhs = np.full(m, float(c))
    rhs[0] += lambda_a * u0 / h2
    rhs[-1] += lambda_a * uL / h2
    sys = TridiagonalSystem(
        lower=np.full(m - 1, -lambda_a / h2),
        diag=2.0 * lambda_a / h2 + k[1:-1],
        upper=np.full(m - 1, -lambda_a / h2),
        rhs=rhs,
    )
    u = np.empty(grid.n)
    u[0], u[-1] = u0, uL
    u[1:-1] = thomas_solve(sys)
    return LinearRdResult(u, bool(np.any(k[1:-1] < 0)))


def heat_step_implicit(u: np.ndarray, k: float, alpha: float, g0: float,
                       gL: float, dt: float, grid: Grid1D, steps: int) -> np.ndarray:
    """Backward Euler for u_t = k u_xx + alpha u with fixed Dirichlet values.

    Unconditionally stable for k > 0, alpha <= 0; each step solves
    (I - dt (k D2 + alpha I)) u_new = u_old on the interior.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (grid.n,):
        raise SizingError(f"state length {u.shape} does not match grid size {grid.n}")
    if not (k > 0):
        raise ValueError(f"diffusivity must be positive, got {k}")
    if not (dt > 0):
        raise ValueError(f"dt must be positive, got {dt}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    h2 = grid.h ** 2
    m = grid.n - 2
    r = dt * k / h2
    lower = np.full(m - 1, -r)
    upper = np.full(m - 1, -r)
    diag = np.full(m, 1.0 - dt * alpha + 2.0 * r)
    cur = u.copy()
    cur[0], cur[-1] = g0, gL
    for _ in range(steps):
        rhs = cur[1:-1].copy()
        rhs[0] += r * g0
        rhs[-1] += r * gL
        cur[1:-1] = thomas_solve(TridiagonalSystem(lower, diag, upper, rhs))
    return cur


@dataclass(frozen=True)
class FluxSpec:
    """Cubic flux f(u) = a u^3 + b u^2 + c u."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.a, self.b, self.c)):
            raise ValueError("flux coefficients must be finite")

    def __call__(self, u):
        return ((self.a * u + self.b) * u + self.c) * u

    def derivative(self, u):
        return (3.0 * self.a * u + 2.0 * self.b) * u + self.c


class BlowUpError(RuntimeError):
    """Conservation-law evolution produced a nonfinite state."""


_WENO_EPS = 1e-6
_CFL = 0.4


def _weno5_face(vm2, vm1, v0, vp1, vp2):
    """Fifth-order WENO reconstruction at the right face of the v0 cell."""
    p0 = (2.0 * vm2 - 7.0 * vm1 + 11.0 * v0) / 6.0
    p1 = (-vm1 + 5.0 * v0 + 2.0 * vp1) / 6.0
    p2 = (2.0 * v0 + 5.0 * vp1 - vp2) / 6.0
    b0 = (13.0 / 12.0) * (vm2 - 2.0 * vm1 + v0) ** 2 + 0.25 * (vm2 - 4.0 * vm1 + 3.0 * v0) ** 2
    b1 = (13.0 / 12.0) * (vm1 - 2.0 * v0 + vp1) ** 2 + 0.25 * (vm1 - vp1) ** 2
    b2 = (13.0 / 12.0) * (v0 - 2.0 * vp1 + vp2) ** 2 + 0.25 * (3.0 * v0 - 4.0 * vp1 + vp2) ** 2
    w0 = 0.1 / (_WENO_EPS + b0) ** 2
    w1 = 0.6 / (_WENO_EPS + b1) ** 2
    w2 = 0.3 / (_WENO_EPS + b2) ** 2
    s = w0 + w1 + w2
    return (w0 * p0 + w1 * p1 + w2 * p2) / s


def _weno_rhs(u: np.ndarray, flux: FluxSpec, h: float, alpha: float) -> np.ndarray:
    """Semi-discrete RHS -d/dx f(u) with global Lax-Friedrichs splitting."""
    f = flux(u)
    fp = 0.5 * (f + alpha * u)
    fm = 0.5 * (f - alpha * u)

    def r(a, s):
        return np.roll(a, -s)

    # positive part: left-biased stencil for the face at i+1/2
    fhat = _weno5_face(r(fp, -2), r(fp, -1), fp, r(fp, 1), r(fp, 2))
    # negative part: mirrored stencil around the same face
    fhat = fhat + _weno5_face(r(fm, 3), r(fm, 2), r(fm, 1), fm, r(fm, -1))
    return -(fhat - np.roll(fhat, 1)) / h


def weno_evolve(u0: np.ndarray, flux: FluxSpec, tau: float, grid: Grid1D) -> np.ndarray:
    """Evolve u_t + f(u)_x = 0 on the periodic unit interval to time tau.

    Fifth-order WENO fluxes with global Lax-Friedrichs splitting and
    third-order TVD Runge-Kutta in time, CFL 0.4. grid carries both
    endpoints of the period, so u0[0] and u0[-1] must agree and the
    returned profile duplicates the first value at the last node.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.shape != (grid.n,):
        raise SizingError(f"state length {u0.shape} does not match grid size {grid.n}")
    if not (grid.start == 0.0 and grid.end == 1.0):
        raise ValueError("periodic evolution expects the unit interval [0, 1]")
    scale = 1.0 + float(np.max(np.abs(u0)))
    if abs(u0[0] - u0[-1]) > 1e-9 * scale:
        raise ValueError("periodic initial profile must match at the identified endpoints")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")

    u = u0[:-1].copy()  # unique cells; last grid node is the first again
    h = grid.h
    t = 0.0
    while t < tau:
        alpha = float(np.max(np.abs(flux.derivative(u))))
        alpha = max(alpha, 1e-12)
        dt = min(_CFL * h / alpha, tau - t)
        u1 = u + dt * _weno_rhs(u, flux, h, alpha)
        u2 = 0.75 * u + 0.25 * (u1 + dt * _weno_rhs(u1, flux, h, alpha))
        u = (u + 2.0 * (u2 + dt * _weno_rhs(u2, flux, h, alpha))) / 3.0
        if not np.all(np.isfinite(u)):
            raise BlowUpError(f"conservation-law state became nonfinite at t={t + dt:g}")
        t += dt
    return np.concatenate([u, u[:1]])
