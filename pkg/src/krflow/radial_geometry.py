"""Kähler calculus for U(n)-invariant metrics on balls {|z|^2 < R2}.

A radial Kähler potential Phi(rho), rho = |z|^2, has two metric eigenvalues:
the tangential one A = Phi' and the radial one B = Phi' + rho Phi''.

Everything here is discretised in the compactified coordinate

    y = -log(1 - rho / R2),    rho = R2 (1 - e^{-y}),    w := R2 - rho = R2 e^{-y}

in which the complete metrics of interest have O(1) coefficients.  Internally
the eigenvalues are carried in rescaled form

    a = w A = Phi_y,        b = w^2 B = R2 Phi_y + rho Phi_yy,

which stays bounded all the way to the truncation point ``y_max``.  Ratios of
volume forms, Laplacians and normalised curvatures only ever involve ``a`` and
``b`` because the powers of ``w`` cancel.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class InsufficientResolution(ValueError):
    pass


class NonKahlerError(ValueError):
    """Raised when a metric eigenvalue is not strictly positive."""

    def __init__(self, message: str, node: int):
        super().__init__(f"{message} (first offending node {node})")
        self.node = node


class UnsupportedDimension(ValueError):
    pass


MIN_STENCIL_NODES = 5


@dataclass(frozen=True)
class RadialGrid:
    """Uniform mesh in the compactified coordinate ``y`` on [0, y_max]."""

    n: int
    R2: float
    y_max: float
    m: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"complex dimension must be an integer >= 1, got {self.n}")
        if not self.R2 > 0:
            raise ValueError(f"R2 must be positive, got {self.R2}")
        if not self.y_max > 0:
            raise ValueError(f"y_max must be positive, got {self.y_max}")
        if int(self.m) != self.m or self.m < 3:
            raise ValueError(f"need at least 3 nodes, got {self.m}")
        y = np.linspace(0.0, float(self.y_max), int(self.m))
        y.setflags(write=False)
        object.__setattr__(self, "nodes", y)

    @property
    def h(self) -> float:
        return float(self.y_max) / (self.m - 1)

    @property
    def y(self) -> np.ndarray:
        return self.nodes

    @property
    def rho(self) -> np.ndarray:
        return self.rho_of_y(self.nodes)

    @property
    def w(self) -> np.ndarray:
        """Boundary distance R2 - rho at the nodes."""
        return self.R2 * np.exp(-self.nodes)

    def rho_of_y(self, y):
        return -self.R2 * np.expm1(-np.asarray(y, dtype=float))

    def y_of_rho(self, rho):
        return -np.log1p(-np.asarray(rho, dtype=float) / self.R2)

    def boundary_distance(self, y):
        return self.R2 * np.exp(-np.asarray(y, dtype=float))

    def refined(self) -> "RadialGrid":
        """Same domain with the step halved (2m - 1 nodes, old nodes kept)."""
        return RadialGrid(self.n, self.R2, self.y_max, 2 * self.m - 1)

    def with_y_max(self, y_max: float) -> "RadialGrid":
        """Grid with the same step extended (or cut) to a new cutoff."""
        m = int(round(y_max / self.h)) + 1
        return RadialGrid(self.n, self.R2, (m - 1) * self.h, m)


def _check_resolution(f: np.ndarray):
    if f.shape[-1] < MIN_STENCIL_NODES:
        raise InsufficientResolution(
            f"second-order stencils need at least {MIN_STENCIL_NODES} nodes, got {f.shape[-1]}"
        )


def d1(f, h: float) -> np.ndarray:
    """First y-derivative; central inside, one-sided second order at both ends."""
    f = np.asarray(f, dtype=float)
    _check_resolution(f)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2 * h)
    out[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
    out[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * h)
    return out


def d2(f, h: float) -> np.ndarray:
    """Second y-derivative with four-point one-sided closures at the ends."""
    f = np.asarray(f, dtype=float)
    _check_resolution(f)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h**2
    out[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h**2
    out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h**2
    return out


@dataclass(frozen=True)
class RadialPotential:
    """A sampled radial potential together with its y-derivatives.

    Potentials built from samples get their derivatives by finite differences;
    presets with closed forms carry exact derivatives.  Linear combinations
    combine the derivative fields, so exactness is preserved where possible.
    """

    grid: RadialGrid
    values: np.ndarray
    dy: np.ndarray = field(repr=False)
    dyy: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("values", "dy", "dyy"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (self.grid.m,):
                raise ValueError(f"{name} must have one entry per node")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise ValueError(f"potential is not finite at node {bad}")

    @classmethod
    def from_values(cls, grid: RadialGrid, values) -> "RadialPotential":
        values = np.asarray(values, dtype=float)
        return cls(grid, values, d1(values, grid.h), d2(values, grid.h))

    @classmethod
    def from_rho_function(
        cls,
        grid: RadialGrid,
        fn: Callable,
        dfn: Optional[Callable] = None,
        d2fn: Optional[Callable] = None,
    ) -> "RadialPotential":
        """Sample Phi(rho); with ``dfn``/``d2fn`` the derivatives are exact."""
        rho = grid.rho
        values = fn(rho)
        if dfn is None or d2fn is None:
            return cls.from_values(grid, values)
        w = grid.w
        p1, p2 = dfn(rho), d2fn(rho)
        return cls(grid, values, p1 * w, p2 * w**2 - p1 * w)

    @classmethod
    def zero(cls, grid: RadialGrid) -> "RadialPotential":
        z = np.zeros(grid.m)
        return cls(grid, z, z, z)

    def _combine(self, other, sign):
        if isinstance(other, RadialPotential):
            if other.grid != self.grid:
                raise ValueError("potentials live on different grids")
            return RadialPotential(
                self.grid,
                self.values + sign * other.values,
                self.dy + sign * other.dy,
                self.dyy + sign * other.dyy,
            )
        # constants are pluriharmonic
        return RadialPotential(self.grid, self.values + sign * float(other), self.dy, self.dyy)

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __mul__(self, c):
        c = float(c)
        return RadialPotential(self.grid, c * self.values, c * self.dy, c * self.dyy)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def add_field(self, u) -> "RadialPotential":
        """Add a sampled correction (e.g. a flow potential) differentiated numerically."""
        return self + RadialPotential.from_values(self.grid, u)


@dataclass(frozen=True)
class MetricEigenvalues:
    """Tangential/radial eigenvalues, stored in the rescaled form (a, b)."""

    grid: RadialGrid
    a: np.ndarray
    b: np.ndarray

    @property
    def A(self) -> np.ndarray:
        return self.a / self.grid.w

    @property
    def B(self) -> np.ndarray:
        return self.b / self.grid.w**2

    def is_positive(self) -> bool:
        return bool(np.all(self.a > 0) and np.all(self.b > 0))

    def require_positive(self):
        bad = np.flatnonzero(~((self.a > 0) & (self.b > 0)))
        if bad.size:
            raise NonKahlerError("non-positive metric eigenvalue", int(bad[0]))

    def ratio_to(self, other: "MetricEigenvalues"):
        """Eigenvalue ratios (A/A_other, B/B_other) node by node."""
        return self.a / other.a, self.b / other.b

    def __add__(self, other: "MetricEigenvalues") -> "MetricEigenvalues":
        return MetricEigenvalues(self.grid, self.a + other.a, self.b + other.b)

    def scaled(self, c: float) -> "MetricEigenvalues":
        return MetricEigenvalues(self.grid, c * self.a, c * self.b)


@dataclass(frozen=True)
class CurvatureComponents:
    """Normalised curvature components of a U(n)-invariant metric.

    H_rad and H_tan are holomorphic sectional curvatures of the radial and a
    tangential direction; H_mix and H_cross are bisectional curvatures of an
    orthogonal radial/tangential pair and of two orthogonal tangential
    directions.  For n = 1 only H_rad exists.
    """

    n: int
    H_rad: np.ndarray
    _mix: Optional[np.ndarray] = field(default=None, repr=False)
    _tan: Optional[np.ndarray] = field(default=None, repr=False)
    _cross: Optional[np.ndarray] = field(default=None, repr=False)

    def _mixed(self, value, name):
        if value is None:
            raise UnsupportedDimension(f"{name} needs complex dimension >= 2, got n = {self.n}")
        return value

    @property
    def H_mix(self):
        return self._mixed(self._mix, "H_mix")

    @property
    def H_tan(self):
        return self._mixed(self._tan, "H_tan")

    @property
    def H_cross(self):
        if self.n < 3:
            raise UnsupportedDimension(f"H_cross needs two orthogonal tangential directions (n >= 3), got n = {self.n}")
        return self._cross


def metric_eigenvalues(phi: RadialPotential) -> MetricEigenvalues:
    g = phi.grid
    a = phi.dy
    b = g.R2 * phi.dy + g.rho * phi.dyy
    return MetricEigenvalues(g, a, b)


def log_ma_determinant(eig: MetricEigenvalues, n: Optional[int] = None) -> np.ndarray:
    """log(A^{n-1} B), computed without forming the e^{(n+1)y} growth."""
    n = eig.grid.n if n is None else n
    eig.require_positive()
    return (n - 1) * np.log(eig.a) + np.log(eig.b) - (n + 1) * np.log(eig.grid.w)


def ma_determinant(eig: MetricEigenvalues, n: Optional[int] = None) -> np.ndarray:
    """Monge-Ampère determinant det g = A^{n-1} B of a radial metric."""
    n = eig.grid.n if n is None else n
    eig.require_positive()
    return eig.A ** (n - 1) * eig.B


def log_volume_ratio(eig: MetricEigenvalues, ref: MetricEigenvalues, n: Optional[int] = None) -> np.ndarray:
    """log(omega^n / omega_ref^n) node by node."""
    n = eig.grid.n if n is None else n
    eig.require_positive()
    return (n - 1) * np.log(eig.a / ref.a) + np.log(eig.b / ref.b)


def laplacian_coefficients(eig: MetricEigenvalues, n: Optional[int] = None):
    """Coefficients (p, q) with Delta v = p v_y + q v_yy."""
    n = eig.grid.n if n is None else n
    g = eig.grid
    p = (n - 1) / eig.a + g.R2 / eig.b
    q = g.rho / eig.b
    # continuous limit at the centre: n v'(0) / A(0)
    p[0] = n / eig.a[0]
    q[0] = 0.0
    return p, q


def laplacian_radial(v, eig: MetricEigenvalues, n: Optional[int] = None) -> np.ndarray:
    """Laplacian of a radial function: (n-1) v'/A + (v' + rho v'')/B."""
    h = eig.grid.h
    p, q = laplacian_coefficients(eig, n)
    v = np.asarray(v, dtype=float)
    return p * d1(v, h) + q * d2(v, h)


def ricci_potential(phi: RadialPotential, n: Optional[int] = None) -> RadialPotential:
    """Potential -log det g whose i dd-bar is the Ricci form."""
    n = phi.grid.n if n is None else n
    eig = metric_eigenvalues(phi)
    return RadialPotential.from_values(phi.grid, -log_ma_determinant(eig, n))


def curvature_components(phi: RadialPotential, n: Optional[int] = None) -> CurvatureComponents:
    n = phi.grid.n if n is None else n
    g = phi.grid
    eig = metric_eigenvalues(phi)
    eig.require_positive()
    h = g.h
    # logarithmic y-derivatives of the true eigenvalues A and B
    la = d1(eig.A, h) / eig.A
    lb = d1(eig.B, h) / eig.B
    # (B'/B)' = B''/B - (B'/B)^2; composing two one-sided first-derivative
    # stencils at the ends would lose an order
    dlb = d2(eig.B, h) / eig.B - lb**2
    # H_rad = -(rho B'/B)' / B, rewritten in y
    H_rad = -(g.R2 * lb + g.rho * dlb) / eig.b
    if n == 1:
        return CurvatureComponents(n, H_rad)
    H_tan = -2.0 * la / eig.a
    H_mix = (la - lb) / eig.a
    H_cross = -la / eig.a if n >= 3 else None
    return CurvatureComponents(n, H_rad, H_mix, H_tan, H_cross)


def radial_geodesic_length(eig: MetricEigenvalues, up_to_y: Optional[float] = None) -> float:
    """Length of the radial segment from the centre out to ``up_to_y``.

    Trapezoid rule for the integral of sqrt(B) dr in r = sqrt(rho).
    """
    g = eig.grid
    if up_to_y is None:
        up_to_y = g.y_max
    k = int(np.searchsorted(g.y, up_to_y, side="right"))
    k = max(k, 2)
    r = np.sqrt(g.rho[:k])
    sqrtB = np.sqrt(eig.b[:k]) / g.w[:k]
    return float(np.trapezoid(sqrtB, r)) if hasattr(np, "trapezoid") else float(np.trapz(sqrtB, r))


def geodesic_length_profile(eig: MetricEigenvalues) -> np.ndarray:
    """Cumulative radial length at every node (0 at the centre)."""
    g = eig.grid
    r = np.sqrt(g.rho)
    sqrtB = np.sqrt(eig.b) / g.w
    seg = 0.5 * (sqrtB[1:] + sqrtB[:-1]) * np.diff(r)
    return np.concatenate([[0.0], np.cumsum(seg)])
