"""Elliptic Newton solver for the limiting Kähler-Einstein equations.

Domain case:   log((w_bar + i dd-bar u)^n / w_bar^n) = (n+1) u - f
General case:  log((-Ric(w_M) + i dd-bar u)^n / w_M^n) = u
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import solve_banded

from .background import BackgroundFamily, is_general
from .flow import StepRejected, _jacobian_banded, _newton
from .radial_geometry import (
    MetricEigenvalues,
    RadialPotential,
    d1,
    d2,
    laplacian_coefficients,
    metric_eigenvalues,
    ricci_potential,
)


class OracleFailure(RuntimeError):
    def __init__(self, message: str, history: List[float]):
        super().__init__(message)
        self.history = history


@dataclass
class KESolution:
    u_inf: np.ndarray
    residual_norm: float
    newton_iterations: int
    history: List[float] = field(default_factory=list)
    potential: Optional[RadialPotential] = field(default=None, repr=False)

    def eigenvalues(self) -> MetricEigenvalues:
        return metric_eigenvalues(self.potential)


def limit_boundary_value(mode: str, base: RadialPotential, fmap, n: int, reference: Optional[RadialPotential] = None) -> float:
    """Value of the limit potential at the far node, where i dd-bar u is negligible."""
    if is_general(mode):
        eb, er = metric_eigenvalues(base), metric_eigenvalues(reference)
        return float((n - 1) * np.log(eb.a[-1] / er.a[-1]) + np.log(eb.b[-1] / er.b[-1]))
    return float(fmap[-1]) / (n + 1)


def solve_limit(
    mode: str,
    base: RadialPotential,
    fmap=None,
    n: Optional[int] = None,
    tol: float = 1e-11,
    reference: Optional[RadialPotential] = None,
    initial=None,
    max_iter: int = 60,
) -> KESolution:
    """Solve the limit equation by damped Newton with linearisation Delta - mu."""
    if tol < 1e-12:
        raise ValueError("tol must be >= 1e-12")
    g = base.grid
    n = g.n if n is None else n
    general = is_general(mode)
    if general and reference is None:
        raise ValueError("general mode needs the reference metric omega_M")
    reference = base if reference is None else reference
    fmap = np.zeros(g.m) if (fmap is None or general) else np.asarray(fmap, dtype=float)
    mu = 1.0 if general else float(n + 1)
    eb, er = metric_eigenvalues(base), metric_eigenvalues(reference)
    eb.require_positive()
    lv_ref = (n - 1) * np.log(er.a) + np.log(er.b)
    ub = limit_boundary_value(mode, base, fmap, n, reference)
    R2, rho, h = g.R2, g.rho, g.h
    cache = {}

    def residual(u):
        uy = d1(u, h)
        a = eb.a + uy
        b = eb.b + R2 * uy + rho * d2(u, h)
        if np.any(a <= 0) or np.any(b <= 0):
            return None
        cache["eig"] = (a, b)
        F = (n - 1) * np.log(a) + np.log(b) - lv_ref + fmap - mu * u
        F[-1] = u[-1] - ub
        return F

    def jac(u, F):
        a, b = cache["eig"]
        p, q = laplacian_coefficients(MetricEigenvalues(g, a, b), n)
        ab, mult = _jacobian_banded(p, q, h, 1.0, mu)
        rhs_vec = F.copy()
        rhs_vec[-1] = -F[-1]
        rhs_vec[0] -= mult * rhs_vec[1]
        return solve_banded((1, 1), ab, rhs_vec)

    if initial is None:
        u0 = np.zeros(g.m)
        u0[-1] = ub
    else:
        # keep the guess as given; the Dirichlet row is linear and Newton
        # enforces it in the first full step
        u0 = np.array(initial, dtype=float)
    try:
        u, norm, iters, history = _newton(residual, jac, u0, tol, max_iter)
    except StepRejected as exc:
        raise OracleFailure(f"limit solve failed: {exc}", exc.history) from exc
    pot = base.add_field(u)
    return KESolution(u, norm, iters, history, pot)


def solve_for_family(bf: BackgroundFamily, tol: float = 1e-11, initial=None) -> KESolution:
    return solve_limit(bf.mode, bf.base, bf.fmap, bf.n, tol, bf.reference, initial)


def ke_residual(metric_potential: RadialPotential, lam: float, n: Optional[int] = None, trim: int = 0) -> float:
    """Sup of the eigenvalues of Ric(w) + lam w measured against w.

    ``trim`` drops that many nodes at each end of the grid.
    """
    n = metric_potential.grid.n if n is None else n
    combo = ricci_potential(metric_potential, n) + lam * metric_potential
    ec = metric_eigenvalues(combo)
    em = metric_eigenvalues(metric_potential)
    sl = slice(trim, metric_potential.grid.m - trim if trim else None)
    return float(max(np.max(np.abs(ec.a[sl] / em.a[sl])), np.max(np.abs(ec.b[sl] / em.b[sl]))))
