"""Reference computations that do not share code with the package.

The radial formulas of the package are checked against full-coordinate
calculus on C^n: complex Hessians by finite differences in real
coordinates, curvature tensors symbolically with sympy, and time integrals by
adaptive quadrature.
"""
import math

import numpy as np
import sympy as sp
from scipy.integrate import quad

from krflow.radial_geometry import RadialGrid


def grid_through(rho_target, R2=1.0, n=2, per_unit=64, y_max=12.0):
    """Uniform y-grid that has a node exactly at ``rho_target``.

    Returns (grid, index of that node).
    """
    y_t = -math.log1p(-rho_target / R2)
    k = per_unit
    h = y_t / k
    m = int(round(y_max / h)) + 1
    return RadialGrid(n, R2, (m - 1) * h, m), k


def off_axis_point(rho, n):
    """A point of C^n with |z|^2 = rho and every coordinate nonzero."""
    phases = np.exp(1j * np.linspace(0.3, 2.1, n))
    weights = np.linspace(1.0, 2.0, n)
    weights = weights / weights.sum()
    return np.sqrt(rho * weights) * phases


def real_hessian(fn, x, step=1e-4):
    """Central-difference Hessian of fn: R^d -> R."""
    d = x.size
    H = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = step
            ej[j] = step
            H[i, j] = (fn(x + ei + ej) - fn(x + ei - ej) - fn(x - ei + ej) + fn(x - ei - ej)) / (4 * step**2)
    return H


def real_gradient(fn, x, step=1e-5):
    d = x.size
    g = np.empty(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        g[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g


def complex_calculus(phi_of_rho, z):
    """(g_{i jbar}, d phi / dz_i) of the function phi(|z|^2) at the point z.

    Real coordinates are ordered (x_1, y_1, x_2, y_2, ...).
    """
    n = z.size
    x = np.empty(2 * n)
    x[0::2], x[1::2] = z.real, z.imag

    def fn(v):
        return float(phi_of_rho(np.sum(v**2)))

    H = real_hessian(fn, x)
    grad = real_gradient(fn, x)
    G = np.empty((n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            xi, yi, xj, yj = 2 * i, 2 * i + 1, 2 * j, 2 * j + 1
            G[i, j] = 0.25 * (H[xi, xj] + H[yi, yj] + 1j * (H[xi, yj] - H[yi, xj]))
    dz = 0.5 * (grad[0::2] - 1j * grad[1::2])
    return G, dz


def hessian_log_det(phi_of_rho, rho, n):
    G, _ = complex_calculus(phi_of_rho, off_axis_point(rho, n))
    return float(np.log(np.linalg.det(G).real))


def cheng_yau_f_full(phi_of_rho, rho, n):
    """log(det(phi_{i jbar}) (|d phi|^2_phi - phi)) evaluated in full coordinates."""
    z = off_axis_point(rho, n)
    G, dz = complex_calculus(phi_of_rho, z)
    ginv = np.linalg.inv(G).T  # g^{i jbar} with g^{i jbar} g_{k jbar} = delta_ik
    grad2 = float(np.einsum("ij,i,j->", ginv, dz, dz.conj()).real)
    return float(np.log(np.linalg.det(G).real * (grad2 - phi_of_rho(rho))))


def symbolic_curvature(potential, rho_value, n):
    """Normalised curvature components of i dd-bar potential(|z|^2) at a point on the z_1-axis.

    Uses R_{i jbar k lbar} = -d_k d_lbar g_{i jbar} + g^{p qbar} d_k g_{i qbar} d_lbar g_{p jbar},
    with z and zbar as independent symbols.  Direction 1 is radial, the others
    tangential.  Returns a dict with H_rad, H_tan, H_mix and (n >= 3) H_cross.
    """
    z = sp.symbols(f"z1:{n + 1}")
    w = sp.symbols(f"w1:{n + 1}")
    r = sp.Symbol("r")
    rho = sum(zi * wi for zi, wi in zip(z, w))
    Phi = potential(r).subs(r, rho)
    g = [[sp.diff(Phi, z[i], w[j]) for j in range(n)] for i in range(n)]
    point = {s: 0 for s in z + w}
    point[z[0]] = sp.sqrt(sp.Rational(1) * rho_value)
    point[w[0]] = sp.sqrt(sp.Rational(1) * rho_value)
    G = sp.Matrix(n, n, lambda i, j: g[i][j].subs(point))
    Ginv = G.inv().T

    def R(i, j, k, l):
        val = -sp.diff(g[i][j], z[k], w[l]).subs(point)
        for p in range(n):
            for q in range(n):
                if Ginv[p, q] != 0:
                    val += Ginv[p, q] * sp.diff(g[i][q], z[k]).subs(point) * sp.diff(g[p][j], w[l]).subs(point)
        return sp.nsimplify(val) if val.is_number else val

    out = {"H_rad": float(R(0, 0, 0, 0) / G[0, 0] ** 2)}
    if n >= 2:
        out["H_tan"] = float(R(1, 1, 1, 1) / G[1, 1] ** 2)
        out["H_mix"] = float(R(0, 0, 1, 1) / (G[0, 0] * G[1, 1]))
    if n >= 3:
        out["H_cross"] = float(R(1, 1, 2, 2) / (G[1, 1] * G[2, 2]))
    return out


def log_integral(t, c, slope, eps):
    """Quadrature of the integral over [0, t] of log(c + slope (s + eps))."""
    return quad(lambda s: math.log(c + slope * (s + eps)), 0.0, t, limit=200)[0]
