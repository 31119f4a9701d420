"""Defining functions, the background metric -i dd-bar log(-phi) and flow backgrounds."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .radial_geometry import (
    MetricEigenvalues,
    RadialGrid,
    RadialPotential,
    metric_eigenvalues,
    ricci_potential,
)

UNNORMALIZED = "unnormalized"
NORMALIZED = "normalized"
GENERAL_UNNORMALIZED = "general-unnormalized"
GENERAL_NORMALIZED = "general-normalized"
MODES = (UNNORMALIZED, NORMALIZED, GENERAL_UNNORMALIZED, GENERAL_NORMALIZED)


class InvalidDefiningFunction(ValueError):
    pass


class InvalidPreset(ValueError):
    pass


def is_general(mode: str) -> bool:
    return mode.startswith("general")


def is_normalized(mode: str) -> bool:
    return mode.endswith("-normalized") or mode == NORMALIZED


def unnormalized_of(mode: str) -> str:
    return GENERAL_UNNORMALIZED if is_general(mode) else UNNORMALIZED


def normalized_of(mode: str) -> str:
    return GENERAL_NORMALIZED if is_general(mode) else NORMALIZED


def normalization_constant(mode: str, n: int) -> float:
    """lambda: n + 1 on domains, 1 with a general background metric."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return 1.0 if is_general(mode) else float(n + 1)


@dataclass(frozen=True)
class DefiningFunction:
    """phi(rho) with exact rho-derivatives, negative inside, zero on rho = R2."""

    grid: RadialGrid
    phi: np.ndarray
    phi_prime: np.ndarray
    phi_second: np.ndarray
    name: str = ""

    def validate(self):
        if np.any(self.phi >= 0):
            node = int(np.flatnonzero(self.phi >= 0)[0])
            raise InvalidDefiningFunction(f"phi must be negative inside the domain; phi >= 0 at node {node}")
        A = self.phi_prime
        B = self.phi_prime + self.grid.rho * self.phi_second
        if np.any(A <= 0) or np.any(B <= 0):
            node = int(np.flatnonzero((A <= 0) | (B <= 0))[0])
            raise InvalidDefiningFunction(f"phi is not strictly plurisubharmonic at node {node}")
        w_last = float(self.grid.w[-1])
        # first-order Taylor at rho = R2, factor 2 of slack
        if abs(self.phi[-1]) >= 2.0 * max(1.0, abs(self.phi_prime[-1])) * w_last:
            raise InvalidDefiningFunction("phi does not vanish on the boundary rho = R2")
        return self

    @property
    def A(self) -> np.ndarray:
        return self.phi_prime

    @property
    def B(self) -> np.ndarray:
        return self.phi_prime + self.grid.rho * self.phi_second


def polynomial_defining_function(grid: RadialGrid, coeffs, name: str = "") -> DefiningFunction:
    """phi(rho) = sum_k coeffs[k] rho^k, evaluated exactly at the nodes."""
    p = np.polynomial.Polynomial(coeffs)
    rho = grid.rho
    return DefiningFunction(grid, p(rho), p.deriv(1)(rho), p.deriv(2)(rho), name).validate()


def ball(grid: RadialGrid) -> DefiningFunction:
    # phi = rho - R2 is minus the boundary distance, known exactly at the nodes
    m = grid.m
    return DefiningFunction(grid, -grid.w, np.ones(m), np.zeros(m), f"ball({math.sqrt(grid.R2):g})").validate()


def perturbed_ball(grid: RadialGrid, a: float) -> DefiningFunction:
    """phi = rho + a rho^2 - (R2 + a R2^2): the same ball, a different defining function."""
    R2 = grid.R2
    return polynomial_defining_function(
        grid, [-(R2 + a * R2**2), 1.0, a], f"perturbed-ball({a:g},{math.sqrt(R2):g})"
    )


def background_metric(df: DefiningFunction) -> RadialPotential:
    """Phi_bar = -log(-phi) with exact derivatives."""
    if np.any(df.phi >= 0):
        node = int(np.flatnonzero(df.phi >= 0)[0])
        raise InvalidDefiningFunction(f"phi >= 0 at interior node {node}")
    g = df.grid
    phi, p1, p2 = df.phi, df.phi_prime, df.phi_second
    d1 = -p1 / phi
    d2 = -p2 / phi + (p1 / phi) ** 2
    w = g.w
    return RadialPotential(g, -np.log(-phi), d1 * w, d2 * w**2 - d1 * w)


def cheng_yau_f(df: DefiningFunction, n: Optional[int] = None) -> np.ndarray:
    """f = log(det(phi_{i jbar}) (|d phi|^2_phi - phi)) for a radial defining function."""
    n = df.grid.n if n is None else n
    A, B = df.A, df.B
    with np.errstate(divide="ignore", invalid="ignore"):
        grad2 = df.phi_prime**2 * df.grid.rho / B
        arg = A ** (n - 1) * B * (grad2 - df.phi)
    bad = ~(arg > 0)  # also catches NaN from B = 0
    if np.any(bad):
        node = int(np.flatnonzero(bad)[0])
        raise InvalidDefiningFunction(f"log argument of f is non-positive at node {node}")
    return np.log(arg)


def cy_identity_residual(df: DefiningFunction, n: Optional[int] = None) -> float:
    """Defect of Ric(w_bar) + (n+1) w_bar = -i dd-bar f, relative to w_bar.

    The combination ricci_potential + (n+1) Phi_bar + f must be pluriharmonic;
    returns the largest eigenvalue of its i dd-bar measured against w_bar.
    """
    n = df.grid.n if n is None else n
    g = df.grid
    bg = background_metric(df)
    combo = ricci_potential(bg, n) + RadialPotential.from_values(g, cheng_yau_f(df, n)) + (n + 1) * bg
    ec = metric_eigenvalues(combo)
    eb = metric_eigenvalues(bg)
    return float(max(np.max(np.abs(ec.a / eb.a)), np.max(np.abs(ec.b / eb.b))))


def comparison_constant(omega0: MetricEigenvalues, ref: MetricEigenvalues) -> float:
    """Smallest c with omega0 <= c ref on the grid."""
    ra, rb = omega0.ratio_to(ref)
    return float(max(np.max(ra), np.max(rb)))


def ricci_bounds(phi: RadialPotential, n: Optional[int] = None):
    """(lo, hi) with lo * omega <= -Ric(omega) <= hi * omega node-wise over the grid."""
    n = phi.grid.n if n is None else n
    neg_ric = metric_eigenvalues(-ricci_potential(phi, n))
    ra, rb = neg_ric.ratio_to(metric_eigenvalues(phi))
    return float(min(ra.min(), rb.min())), float(max(ra.max(), rb.max()))


@dataclass(frozen=True)
class BackgroundFamily:
    """The time-dependent reference metric of one of the four flows.

    ``base`` is Phi_bar on domains and the potential of -Ric(omega_M) for a
    general background; ``reference`` is the volume-form reference (Phi_bar or
    omega_M).  ``fmap`` is the Cheng-Yau function (zero for general modes).
    """

    mode: str
    omega0: RadialPotential
    base: RadialPotential
    lam: float
    reference: Optional[RadialPotential] = None
    fmap: Optional[np.ndarray] = None
    _eig0: MetricEigenvalues = field(init=False, repr=False, compare=False)
    _eigb: MetricEigenvalues = field(init=False, repr=False, compare=False)
    _eigref: MetricEigenvalues = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.reference is None:
            object.__setattr__(self, "reference", self.base)
        if self.fmap is None:
            object.__setattr__(self, "fmap", np.zeros(self.grid.m))
        object.__setattr__(self, "_eig0", metric_eigenvalues(self.omega0))
        object.__setattr__(self, "_eigb", metric_eigenvalues(self.base))
        object.__setattr__(self, "_eigref", metric_eigenvalues(self.reference))

    @property
    def grid(self) -> RadialGrid:
        return self.omega0.grid

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def zeroth_order(self) -> float:
        """Coefficient of the -u term in the flow equation."""
        return self.lam if is_normalized(self.mode) else 0.0

    def coefficients(self, t: float, eps: float):
        """(coefficient of omega0, coefficient of base) at time t."""
        if t < 0 or eps < 0:
            raise ValueError(f"t and eps must be nonnegative, got t={t}, eps={eps}")
        lam = self.lam
        if is_normalized(self.mode):
            decay = math.exp(-lam * t)
            return decay, -math.expm1(-lam * t) + lam * eps * decay
        return 1.0, lam * (t + eps)

    def eigenvalues(self, t: float, eps: float) -> MetricEigenvalues:
        c0, cb = self.coefficients(t, eps)
        return MetricEigenvalues(self.grid, c0 * self._eig0.a + cb * self._eigb.a, c0 * self._eig0.b + cb * self._eigb.b)

    @property
    def omega0_eigenvalues(self) -> MetricEigenvalues:
        return self._eig0

    @property
    def base_eigenvalues(self) -> MetricEigenvalues:
        return self._eigb

    @property
    def reference_eigenvalues(self) -> MetricEigenvalues:
        return self._eigref

    def far_field(self):
        """Eigenvalue ratios omega0/reference and base/reference at the last node."""
        e0, eb, er = self._eig0, self._eigb, self._eigref
        c = (float(e0.a[-1] / er.a[-1]), float(e0.b[-1] / er.b[-1]))
        beta = (float(eb.a[-1] / er.a[-1]), float(eb.b[-1] / er.b[-1]))
        return c, beta

    def with_mode(self, mode: str) -> "BackgroundFamily":
        return BackgroundFamily(mode, self.omega0, self.base, self.lam, self.reference, self.fmap)

    def with_omega0(self, omega0: RadialPotential) -> "BackgroundFamily":
        return BackgroundFamily(self.mode, omega0, self.base, self.lam, self.reference, self.fmap)


def family_at(bf: BackgroundFamily, t: float, eps: float) -> RadialPotential:
    """Potential of the background metric at time t and regularisation eps."""
    c0, cb = bf.coefficients(t, eps)
    return c0 * bf.omega0 + cb * bf.base


def domain_family(mode: str, omega0: RadialPotential, df: DefiningFunction) -> BackgroundFamily:
    if is_general(mode):
        raise ValueError("domain_family builds the unnormalized/normalized domain flows only")
    n = df.grid.n
    return BackgroundFamily(mode, omega0, background_metric(df), float(n + 1), fmap=cheng_yau_f(df, n))


def general_family(mode: str, omega0: RadialPotential, omega_M: RadialPotential) -> BackgroundFamily:
    """Background omega0 - t Ric(omega_M); requires Ric(omega_M) <= -C0 omega_M with C0 > 0."""
    if not is_general(mode):
        raise ValueError("general_family builds the general-background flows only")
    lo, _ = ricci_bounds(omega_M)
    if not lo > 0:
        raise InvalidPreset(f"omega_M must have Ric <= -C0 omega_M with C0 > 0; found C0 = {lo:.3g}")
    base = -ricci_potential(omega_M)
    # base is smooth in y for radial presets; carry its derivatives forward
    return BackgroundFamily(mode, omega0, base, 1.0, reference=omega_M)


# --- preset registry ---------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    name: str
    kind: str  # "domain", "metric" or "background"
    params: str
    description: str
    build: Callable


def _euclidean(grid, c=1.0):
    c = float(c)
    if not c > 0:
        raise InvalidPreset("euclidean(c) needs c > 0")
    return RadialPotential.from_rho_function(grid, lambda r: c * r, lambda r: c + 0 * r, lambda r: 0 * r)


def _quadratic(grid, a=1.0, b=0.0):
    a, b = float(a), float(b)
    if not a > 0 or b < 0:
        raise InvalidPreset("quadratic(a,b) needs a > 0 and b >= 0")
    return RadialPotential.from_rho_function(
        grid, lambda r: a * r + b * r**2, lambda r: a + 2 * b * r, lambda r: 2 * b + 0 * r
    )


def _hyperbolic(grid):
    # complex hyperbolic metric of the ball rho < R2: -log(1 - rho/R2) = y
    m = grid.m
    return RadialPotential(grid, grid.y.copy(), np.ones(m), np.zeros(m))


def _ball(grid, R=None):
    if R is not None and not math.isclose(float(R) ** 2, grid.R2, rel_tol=1e-12):
        raise InvalidPreset(f"ball({R}) does not match grid R2 = {grid.R2}")
    return ball(grid)


def _perturbed_ball(grid, a=0.5, R=None):
    if R is not None and not math.isclose(float(R) ** 2, grid.R2, rel_tol=1e-12):
        raise InvalidPreset(f"perturbed-ball(a,{R}) does not match grid R2 = {grid.R2}")
    if float(a) < 0:
        raise InvalidPreset("perturbed-ball(a,R) needs a >= 0")
    return perturbed_ball(grid, float(a))


PRESETS: Dict[str, Preset] = {
    p.name: p
    for p in [
        Preset("ball", "domain", "R > 0", "phi = rho - R^2", _ball),
        Preset("perturbed-ball", "domain", "a >= 0, R > 0", "phi = rho + a rho^2 - (R^2 + a R^4), same ball", _perturbed_ball),
        Preset("hyperbolic-bg", "background", "", "omega_M = -i dd-bar log(1 - |z|^2/R^2)", _hyperbolic),
        Preset("euclidean", "metric", "c > 0", "omega0 = c i dd-bar |z|^2 (incomplete)", _euclidean),
        Preset("quadratic", "metric", "a > 0, b >= 0", "omega0 = i dd-bar (a|z|^2 + b|z|^4) (incomplete)", _quadratic),
    ]
}

_PRESET_RE = re.compile(r"^\s*([a-z][a-z\-]*)\s*(?:\(([^)]*)\))?\s*$")


def parse_preset(spec: str):
    """'perturbed-ball(0.5, 1)' -> ('perturbed-ball', [0.5, 1.0])."""
    m = _PRESET_RE.match(spec)
    if not m:
        raise InvalidPreset(f"malformed preset {spec!r}")
    name, args = m.group(1), m.group(2)
    if name not in PRESETS:
        raise InvalidPreset(f"unknown preset {name!r}")
    values = []
    if args is not None and args.strip():
        for tok in args.split(","):
            try:
                values.append(float(tok))
            except ValueError:
                raise InvalidPreset(f"non-numeric parameter {tok.strip()!r} in {spec!r}") from None
    return name, values


def preset_radius(spec: str) -> Optional[float]:
    """Radius carried by a domain preset, if given."""
    name, args = parse_preset(spec)
    if name == "ball" and args:
        return args[0]
    if name == "perturbed-ball" and len(args) >= 2:
        return args[1]
    return None


def build_preset(spec: str, grid: RadialGrid, kind: Optional[str] = None):
    name, args = parse_preset(spec)
    preset = PRESETS[name]
    if kind is not None and preset.kind != kind:
        raise InvalidPreset(f"preset {name!r} is a {preset.kind} preset, expected {kind}")
    try:
        return preset.build(grid, *args)
    except TypeError:
        raise InvalidPreset(f"wrong number of parameters for {name}({preset.params})") from None


def list_presets() -> str:
    lines = []
    for p in PRESETS.values():
        sig = {"ball": "ball(R)", "perturbed-ball": "perturbed-ball(a,R)", "euclidean": "euclidean(c)",
               "quadratic": "quadratic(a,b)"}.get(p.name, p.name)
        rng = p.params or "no parameters"
        lines.append(f"{sig:<22} {p.kind:<11} {rng:<16} {p.description}")
    return "\n".join(lines)
