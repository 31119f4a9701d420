"""Backward-Euler solver for the radial complex Monge-Ampère flows.

All four flows share the form

    du/dt = log((omega_bg(t) + i dd-bar u)^n / omega_ref^n) + f - mu u,   u(0) = 0,

where omega_bg is the background family, omega_ref is Phi_bar (domains) or
omega_M (general background), f is the Cheng-Yau function or zero, and mu is
0 for the unnormalized flows and lambda for the normalized ones.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded
from scipy.special import xlogy

from .background import (
    BackgroundFamily,
    is_normalized,
    normalized_of,
)
from .radial_geometry import (
    MetricEigenvalues,
    d1,
    d2,
    laplacian_coefficients,
    log_volume_ratio,
)


class StepRejected(RuntimeError):
    def __init__(self, message: str, history: Optional[List[float]] = None):
        super().__init__(message)
        self.history = list(history or [])


class SolverFailure(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    dt_max: float = 0.01
    kappa: float = 0.1
    newton_tol: float = 1e-10
    newton_max_iter: int = 30
    horizon: float = 1.0
    max_halvings: int = 10

    def __post_init__(self):
        for name in ("dt_max", "kappa", "newton_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.horizon >= 0:
            raise ValueError(f"horizon must be nonnegative, got {self.horizon}")
        if self.newton_tol < 1e-13:
            raise ValueError("newton_tol below 1e-13 is not attainable in double precision")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be >= 1")

    def dt_at(self, t: float, eps: float) -> float:
        return min(self.dt_max, self.kappa * (t + eps))


@dataclass(frozen=True)
class FlowState:
    mode: str
    t: float
    eps: float
    u: np.ndarray
    udot: np.ndarray


@dataclass
class Trajectory:
    mode: str
    eps: float
    times: np.ndarray
    u: np.ndarray  # (snapshots, nodes)
    udot: np.ndarray
    family: Optional[BackgroundFamily] = field(default=None, repr=False)
    fingerprint: str = ""
    stats: Dict[str, float] = field(default_factory=dict)
    step_times: Optional[np.ndarray] = None  # every accepted step, starting at 0

    @property
    def grid(self):
        return self.family.grid

    def eigenvalues(self, k: int) -> MetricEigenvalues:
        """Metric eigenvalues of the flow solution at snapshot k."""
        return total_eigenvalues(self.family, self.times[k], self.eps, self.u[k])

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol * max(1.0, abs(t)):
            raise KeyError(f"no snapshot at t = {t}")
        return k


def total_eigenvalues(bf: BackgroundFamily, t: float, eps: float, u) -> MetricEigenvalues:
    g = bf.grid
    ub = bf.eigenvalues(t, eps)
    uy = d1(u, g.h)
    uyy = d2(u, g.h)
    return MetricEigenvalues(g, ub.a + uy, ub.b + g.R2 * uy + g.rho * uyy)


def rhs(state: FlowState, bf: BackgroundFamily, fmap=None) -> np.ndarray:
    """Right-hand side of the Monge-Ampère flow at ``state``.

    Raises ``StepRejected`` if the metric is not positive.
    """
    fmap = bf.fmap if fmap is None else fmap
    eig = total_eigenvalues(bf, state.t, state.eps, state.u)
    if not eig.is_positive():
        bad = int(np.flatnonzero(~((eig.a > 0) & (eig.b > 0)))[0])
        raise StepRejected(f"metric not positive at node {bad}")
    return log_volume_ratio(eig, bf.reference_eigenvalues) + fmap - bf.zeroth_order * np.asarray(state.u)


def _log_integral(t: float, c: float, slope: float, shift: float) -> float:
    """Integral over [0, t] of log(c + slope (s + shift)) ds."""
    if slope == 0:
        return t * math.log(c)
    x0 = c + slope * shift
    x1 = c + slope * (t + shift)
    F = lambda x: float(xlogy(x, x)) - x
    return (F(x1) - F(x0)) / slope


def boundary_value(
    mode: str,
    t: float,
    eps: float,
    lam: float,
    f_bdry: float = 0.0,
    c_bdry=0.0,
    n: int = 2,
    beta=1.0,
) -> float:
    """Far-field value of the flow potential.

    Near the boundary i dd-bar u is negligible against the background, so the
    potential there solves the ODE du/dt = sum_k log(c_k + lam beta_k (t + eps))
    + f_bdry (unnormalized), with c_k and beta_k the eigenvalue ratios of omega0
    and of the base metric to the reference metric.  The normalized flows are
    obtained from the same closed form through the time/scale change
    u_nor(t) = e^{-lam t} u(s) - n t + n (1 - e^{-lam t}) / lam,
    s = (e^{lam t} - 1) / lam.
    """
    c = (c_bdry, c_bdry) if np.isscalar(c_bdry) else tuple(c_bdry)
    b = (beta, beta) if np.isscalar(beta) else tuple(beta)
    mult = (n - 1, 1)
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0.0

    def unnormalized(s):
        return sum(mk * _log_integral(s, ck, lam * bk, eps) for mk, ck, bk in zip(mult, c, b)) + s * f_bdry

    if not is_normalized(mode):
        return unnormalized(t)
    if math.isinf(t):
        return (sum(mk * math.log(bk) for mk, bk in zip(mult, b)) + f_bdry) / lam
    s = math.expm1(lam * t) / lam
    return math.exp(-lam * t) * unnormalized(s) - n * t - n * math.expm1(-lam * t) / lam


def family_boundary_value(bf: BackgroundFamily, t: float, eps: float) -> float:
    """Continuous-time far-field value for a background family."""
    c, beta = bf.far_field()
    return boundary_value(bf.mode, t, eps, bf.lam, float(bf.fmap[-1]), c, bf.n, beta)


def _jacobian_banded(p, q, h, scale, shift):
    """Banded (1,1) form of shift I - scale (p D1 + q D2), Dirichlet last row.

    Row 0 carries the one-sided stencil (0, 1, 2); its entry in column 2 is
    eliminated against row 1 so the system stays tridiagonal.  Returns the
    banded matrix and the multiplier needed to apply the same row operation
    to the right-hand side.
    """
    m = p.size
    sub = np.zeros(m)  # J[i, i-1]
    diag = np.zeros(m)
    sup = np.zeros(m)  # J[i, i+1]
    c1, c2 = 1.0 / (2 * h), 1.0 / h**2
    diag[1:-1] = shift + scale * 2 * q[1:-1] * c2
    sub[1:-1] = -scale * (-p[1:-1] * c1 + q[1:-1] * c2)
    sup[1:-1] = -scale * (p[1:-1] * c1 + q[1:-1] * c2)
    # node 0: q[0] = 0, D1 one-sided
    j00 = shift - scale * p[0] * (-3 * c1)
    j01 = -scale * p[0] * (4 * c1)
    j02 = -scale * p[0] * (-1 * c1)
    mult = j02 / sup[1]
    diag[0] = j00 - mult * sub[1]
    sup[0] = j01 - mult * diag[1]
    diag[-1] = 1.0
    ab = np.zeros((3, m))
    ab[0, 1:] = sup[:-1]
    ab[1] = diag
    ab[2, :-1] = sub[1:]
    return ab, mult


def _newton(residual, jac, u0, tol, max_iter):
    """Damped Newton with residual-halving line search.

    ``residual`` returns None when the iterate is inadmissible.
    Returns (u, residual_norm, iterations, history).
    """
    u = u0
    F = residual(u)
    if F is None:
        raise StepRejected("initial iterate is not admissible")
    norm = float(np.max(np.abs(F)))
    history = [norm]
    for it in range(1, max_iter + 1):
        if norm <= tol:
            return u, norm, it - 1, history
        delta = jac(u, F)
        alpha = 1.0
        for _ in range(30):
            trial = u + alpha * delta
            Ft = residual(trial)
            if Ft is not None:
                nt = float(np.max(np.abs(Ft)))
                if nt < norm or nt <= tol:
                    break
            alpha *= 0.5
        else:
            raise StepRejected(f"line search failed at residual {norm:.3e}", history)
        u, F, norm = trial, Ft, nt
        history.append(norm)
    if norm <= tol:
        return u, norm, max_iter, history
    raise StepRejected(f"Newton did not converge: residual {norm:.3e} after {max_iter} iterations", history)


def step(state: FlowState, bf: BackgroundFamily, fmap=None, cfg: SolverConfig = SolverConfig(), dt: Optional[float] = None) -> FlowState:
    """One backward-Euler step solved by damped Newton."""
    fmap = bf.fmap if fmap is None else fmap
    g = bf.grid
    if dt is None:
        dt = cfg.dt_at(state.t, state.eps)
    t1 = state.t + dt
    mu = bf.zeroth_order
    u_prev = np.asarray(state.u, dtype=float)
    bg = bf.eigenvalues(t1, state.eps)
    ref = bf.reference_eigenvalues
    lv_ref = (g.n - 1) * np.log(ref.a) + np.log(ref.b)
    # far-field ODE (i dd-bar u negligible at the last node), advanced by the
    # same backward-Euler step as the interior so no time-discretization
    # mismatch builds up next to the cutoff
    far_rate = (g.n - 1) * math.log(bg.a[-1]) + math.log(bg.b[-1]) - lv_ref[-1] + fmap[-1]
    ub = (u_prev[-1] + dt * far_rate) / (1 + dt * mu)
    R2, rho, h = g.R2, g.rho, g.h
    cache = {}

    def residual(u):
        uy = d1(u, h)
        a = bg.a + uy
        b = bg.b + R2 * uy + rho * d2(u, h)
        if np.any(a <= 0) or np.any(b <= 0):
            return None
        r = (g.n - 1) * np.log(a) + np.log(b) - lv_ref + fmap - mu * u
        cache["eig"] = (a, b)
        cache["rhs"] = r
        F = u - u_prev - dt * r
        F[-1] = u[-1] - ub
        return F

    def jac(u, F):
        a, b = cache["eig"]
        p, q = laplacian_coefficients(MetricEigenvalues(g, a, b), g.n)
        ab, mult = _jacobian_banded(p, q, h, dt, 1 + dt * mu)
        rhs_vec = -F.copy()
        rhs_vec[0] -= mult * rhs_vec[1]
        return solve_banded((1, 1), ab, rhs_vec)

    guess = u_prev + dt * np.asarray(state.udot)
    guess[-1] = ub
    if residual(guess) is None:
        # a stale or missing udot: predict with the current right-hand side
        guess = u_prev + dt * rhs(state, bf, fmap)
        guess[-1] = ub
    u1, _, iters, _ = _newton(residual, jac, guess, cfg.newton_tol, cfg.newton_max_iter)
    residual(u1)
    udot = cache["rhs"].copy()
    udot[-1] = (u1[-1] - u_prev[-1]) / dt
    return FlowState(state.mode, t1, state.eps, u1, udot)


def initial_state(bf: BackgroundFamily, eps: float, u0=None) -> FlowState:
    g = bf.grid
    u = np.zeros(g.m) if u0 is None else np.asarray(u0, dtype=float).copy()
    st = FlowState(bf.mode, 0.0, eps, u, np.zeros(g.m))
    return replace(st, udot=rhs(st, bf))


def run(
    bf: BackgroundFamily,
    eps: float,
    cfg: SolverConfig,
    output_times: Optional[Sequence[float]] = None,
    record_all: bool = False,
    u0=None,
    fingerprint: str = "",
) -> Trajectory:
    """Integrate the flow on [0, cfg.horizon].

    Snapshots are taken at ``output_times`` (hit exactly), plus every
    accepted step when ``record_all`` is set.  The first snapshot is t = 0.
    """
    if eps <= 0:
        raise ValueError("the parabolic solver needs eps > 0; eps -> 0 is reached through a ladder")
    T = float(cfg.horizon)
    targets = sorted({float(t) for t in (() if output_times is None else output_times) if 0 < t <= T} | ({T} if T > 0 else set()))
    state = initial_state(bf, eps, u0)
    times, us, udots = [0.0], [state.u.copy()], [state.udot.copy()]
    step_times = [0.0]
    n_steps = 0
    n_halvings = 0
    ti = 0
    while ti < len(targets):
        target = targets[ti]
        dt = cfg.dt_at(state.t, eps)
        if state.t + dt >= target - 1e-12 * max(1.0, target):
            dt = target - state.t
        halvings = 0
        while True:
            try:
                new = step(state, bf, cfg=cfg, dt=dt)
                break
            except StepRejected as exc:
                halvings += 1
                n_halvings += 1
                if halvings > cfg.max_halvings:
                    raise SolverFailure(
                        f"step from t = {state.t:.6g} failed after {cfg.max_halvings} halvings: {exc}",
                        {"t": state.t, "dt": dt, "eps": eps, "mode": bf.mode, "reason": str(exc), "steps": n_steps},
                    ) from exc
                dt *= 0.5
        n_steps += 1
        state = new
        hit = abs(state.t - target) <= 1e-12 * max(1.0, target)
        if hit:
            state = replace(state, t=target)
            ti += 1
        step_times.append(state.t)
        if hit or record_all:
            times.append(state.t)
            us.append(state.u.copy())
            udots.append(state.udot.copy())
    return Trajectory(
        bf.mode, eps, np.array(times), np.array(us), np.array(udots), bf, fingerprint,
        {"steps": n_steps, "halvings": n_halvings}, np.array(step_times),
    )


@dataclass
class Continuation:
    ladder: List[float]
    trajectories: List[Trajectory]
    deltas: List[float]


def ladder_deltas(trajectories: Sequence[Trajectory]) -> List[float]:
    """sup over common snapshot times and nodes of |u_{eps_k} - u_{eps_{k+1}}|."""
    deltas = []
    for A, B in zip(trajectories[:-1], trajectories[1:]):
        common = np.intersect1d(np.round(A.times, 12), np.round(B.times, 12))
        ia = [A.index_of(t) for t in common]
        ib = [B.index_of(t) for t in common]
        deltas.append(float(np.max(np.abs(A.u[ia] - B.u[ib]))))
    return deltas


def epsilon_continuation(
    bf: BackgroundFamily,
    eps_ladder: Sequence[float],
    cfg: SolverConfig,
    output_times: Optional[Sequence[float]] = None,
) -> Continuation:
    ladder = [float(e) for e in eps_ladder]
    if not ladder:
        raise ValueError("empty eps ladder")
    if any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("eps ladder must be positive and strictly decreasing")
    trajs = [run(bf, e, cfg, output_times) for e in ladder]
    return Continuation(ladder, trajs, ladder_deltas(trajs))


def normalized_to_unnormalized_time(t, lam: float):
    """s = (e^{lam t} - 1) / lam."""
    return np.expm1(lam * np.asarray(t, dtype=float)) / lam


def rescale_to_normalized(traj: Trajectory, times: Sequence[float], n: Optional[int] = None) -> List[MetricEigenvalues]:
    """Normalized-flow metric eigenvalues obtained from an unnormalized trajectory.

    omega_nor(t) = e^{-lam t} omega(s) with s = (e^{lam t} - 1) / lam; the
    potential is interpolated cubically in time between snapshots.
    """
    if is_normalized(traj.mode):
        raise ValueError("rescaling starts from an unnormalized trajectory")
    bf = traj.family
    lam = bf.lam
    s_req = normalized_to_unnormalized_time(times, lam)
    if np.any(s_req > traj.times[-1] * (1 + 1e-12)) or np.any(s_req < 0):
        raise OutOfRange(f"requested times map beyond the unnormalized horizon {traj.times[-1]:g}")
    spline = CubicSpline(traj.times, traj.u, axis=0)
    out = []
    for t, s in zip(np.atleast_1d(times), s_req):
        s = min(float(s), float(traj.times[-1]))
        eig = total_eigenvalues(bf, s, traj.eps, spline(s))
        out.append(eig.scaled(math.exp(-lam * t)))
    return out


def normalized_family(bf: BackgroundFamily) -> BackgroundFamily:
    return bf.with_mode(normalized_of(bf.mode))


def fingerprint_of(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
