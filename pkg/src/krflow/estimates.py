"""Checks of the a-priori estimates along computed trajectories.

Each check produces a :class:`Check` record with a status (pass, fail or
not-applicable), a margin, the discretization slack that was granted, and a
human-readable detail.  Estimates whose constants are only known to exist are
validated as functional-form envelopes: the constant is computed from the
trajectory and reported, and the check fails only if the compensated quantity
is not finite or a fitted envelope is violated beyond the fixed slack.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad

from .background import (
    DefiningFunction,
    comparison_constant,
    cy_identity_residual,
    family_at,
    is_general,
    is_normalized,
    ricci_bounds,
)
from .flow import Continuation, Trajectory
from .oracle import KESolution, ke_residual
from .radial_geometry import (
    MetricEigenvalues,
    curvature_components,
    geodesic_length_profile,
    log_volume_ratio,
)

PASS, FAIL, NOT_APPLICABLE = "pass", "fail", "not-applicable"

UNNORMALIZED_CHECKS = ("C0", "C0-precise", "time-dev-upper", "time-dev-lower", "C2", "trace-bound", "schwarz")
GENERAL_UNNORMALIZED_CHECKS = ("general-C0", "general-time-dev", "general-C2")
NORMALIZED_CHECKS = ("C0-nor", "time-dev-nor-upper", "time-dev-nor-lower", "C2-nor")
GENERAL_NORMALIZED_CHECKS = ("C0-general-nor", "time-dev-decay", "C2-general-nor")
STRUCTURAL_CHECKS = (
    "rescaling",
    "eps-cauchy",
    "eps-uniqueness",
    "ke-convergence",
    "defining-function-independence",
    "dirichlet-audit",
)
GEOMETRY_CHECKS = ("completeness", "curvature-asymptote", "cy-identity")

LENGTH_PROBE_TIMES = (0.1, 0.5, 1.0)

MANIFEST = frozenset(
    UNNORMALIZED_CHECKS
    + GENERAL_UNNORMALIZED_CHECKS
    + NORMALIZED_CHECKS
    + GENERAL_NORMALIZED_CHECKS
    + STRUCTURAL_CHECKS
    + GEOMETRY_CHECKS
)


@dataclass
class Check:
    name: str
    status: str
    margin: float
    detail: str = ""
    slack: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status != FAIL


def _json_number(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")


@dataclass
class EstimateReport:
    checks: List[Check] = field(default_factory=list)
    fingerprint: str = ""
    constants: Dict[str, float] = field(default_factory=dict)

    def add(self, check: Check):
        if any(c.name == check.name for c in self.checks):
            raise ValueError(f"check {check.name!r} already present")
        self.checks.append(check)

    def merge(self, other: "EstimateReport") -> "EstimateReport":
        for c in other.checks:
            self.add(c)
        self.constants.update(other.constants)
        return self

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.checks]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "constants": {k: _json_number(v) for k, v in sorted(self.constants.items())},
            "checks": [
                {
                    "name": c.name,
                    "status": c.status,
                    "margin": _json_number(c.margin),
                    "slack": _json_number(c.slack),
                    "detail": c.detail,
                }
                for c in self.checks
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        w = max([len(c.name) for c in self.checks] + [5])
        lines = [f"fingerprint {self.fingerprint}", f"{'check':<{w}}  {'status':<14}  {'margin':>12}  {'slack':>10}  detail"]
        for c in self.checks:
            lines.append(f"{c.name:<{w}}  {c.status:<14}  {c.margin:>12.5g}  {c.slack:>10.3g}  {c.detail}")
        if self.constants:
            lines.append("")
            lines.append("constants")
            for k, v in sorted(self.constants.items()):
                lines.append(f"  {k:<28} {v:.6g}")
        return "\n".join(lines) + "\n"


def worst_of(reports: Sequence[EstimateReport], labels: Sequence[str]) -> EstimateReport:
    """Combine per-trajectory reports: the worst status wins, margins take the minimum."""
    rank = {FAIL: 2, PASS: 1, NOT_APPLICABLE: 0}
    out = EstimateReport(fingerprint=reports[0].fingerprint if reports else "")
    if not reports:
        return out
    for name in reports[0].names:
        recs = [(r.get(name), lab) for r, lab in zip(reports, labels)]
        worst, lab = max(recs, key=lambda p: (rank[p[0].status], -p[0].margin if math.isfinite(p[0].margin) else 0))
        applicable = [c.margin for c, _ in recs if c.status != NOT_APPLICABLE]
        margin = min(applicable) if applicable else worst.margin
        slack = max(c.slack for c, _ in recs)
        out.add(Check(name, worst.status, margin, f"[{lab}] {worst.detail}", slack))
    for r, lab in zip(reports, labels):
        for k, v in r.constants.items():
            out.constants[f"{k}@{lab}"] = v
    return out


@dataclass
class CheckContext:
    """Scenario data the trajectory checks need beyond the trajectory itself."""

    df: Optional[DefiningFunction] = None
    t0: float = 0.5
    schwarz_tol: float = 1e-2
    fit_slack: float = 0.2
    newton_tol: float = 1e-10
    extended: Optional[Trajectory] = None  # same run on a grid extended by 2 in y


# --- helpers -----------------------------------------------------------------

def _where(mask_or_values: np.ndarray, times) -> Tuple[int, float]:
    """(node, time) of the largest entry of a (snapshot, node) array."""
    k, i = np.unravel_index(int(np.argmax(mask_or_values)), mask_or_values.shape)
    return int(i), float(np.asarray(times)[k])


def _window(traj: Trajectory, lo: float, hi: float = math.inf) -> np.ndarray:
    return np.flatnonzero((traj.times >= lo - 1e-12) & (traj.times <= hi + 1e-12) & (traj.times > 0))


def first_reliable_time(traj: Trajectory, steps: int = 10) -> float:
    """Time of the first snapshot taken after the given number of accepted steps."""
    st = traj.step_times
    if st is None or len(st) <= steps:
        return float(traj.times[-1]) if len(traj.times) > 1 else math.inf
    t_cut = st[steps]
    later = traj.times[traj.times >= t_cut - 1e-12]
    return float(later[0]) if later.size else math.inf


def _eigs(traj: Trajectory) -> List[MetricEigenvalues]:
    return [traj.eigenvalues(k) for k in range(len(traj.times))]


def _ratios(eigs: Sequence[MetricEigenvalues], ref: MetricEigenvalues, idx) -> np.ndarray:
    """(snapshot, 2, node) array of eigenvalue ratios against ``ref``."""
    return np.array([[eigs[k].a / ref.a, eigs[k].b / ref.b] for k in idx])


def envelope(rate, mu: float, step_times: np.ndarray, at_times: np.ndarray):
    """Exact and backward-Euler values of v' = rate(t) - mu v, v(0) = 0.

    Returns (exact, discrete) evaluated at ``at_times`` (which must be among
    the step times).  The difference between the two is the time-discretization
    slack granted to comparison-principle brackets.
    """
    exact = np.array([
        quad(lambda s, t=t: math.exp(-mu * (t - s)) * rate(s), 0.0, t, limit=200)[0] if t > 0 else 0.0
        for t in at_times
    ])
    st = np.asarray(step_times, dtype=float)
    v = np.zeros(st.size)
    for k in range(1, st.size):
        dt = st[k] - st[k - 1]
        v[k] = (v[k - 1] + dt * rate(st[k])) / (1 + dt * mu)
    idx = [int(np.argmin(np.abs(st - t))) for t in at_times]
    return exact, v[idx]


def _time_slack(exact: np.ndarray, discrete: np.ndarray) -> np.ndarray:
    """Running maximum of |exact - discrete| along the snapshots.

    Interior nodes follow the backward-Euler envelope while the Dirichlet node
    follows the exact one, and a deficit created at an earlier time can still
    be present later, so the slack at t covers every earlier time as well.
    """
    return np.maximum.accumulate(np.abs(exact - discrete))


def _bracket_check(name, traj, lower, upper, slack_lo, slack_hi, tol) -> Check:
    u = traj.u
    lo_gap = u - (lower[:, None] - slack_lo[:, None] - tol)
    hi_gap = (upper[:, None] + slack_hi[:, None] + tol) - u
    margin = float(min(lo_gap.min(), hi_gap.min()))
    slack = float(max(slack_lo.max(), slack_hi.max()))
    if lo_gap.min() < 0:
        i, t = _where(-lo_gap, traj.times)
        return Check(name, FAIL, margin, f"lower bracket violated at node {i}, t = {t:.6g}", slack)
    if hi_gap.min() < 0:
        i, t = _where(-hi_gap, traj.times)
        return Check(name, FAIL, margin, f"upper bracket violated at node {i}, t = {t:.6g}", slack)
    k = int(np.argmax(traj.times))
    return Check(
        name, PASS, margin,
        f"at t = {traj.times[k]:.6g}: {lower[k]:.6g} <= u <= {upper[k]:.6g} (center {u[k, 0]:.6g})", slack,
    )


def _bounded(name, values: np.ndarray, times, what: str, idx=None) -> Check:
    """Pass when a compensated quantity is finite; margin is its maximum."""
    if values.size == 0:
        return Check(name, NOT_APPLICABLE, math.nan, f"no snapshots in the window for {what}")
    if not np.all(np.isfinite(values)):
        bad = ~np.isfinite(values)
        i, t = _where(bad.astype(float), times)
        return Check(name, FAIL, math.inf, f"{what} not finite at node {i}, t = {t:.6g}")
    c = float(values.max())
    return Check(name, PASS, c, f"{what} <= {c:.6g}")


def _equivalence(name, eigs, ref, idx, times, what) -> Tuple[Check, float, float]:
    if len(idx) == 0:
        return Check(name, NOT_APPLICABLE, math.nan, "no snapshots in the window"), math.nan, math.nan
    r = _ratios(eigs, ref, idx)
    lo, hi = float(r.min()), float(r.max())
    if not (np.all(np.isfinite(r)) and lo > 0):
        flat = np.where(np.isfinite(r), r, -1.0).min(axis=1)
        i, t = _where(-flat, np.asarray(times)[idx])
        return Check(name, FAIL, lo, f"{what} eigenvalue ratio not positive/finite at node {i}, t = {t:.6g}"), lo, hi
    c = max(hi, 1.0 / lo)
    return Check(name, PASS, c, f"{lo:.4g} {what} <= omega <= {hi:.4g} {what}"), lo, hi


def _trajectory_fmap(traj: Trajectory) -> np.ndarray:
    return np.asarray(traj.family.fmap)


# --- unnormalized ------------------------------------------------------------

def check_apriori_unnormalized(traj: Trajectory, ctx: CheckContext = CheckContext()) -> EstimateReport:
    """C0 brackets, time-derivative bounds, metric equivalence, trace bound and Schwarz lemma."""
    if is_normalized(traj.mode):
        raise ValueError("check_apriori_unnormalized needs an unnormalized trajectory")
    bf = traj.family
    g, n, lam, eps = bf.grid, bf.n, bf.lam, traj.eps
    general = is_general(traj.mode)
    rep = EstimateReport(fingerprint=traj.fingerprint)
    ref = bf.reference_eigenvalues
    eigs = _eigs(traj)
    times = traj.times
    t_min = first_reliable_time(traj)
    T = float(times[-1])
    tol = 10 * ctx.newton_tol
    st = traj.step_times if traj.step_times is not None else times

    # C0 bracket from the comparison principle
    c = comparison_constant(bf.omega0_eigenvalues, ref)
    lo_b, hi_b = 1.0, 1.0
    if general:
        # base = -Ric(omega_M): eigenvalue ratios to omega_M are the Ricci bounds
        ra, rb = bf.base_eigenvalues.ratio_to(ref)
        lo_b, hi_b = float(min(ra.min(), rb.min())), float(max(ra.max(), rb.max()))
    fmap = _trajectory_fmap(traj)
    f_inf, f_sup = float(fmap.min()), float(fmap.max())
    rep.constants.update({"c": c, "inf_f": f_inf, "sup_f": f_sup})
    if general:
        rep.constants.update({"ricci_lower": lo_b, "ricci_upper": hi_b})
    lower_rate = lambda s: n * math.log(lam * lo_b * (s + eps)) + f_inf
    upper_rate = lambda s: n * math.log(c + lam * hi_b * (s + eps)) + f_sup
    lo_exact, lo_disc = envelope(lower_rate, 0.0, st, times)
    hi_exact, hi_disc = envelope(upper_rate, 0.0, st, times)
    slack_lo = _time_slack(lo_exact, lo_disc)
    slack_hi = _time_slack(hi_exact, hi_disc)
    bracket = _bracket_check("general-C0" if general else "C0-precise", traj, lo_exact, hi_exact, slack_lo, slack_hi, tol)

    win = _window(traj, t_min)
    udot = traj.udot
    upper_td = (times[win, None] * np.maximum(udot[win] - n, 0.0)) if win.size else np.zeros((0, g.m))
    lower_td = np.maximum(n * np.log(times[win, None]) - udot[win], 0.0) if win.size else np.zeros((0, g.m))

    if general:
        rep.add(bracket if T > 0 else Check(bracket.name, NOT_APPLICABLE, bracket.margin, "horizon T = 0: only the initial snapshot"))
        td_up = _bounded("general-time-dev", upper_td, times[win], "t (udot - n)_+")
        td_lo = _bounded("general-time-dev", lower_td, times[win], "(n log t - udot)_+")
        if td_up.status == FAIL or td_lo.status == FAIL:
            rep.add(td_up if td_up.status == FAIL else td_lo)
        else:
            rep.add(Check("general-time-dev", td_up.status, max(td_up.margin, td_lo.margin) if win.size else math.nan,
                          f"C2 = {td_up.margin:.4g}, C1 = {td_lo.margin:.4g}"))
        if win.size:
            rep.constants.update({"time_dev_C2": td_up.margin, "time_dev_C1": td_lo.margin})
        chk, _, _ = _equivalence("general-C2", eigs, ref, _window(traj, 0.0), times, "omega_M")
        rep.add(chk)
        return rep

    if T <= 0:
        rep.add(Check("C0", NOT_APPLICABLE, 0.0, "horizon T = 0: only the initial snapshot"))
        rep.add(Check("C0-precise", NOT_APPLICABLE, bracket.margin, "horizon T = 0: only the initial snapshot"))
    else:
        sup_u = float(np.max(np.abs(traj.u)))
        rep.add(Check("C0", PASS if np.isfinite(sup_u) else FAIL, sup_u, f"sup |u| = {sup_u:.6g} on [0, {T:g}]"))
        rep.add(bracket)
    chk = _bounded("time-dev-upper", upper_td, times[win], "t (udot - n)_+")
    rep.add(chk)
    if chk.status == PASS:
        rep.constants["time_dev_C2"] = chk.margin
    chk = _bounded("time-dev-lower", lower_td, times[win], "(n log t - udot)_+")
    rep.add(chk)
    if chk.status == PASS:
        rep.constants["time_dev_C1"] = chk.margin

    chk, lo, hi = _equivalence("C2", eigs, ref, _window(traj, 0.0), times, "omega_bar")
    rep.add(chk)
    if chk.status == PASS:
        rep.constants.update({"C3_min": lo, "C4_max": hi})

    # trace bound tr_omega omega_bar <= e^{C/t} on [t_min, 1]
    win1 = _window(traj, t_min, 1.0)
    if win1.size:
        tr = np.array([(n - 1) * ref.a / eigs[k].a + ref.b / eigs[k].b for k in win1])
        vals = times[win1, None] * np.log(tr)
        chk = _bounded("trace-bound", vals, times[win1], "t log tr_omega(omega_bar)")
        if chk.status == PASS:
            rep.constants["trace_C"] = chk.margin
        rep.add(chk)
    else:
        rep.add(Check("trace-bound", NOT_APPLICABLE, math.nan, "no snapshots in [t_min, 1]"))

    rep.add(_schwarz(traj, eigs, ref, n, ctx))
    return rep


def schwarz_constant(reference_potential) -> float:
    """Largest C with Ric <= -C omega for the comparison metric."""
    lo, _ = ricci_bounds(reference_potential)
    return lo


def _schwarz(traj, eigs, ref, n, ctx) -> Check:
    C = schwarz_constant(traj.family.reference)
    if not C > 0:
        return Check("schwarz", NOT_APPLICABLE, math.nan, f"comparison metric has Ric <= -C with C = {C:.4g} <= 0")
    idx = _window(traj, 0.0, 1.0)
    if idx.size == 0:
        return Check("schwarz", NOT_APPLICABLE, math.nan, f"C = {C:.6g}; no snapshots in (0, 1]")
    worst, where = math.inf, (0, 0.0)
    for k in idx:
        t = traj.times[k]
        ratio = np.exp(log_volume_ratio(eigs[k], ref, n))
        q = ratio / (C * t) ** n
        i = int(np.argmin(q))
        if q[i] < worst:
            worst, where = float(q[i]), (i, float(t))
    margin = worst - (1 - ctx.schwarz_tol)
    detail = f"C = {C:.6g}; min det ratio / (Ct)^n = {worst:.6g} at node {where[0]}, t = {where[1]:.6g}"
    return Check("schwarz", PASS if margin >= 0 else FAIL, margin, detail, ctx.schwarz_tol)


# --- normalized --------------------------------------------------------------

def _above_noise(M: np.ndarray, ctx: CheckContext) -> np.ndarray:
    """Zero out values of udot that are indistinguishable from the Newton residual."""
    return np.where(M > 10 * ctx.newton_tol, M, 0.0)


def fit_domain_decay(times: np.ndarray, M: np.ndarray, lam: float) -> float:
    """Least-squares C2 in log M = log C2 + log t - lam t (unit slope fixed)."""
    pos = M > 0
    if not np.any(pos):
        return 0.0
    r = np.log(M[pos]) - (np.log(times[pos]) - lam * times[pos])
    return float(math.exp(r.mean()))


def fit_power_law(times: np.ndarray, M: np.ndarray) -> Tuple[float, float]:
    """Least-squares (alpha, beta) in log M = alpha log t + beta over positive M."""
    pos = M > 0
    if np.count_nonzero(pos) < 2:
        return 0.0, -math.inf
    alpha, beta = np.polyfit(np.log(times[pos]), np.log(M[pos]), 1)
    return float(alpha), float(beta)


def check_apriori_normalized(traj: Trajectory, ctx: CheckContext = CheckContext()) -> EstimateReport:
    """Uniform bounds and decay rates of the normalized flows on [t0, T]."""
    if not is_normalized(traj.mode):
        raise ValueError("check_apriori_normalized needs a normalized trajectory")
    bf = traj.family
    n, lam, eps = bf.n, bf.lam, traj.eps
    general = is_general(traj.mode)
    rep = EstimateReport(fingerprint=traj.fingerprint)
    times = traj.times
    T = float(times[-1])
    win = _window(traj, ctx.t0)
    eigs = _eigs(traj)
    ref = bf.reference_eigenvalues
    long_enough = T >= 3.0

    if general:
        if win.size:
            cu = float(np.max(np.abs(traj.u[win])))
            cd = float(np.max(np.abs(traj.udot[win])))
            C = max(cu, cd)
            ok = math.isfinite(C)
            rep.add(Check("C0-general-nor", PASS if ok else FAIL, C,
                          f"sup |u| = {cu:.6g}, sup |udot| = {cd:.6g} on [{ctx.t0:g}, {T:g}]"))
            rep.constants["C0_general_nor"] = C
        else:
            rep.add(Check("C0-general-nor", NOT_APPLICABLE, math.nan, f"no snapshots after t0 = {ctx.t0:g}"))
        rep.add(_decay_general(traj, win, ctx, rep.constants) if long_enough else
                Check("time-dev-decay", NOT_APPLICABLE, math.nan, f"horizon {T:g} < 3"))
        chk, _, _ = _equivalence("C2-general-nor", eigs, ref, win, times, "omega_M")
        rep.add(chk)
        if chk.status == PASS:
            rep.constants["C3_general_nor"] = chk.margin
        return rep

    # explicit envelope of the normalized C0 bound, with the same c
    c = comparison_constant(bf.omega0_eigenvalues, ref)
    fabs = float(np.max(np.abs(_trajectory_fmap(traj))))
    rep.constants.update({"c": c, "sup_abs_f": fabs})
    coef = lambda s: bf.coefficients(s, eps)
    lower_rate = lambda s: n * math.log(coef(s)[1])
    upper_rate = lambda s: n * math.log(c * coef(s)[0] + coef(s)[1])
    st = traj.step_times if traj.step_times is not None else times
    lo_exact, lo_disc = envelope(lower_rate, lam, st, times)
    hi_exact, hi_disc = envelope(upper_rate, lam, st, times)
    fterm = (1 + np.exp(-lam * times)) * fabs
    slack_lo = _time_slack(lo_exact, lo_disc)
    slack_hi = _time_slack(hi_exact, hi_disc)
    br = _bracket_check("C0-nor", traj, lo_exact - fterm, hi_exact + fterm, slack_lo, slack_hi, 10 * ctx.newton_tol)
    if win.size:
        C = float(np.max(np.abs(traj.u[win])))
        rep.constants["C0_nor"] = C
        if br.status == PASS:
            br = Check("C0-nor", PASS, C, f"sup |u| on [{ctx.t0:g}, {T:g}] = {C:.6g}; envelope holds at every snapshot", br.slack)
    if T <= 0:
        br = Check("C0-nor", NOT_APPLICABLE, br.margin, "horizon T = 0: only the initial snapshot")
    rep.add(br)

    if long_enough and win.size:
        M = _above_noise(np.max(traj.udot[win], axis=1), ctx)
        tw = times[win]
        C2 = fit_domain_decay(tw, M, lam)
        rep.constants["decay_C2"] = C2
        env = C2 * tw * np.exp(-lam * tw)
        if C2 == 0.0:
            rep.add(Check("time-dev-nor-upper", PASS, math.inf, "udot <= 0 throughout the window"))
        else:
            q = np.where(M > 0, M / env, 0.0)
            k = int(np.argmax(q))
            margin = (1 + ctx.fit_slack) - float(q[k])
            status = PASS if margin >= 0 else FAIL
            node = int(np.argmax(traj.udot[win[k]]))
            rep.add(Check("time-dev-nor-upper", status, margin,
                          f"fitted C2 = {C2:.4g}; max udot / (C2 t e^(-lam t)) = {q[k]:.4f} at node {node}, t = {tw[k]:.6g}",
                          ctx.fit_slack))
        C1 = float(max(0.0, -np.min(traj.udot[win])))
        rep.constants["decay_C1"] = C1
        rep.add(Check("time-dev-nor-lower", PASS if math.isfinite(C1) else FAIL, C1, f"udot >= -{C1:.6g} on [{ctx.t0:g}, {T:g}]"))
    else:
        why = f"horizon {T:g} < 3" if not long_enough else "empty window"
        rep.add(Check("time-dev-nor-upper", NOT_APPLICABLE, math.nan, why))
        rep.add(Check("time-dev-nor-lower", NOT_APPLICABLE, math.nan, why))

    chk, _, _ = _equivalence("C2-nor", eigs, ref, win, times, "omega_bar")
    rep.add(chk)
    if chk.status == PASS:
        rep.constants["C3_nor"] = chk.margin
    return rep


def _decay_general(traj, win, ctx, constants) -> Check:
    tw = traj.times[win]
    M = np.exp(tw) * _above_noise(np.max(traj.udot[win], axis=1), ctx)
    if not np.any(M > 0):
        return Check("time-dev-decay", PASS, math.inf, "udot <= 0 throughout the window")
    alpha, beta = fit_power_law(tw, M)
    C1, C2 = np.polyfit(tw, M, 1)
    constants.update({"decay_alpha": alpha, "decay_C1": float(C1), "decay_C2": float(C2)})
    env = math.exp(beta) * tw**alpha
    q = np.where(M > 0, M / env, 0.0)
    k = int(np.argmax(q))
    over = float(q[k]) - 1
    growth_ok = alpha <= 1 + ctx.fit_slack
    margin = min(ctx.fit_slack - over, 1 + ctx.fit_slack - alpha)
    node = int(np.argmax(traj.udot[win[k]]))
    detail = (f"fit e^t udot ~ {math.exp(beta):.4g} t^{alpha:.3f}; linear fit C1 = {C1:.4g}, C2 = {C2:.4g}; "
              f"worst excess {over:+.3f} at node {node}, t = {tw[k]:.6g}")
    if not growth_ok:
        detail += f"; growth exponent {alpha:.3f} exceeds linear"
    return Check("time-dev-decay", PASS if margin >= 0 else FAIL, margin, detail, ctx.fit_slack)


# --- structural --------------------------------------------------------------

def relative_sup(e1: MetricEigenvalues, e2: MetricEigenvalues, trim: int = 0) -> float:
    """max over nodes of |e1 - e2| / |e2| for both eigenvalue fields."""
    sl = slice(trim, e2.a.size - trim if trim else None)
    return float(max(np.max(np.abs(e1.a[sl] - e2.a[sl]) / np.abs(e2.a[sl])),
                     np.max(np.abs(e1.b[sl] - e2.b[sl]) / np.abs(e2.b[sl]))))


def richardson_zero(cont: Continuation, k: int = 0) -> np.ndarray:
    """eps -> 0 extrapolation of snapshot k from the last two ladder members (first order in eps)."""
    (e1, t1), (e2, t2) = list(zip(cont.ladder, cont.trajectories))[-2:]
    u1, u2 = t1.u[k], t2.u[k]
    return u2 + (u2 - u1) * e2 / (e1 - e2)


@dataclass
class StructuralInputs:
    rescaling: Optional[Tuple[Sequence[float], Sequence[MetricEigenvalues], Sequence[MetricEigenvalues], float]] = None
    rescaling_tol: float = 1e-4
    continuation: Optional[Continuation] = None
    continuation_alt: Optional[Continuation] = None
    final: Optional[Trajectory] = None
    oracle: Optional[KESolution] = None
    ke_tol: float = 1e-3
    oracle_alt: Optional[KESolution] = None
    independence_tol: float = 1e-3
    audit: Optional[Tuple[Trajectory, Trajectory]] = None
    audit_tol: float = 1e-6
    fingerprint: str = ""


def check_structural(inp: StructuralInputs) -> EstimateReport:
    rep = EstimateReport(fingerprint=inp.fingerprint)

    # (a) rescaling identity
    if inp.rescaling is None:
        rep.add(Check("rescaling", NOT_APPLICABLE, math.nan, "no matched pair of runs"))
    else:
        times, resc, direct, slack = inp.rescaling
        errs = [relative_sup(r, d) for r, d in zip(resc, direct)]
        k = int(np.argmax(errs))
        margin = inp.rescaling_tol + slack - errs[k]
        rep.constants["rescaling_error"] = errs[k]
        node = int(np.argmax(np.maximum(np.abs(resc[k].a - direct[k].a) / direct[k].a,
                                        np.abs(resc[k].b - direct[k].b) / direct[k].b)))
        rep.add(Check("rescaling", PASS if margin >= 0 else FAIL, margin,
                      f"max relative eigenvalue difference {errs[k]:.3e} at node {node}, t = {times[k]:.6g}", slack))

    # (b) eps-Cauchy and uniqueness proxy
    cont = inp.continuation
    if cont is not None and cont.trajectories and cont.trajectories[-1].times[-1] <= 0:
        cont = None  # horizon T = 0: every ladder member is the initial snapshot
    if cont is None or len(cont.deltas) < 2:
        rep.add(Check("eps-cauchy", NOT_APPLICABLE, math.nan, "fewer than three ladder members"))
    else:
        d = np.array(cont.deltas)
        for i, v in enumerate(d):
            rep.constants[f"delta_{i}"] = float(v)
        steps = d[:-1] - d[1:]
        k = int(np.argmin(steps))
        ok = bool(np.all(steps > 0))
        rep.add(Check("eps-cauchy", PASS if ok else FAIL, float(steps[k]),
                      "deltas " + ", ".join(f"{v:.3e}" for v in d) + ("" if ok else f"; not decreasing at k = {k + 1}")))
    if cont is None or inp.continuation_alt is None or not cont.deltas:
        rep.add(Check("eps-uniqueness", NOT_APPLICABLE, math.nan, "needs two ladders with a common final eps"))
    else:
        alt = inp.continuation_alt
        A, B = cont.trajectories[-1], alt.trajectories[-1]
        bound = 4 * cont.deltas[-1]
        common = np.intersect1d(np.round(A.times, 12), np.round(B.times, 12))
        ia = [A.index_of(t) for t in common]
        ib = [B.index_of(t) for t in common]
        diff_final = float(np.max(np.abs(A.u[ia] - B.u[ib])))
        diff_extrap = 0.0
        if len(alt.trajectories) >= 2:
            for ka, kb in zip(ia, ib):
                za = richardson_zero(cont, ka)
                zb = richardson_zero(alt, kb)
                diff_extrap = max(diff_extrap, float(np.max(np.abs(za - zb))))
        worst = max(diff_final, diff_extrap)
        rep.constants.update({"uniqueness_final_diff": diff_final, "uniqueness_extrapolated_diff": diff_extrap})
        rep.add(Check("eps-uniqueness", PASS if worst <= bound else FAIL, bound - worst,
                      f"final runs differ by {diff_final:.3e}, eps->0 extrapolations by {diff_extrap:.3e}; bound 4 delta_last = {bound:.3e}"))

    # (c) KE convergence of the normalized flow
    fin, orc = inp.final, inp.oracle
    if fin is None or orc is None or not is_normalized(fin.mode) or fin.times[-1] < 3:
        rep.add(Check("ke-convergence", NOT_APPLICABLE, math.nan, "needs a normalized run with T >= 3 and the oracle"))
    else:
        k = len(fin.times) - 1
        e_flow = fin.eigenvalues(k)
        e_lim = orc.eigenvalues()
        err = relative_sup(e_flow, e_lim)
        pot = family_at(fin.family, float(fin.times[k]), fin.eps).add_field(fin.u[k])
        res = ke_residual(pot, fin.family.lam)
        du = float(np.max(np.abs(fin.u[k] - orc.u_inf)))
        rep.constants.update({"ke_eigen_error": err, "ke_residual": res, "ke_potential_error": du,
                              "ke_center_value": float(fin.u[k, 0])})
        worst = max(err, res, du)
        rep.add(Check("ke-convergence", PASS if worst <= inp.ke_tol else FAIL, inp.ke_tol - worst,
                      f"t = {fin.times[k]:g}: eigenvalue error {err:.3e}, KE residual {res:.3e}, "
                      f"potential error {du:.3e} (center {fin.u[k, 0]:.6g} vs {orc.u_inf[0]:.6g})"))

    # (d) independence from the defining function
    if orc is None or inp.oracle_alt is None:
        rep.add(Check("defining-function-independence", NOT_APPLICABLE, math.nan, "needs limit metrics from two presets"))
    else:
        err = relative_sup(inp.oracle_alt.eigenvalues(), orc.eigenvalues())
        rep.constants["independence_error"] = err
        rep.add(Check("defining-function-independence", PASS if err <= inp.independence_tol else FAIL,
                      inp.independence_tol - err, f"limit metrics differ by {err:.3e} (relative eigenvalues)"))

    # boundary condition insensitivity
    if inp.audit is None or inp.audit[0].times[-1] <= 0:
        rep.add(Check("dirichlet-audit", NOT_APPLICABLE, math.nan, "no extended-grid run with t > 0"))
    else:
        base, ext = inp.audit
        y = base.grid.y
        interior = np.flatnonzero(y <= base.grid.y_max - 2 + 1e-12)
        k = len(base.times) - 1
        ke = ext.index_of(base.times[k])
        diff = np.abs(base.u[k, interior] - ext.u[ke, interior])
        i = int(np.argmax(diff))
        rep.constants["audit_difference"] = float(diff[i])
        rep.add(Check("dirichlet-audit", PASS if diff[i] <= inp.audit_tol else FAIL, inp.audit_tol - float(diff[i]),
                      f"y_max vs y_max + 2 differ by {diff[i]:.3e} at node {i}, t = {base.times[k]:g}"))
    return rep


# --- geometry ----------------------------------------------------------------

def length_slope(eig: MetricEigenvalues) -> Tuple[float, float]:
    """(slope in y of the radial length over the last half grid, total length)."""
    prof = geodesic_length_profile(eig)
    y = eig.grid.y
    half = slice(y.size // 2, None)
    slope = float(np.polyfit(y[half], prof[half], 1)[0])
    return slope, float(prof[-1])


def length_tail(eig: MetricEigenvalues, dy: float = 2.0) -> float:
    """Length accumulated over the last ``dy`` units of y."""
    prof = geodesic_length_profile(eig)
    y = eig.grid.y
    j = int(np.searchsorted(y, y[-1] - dy))
    return float(prof[-1] - prof[j])


def _last_decade(m: int) -> slice:
    return slice(m - max(m // 10, 3) - 2, m - 2)


def check_geometry(traj: Trajectory, ctx: CheckContext = CheckContext(), times: Optional[Sequence[float]] = None) -> EstimateReport:
    """Simultaneous completeness, curvature asymptote and the Cheng-Yau identity."""
    bf = traj.family
    rep = EstimateReport(fingerprint=traj.fingerprint)
    g = bf.grid

    # (a) completeness
    e0 = bf.omega0_eigenvalues
    L0 = float(geodesic_length_profile(e0)[-1])
    tail0 = length_tail(e0)
    finite0 = tail0 <= 1e-3 * max(L0, 1e-300)
    rep.constants.update({"length_t0": L0, "length_tail_t0": tail0})
    if times is None:
        times = [t for t in traj.times if t > 0]
    problems, slopes = [], []
    for t in times:
        try:
            k = traj.index_of(t)
        except KeyError:
            continue
        s, _ = length_slope(traj.eigenvalues(k))
        s_ext = math.nan
        if ctx.extended is not None:
            try:
                ke = ctx.extended.index_of(t)
                s_ext, _ = length_slope(ctx.extended.eigenvalues(ke))
            except KeyError:
                pass
        slopes.append((t, s, s_ext))
        if not s > 0:
            problems.append(f"non-positive slope {s:.3g} at t = {t:g}")
        elif math.isfinite(s_ext) and not (s_ext > 0 and abs(s_ext - s) <= 0.1 * s):
            problems.append(f"slope unstable under y_max + 2 at t = {t:g} ({s:.4g} vs {s_ext:.4g})")
    if slopes:
        rep.constants["length_slope_min"] = min(s for _, s, _ in slopes)
    for t, s, _ in slopes:
        if any(abs(t - p) < 1e-12 for p in LENGTH_PROBE_TIMES):
            rep.constants[f"length_slope@{t:g}"] = s
    if not finite0:
        problems.insert(0, f"initial metric looks complete (tail length {tail0:.3g})")
    if not slopes and finite0:
        rep.add(Check("completeness", NOT_APPLICABLE, tail0, f"t = 0 length {L0:.4g} finite; no snapshots with t > 0"))
    else:
        margin = min([s for _, s, _ in slopes] + [1e-3 * L0 - tail0])
        detail = "; ".join(problems) if problems else (
            f"t = 0 length {L0:.4g} (finite); slopes " + ", ".join(f"{s:.3g}@{t:g}" for t, s, _ in slopes[:6])
            + (" ..." if len(slopes) > 6 else ""))
        rep.add(Check("completeness", FAIL if problems else PASS, margin, detail))

    # (b) curvature asymptote of omega0 + omega_bar and of omega(t)
    if is_general(traj.mode) or g.n < 2:
        why = "general background" if is_general(traj.mode) else "n = 1 has no mixed curvature"
        rep.add(Check("curvature-asymptote", NOT_APPLICABLE, math.nan, why))
    else:
        sl = _last_decade(g.m)
        where = "omega0 + omega_bar"
        H = curvature_components(bf.omega0 + bf.base).H_mix[sl]
        worst = float(np.max(np.abs(H + 1)))
        k = len(traj.times) - 1
        if traj.times[k] > 0:
            t = float(traj.times[k])
            coef = bf.coefficients(t, traj.eps)[1]
            pot = family_at(bf, t, traj.eps).add_field(traj.u[k])
            Ht = curvature_components(pot).H_mix[sl] * coef
            dev = float(np.max(np.abs(Ht + 1)))
            rep.constants["H_mix_scaled_final"] = float(np.mean(Ht))
            if dev > worst:
                worst, where = dev, f"omega(t = {t:g}) scaled by its omega_bar coefficient {coef:.4g}"
        rep.add(Check("curvature-asymptote", PASS if worst <= 0.05 else FAIL, 0.05 - worst,
                      f"max |H_mix + 1| over the last decade of nodes = {worst:.3e} ({where})"))

    # (c) Cheng-Yau identity
    if ctx.df is None:
        rep.add(Check("cy-identity", NOT_APPLICABLE, math.nan, "no defining function (general background)"))
    else:
        res = cy_identity_residual(ctx.df)
        bound = 5 * g.h**2
        rep.constants["cy_residual"] = res
        rep.add(Check("cy-identity", PASS if res <= bound else FAIL, bound - res,
                      f"residual {res:.3e} vs 5 h^2 = {bound:.3e}"))
    return rep


def checks_for_mode(mode: str) -> Tuple[str, ...]:
    if is_normalized(mode):
        return GENERAL_NORMALIZED_CHECKS if is_general(mode) else NORMALIZED_CHECKS
    return GENERAL_UNNORMALIZED_CHECKS if is_general(mode) else UNNORMALIZED_CHECKS


def check_apriori(traj: Trajectory, ctx: CheckContext = CheckContext()) -> EstimateReport:
    if is_normalized(traj.mode):
        return check_apriori_normalized(traj, ctx)
    return check_apriori_unnormalized(traj, ctx)
