"""Scenario files and the run pipeline: solver, oracle, validators and output.

A scenario is a flat INI-style text::

    [scenario]
    name = ball
    mode = normalized
    n = 2

    [grid]
    m = 801
    y_max = 12

    [presets]
    domain = ball(1)
    initial = euclidean(0.5)

    [solver]
    horizon = 5

    [run]
    eps_ladder = 0.1, 0.05, 0.025, 0.0125

Every key not given takes the default listed in ``SCHEMA``.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .background import (
    MODES,
    InvalidPreset,
    PRESETS,
    build_preset,
    domain_family,
    general_family,
    is_general,
    is_normalized,
    normalized_of,
    background_metric,
    cheng_yau_f,
    parse_preset,
    preset_radius,
    unnormalized_of,
)
from .estimates import (
    CheckContext,
    EstimateReport,
    StructuralInputs,
    check_apriori,
    check_geometry,
    check_structural,
    worst_of,
)
from .flow import (
    Continuation,
    SolverConfig,
    SolverFailure,
    Trajectory,
    fingerprint_of,
    ladder_deltas,
    normalized_to_unnormalized_time,
    rescale_to_normalized,
    run,
)
from .oracle import OracleFailure, solve_for_family, solve_limit
from .radial_geometry import RadialGrid

EXIT_OK, EXIT_CHECK_FAILED, EXIT_SOLVER_FAILURE, EXIT_IO = 0, 2, 3, 4

CHECK_GROUPS = ("apriori", "structural", "geometry")
SNAPSHOT_SPACING = 0.02  # 50 snapshots per unit time


class ScenarioError(ValueError):
    """Raised with the full list of violations found in a scenario text."""

    def __init__(self, errors: Sequence[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    mode: str
    n: int
    m: int
    y_max: float
    R2: float
    domain: Optional[str]
    initial: str
    background: Optional[str]
    solver: SolverConfig
    eps_ladder: Tuple[float, ...]
    output_times: Optional[Tuple[float, ...]]  # None means every SNAPSHOT_SPACING
    checks: Tuple[str, ...]
    output_dir: str = "out"

    @property
    def fingerprint(self) -> str:
        return fingerprint_of(serialize_scenario(self, include_output=False))

    def grid(self) -> RadialGrid:
        return RadialGrid(self.n, self.R2, self.y_max, self.m)

    def snapshot_times(self) -> List[float]:
        T = self.solver.horizon
        if self.output_times is not None:
            return sorted(set(self.output_times) | ({T} if T > 0 else set()))
        k = int(math.floor(T / SNAPSHOT_SPACING + 1e-9))
        times = [round((i + 1) * SNAPSHOT_SPACING, 12) for i in range(k)]
        return sorted(set(times) | ({T} if T > 0 else set()))


# --- parsing -----------------------------------------------------------------

def _as_int(text):
    v = float(text)
    if v != int(v):
        raise ValueError
    return int(v)


def _as_list(text):
    return tuple(float(tok) for tok in text.replace(";", ",").split(",") if tok.strip())


# section -> key -> (converter, default or REQUIRED)
REQUIRED = object()
SCHEMA: Dict[str, Dict[str, Tuple[Callable, object]]] = {
    "scenario": {"name": (str, "scenario"), "mode": (str, REQUIRED), "n": (_as_int, REQUIRED)},
    "grid": {"m": (_as_int, 801), "y_max": (float, 12.0), "R2": (float, None)},
    "presets": {"domain": (str, None), "initial": (str, REQUIRED), "background": (str, None)},
    "solver": {
        "dt_max": (float, 0.01),
        "kappa": (float, 0.1),
        "newton_tol": (float, 1e-10),
        "newton_max_iter": (_as_int, 30),
        "max_halvings": (_as_int, 10),
        "horizon": (float, 1.0),
    },
    "run": {
        "eps_ladder": (_as_list, (0.1, 0.05, 0.025, 0.0125)),
        "output_times": (str, "auto"),
        "checks": (str, "all"),
        "output_dir": (str, "out"),
    },
}


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse and validate a scenario; raises ScenarioError listing every violation."""
    errors: List[str] = []
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keys are case sensitive (R2)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError([f"malformed scenario text: {exc}".splitlines()[0]]) from None

    values: Dict[str, object] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                errors.append(f"unknown key {key!r} in [{section}]")
                continue
            conv = SCHEMA[section][key][0]
            try:
                values[key] = conv(raw.strip())
            except ValueError:
                errors.append(f"invalid value {raw.strip()!r} for {key} in [{section}]")
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            if key in values:
                continue
            if default is REQUIRED:
                if not any(key in k for k in errors):
                    errors.append(f"missing required key {key!r} in [{section}]")
            else:
                values[key] = default
    if errors:
        raise ScenarioError(errors)
    return _validate(values)


def _validate(v: Dict[str, object]) -> ScenarioConfig:
    errors: List[str] = []
    mode = v["mode"]
    if mode not in MODES:
        errors.append(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    n = v["n"]
    if not 1 <= n <= 4:
        errors.append("dimension out of range [1,4]")
    if not 51 <= v["m"] <= 20001:
        errors.append("m out of range [51,20001]")
    if not 4 <= v["y_max"] <= 40:
        errors.append("y_max out of range [4,40]")

    general = mode in MODES and is_general(mode)
    R2 = v["R2"]
    for key, kind, needed in (("domain", "domain", not general), ("initial", "metric", True),
                              ("background", "background", general)):
        spec = v[key]
        if spec is None:
            if needed:
                errors.append(f"preset {key!r} is required in mode {mode}")
            continue
        try:
            name, _ = parse_preset(spec)
        except InvalidPreset as exc:
            errors.append(f"{key}: {exc}")
            continue
        if PRESETS[name].kind != kind:
            errors.append(f"{key}: preset {name!r} is a {PRESETS[name].kind} preset, expected {kind}")
        if kind == "domain":
            R = preset_radius(spec)
            if R is not None:
                if not R > 0:
                    errors.append(f"domain radius must be positive, got {R}")
                elif R2 is not None and not math.isclose(R * R, R2, rel_tol=1e-12):
                    errors.append(f"R2 = {R2} contradicts the domain preset radius {R}")
                else:
                    R2 = R * R
    R2 = 1.0 if R2 is None else R2
    if not R2 > 0:
        errors.append("R2 must be positive")

    try:
        solver = SolverConfig(
            dt_max=v["dt_max"], kappa=v["kappa"], newton_tol=v["newton_tol"],
            newton_max_iter=v["newton_max_iter"], horizon=v["horizon"], max_halvings=v["max_halvings"],
        )
    except ValueError as exc:
        errors.append(f"solver: {exc}")
        solver = None

    ladder = v["eps_ladder"]
    if not ladder:
        errors.append("eps_ladder must not be empty")
    elif any(e <= 0 for e in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
        errors.append("eps_ladder must be positive and strictly decreasing")

    out_times = None
    raw = v["output_times"].strip()
    if raw.lower() != "auto":
        try:
            out_times = tuple(sorted(set(_as_list(raw))))
            if any(t < 0 for t in out_times) or (v["horizon"] >= 0 and any(t > v["horizon"] for t in out_times)):
                errors.append("output_times must lie in [0, horizon]")
        except ValueError:
            errors.append(f"invalid output_times {raw!r}")

    raw = v["checks"].strip().lower()
    if raw == "all":
        checks = CHECK_GROUPS
    elif raw == "none":
        checks = ()
    else:
        checks = tuple(c.strip() for c in raw.split(",") if c.strip())
        bad = [c for c in checks if c not in CHECK_GROUPS]
        if bad:
            errors.append(f"unknown check groups {bad}; choose from {', '.join(CHECK_GROUPS)}")
        checks = tuple(c for c in CHECK_GROUPS if c in checks)

    if not errors:
        # make sure the presets actually build with their parameters
        try:
            g = RadialGrid(n, R2, v["y_max"], 51)
            for key in ("domain", "initial", "background"):
                if v[key] is not None:
                    obj = build_preset(v[key], g)
                    if key == "domain":
                        obj.validate()
        except (InvalidPreset, ValueError) as exc:
            errors.append(str(exc))
    if errors:
        raise ScenarioError(errors)
    return ScenarioConfig(
        name=v["name"], mode=mode, n=n, m=v["m"], y_max=float(v["y_max"]), R2=float(R2),
        domain=v["domain"], initial=v["initial"], background=v["background"], solver=solver,
        eps_ladder=tuple(ladder), output_times=out_times, checks=checks, output_dir=v["output_dir"],
    )


def _num(x) -> str:
    return repr(float(x))


def serialize_scenario(cfg: ScenarioConfig, include_output: bool = True) -> str:
    """Canonical text; parse_scenario(serialize_scenario(c)) == c."""
    s = cfg.solver
    lines = [
        "[scenario]", f"name = {cfg.name}", f"mode = {cfg.mode}", f"n = {cfg.n}", "",
        "[grid]", f"m = {cfg.m}", f"y_max = {_num(cfg.y_max)}", f"R2 = {_num(cfg.R2)}", "",
        "[presets]",
    ]
    if cfg.domain is not None:
        lines.append(f"domain = {cfg.domain}")
    lines.append(f"initial = {cfg.initial}")
    if cfg.background is not None:
        lines.append(f"background = {cfg.background}")
    lines += [
        "",
        "[solver]", f"dt_max = {_num(s.dt_max)}", f"kappa = {_num(s.kappa)}", f"newton_tol = {_num(s.newton_tol)}",
        f"newton_max_iter = {s.newton_max_iter}", f"max_halvings = {s.max_halvings}", f"horizon = {_num(s.horizon)}", "",
        "[run]",
        "eps_ladder = " + ", ".join(_num(e) for e in cfg.eps_ladder),
        "output_times = " + ("auto" if cfg.output_times is None else ", ".join(_num(t) for t in cfg.output_times)),
        "checks = " + (", ".join(cfg.checks) if cfg.checks else "none"),
    ]
    if include_output:
        lines.append(f"output_dir = {cfg.output_dir}")
    return "\n".join(lines) + "\n"


def load_scenario(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# --- building blocks ---------------------------------------------------------

def build_family(cfg: ScenarioConfig, grid: Optional[RadialGrid] = None, mode: Optional[str] = None):
    """(BackgroundFamily, DefiningFunction or None) for the scenario on ``grid``."""
    g = cfg.grid() if grid is None else grid
    mode = cfg.mode if mode is None else mode
    omega0 = build_preset(cfg.initial, g, "metric")
    if is_general(mode):
        return general_family(mode, omega0, build_preset(cfg.background, g, "background")), None
    df = build_preset(cfg.domain, g, "domain")
    df.validate()
    return domain_family(mode, omega0, df), df


def extended_grid(g: RadialGrid, dy: float = 2.0) -> RadialGrid:
    """Same spacing, cutoff moved out by (about) ``dy``."""
    extra = int(round(dy / g.h))
    return RadialGrid(g.n, g.R2, g.h * (g.m - 1 + extra), g.m + extra)


def alternate_domain(spec: str) -> str:
    """A second defining function of the same ball."""
    name, args = parse_preset(spec)
    R = preset_radius(spec)
    R = 1.0 if R is None else R
    if name == "ball":
        return f"perturbed-ball(0.5,{R!r})"
    return f"ball({R!r})"


@dataclass
class ScenarioResult:
    exit_code: int
    report: Optional[EstimateReport] = None
    trajectories: List[Trajectory] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)
    message: str = ""
    diagnostics: Dict[str, object] = field(default_factory=dict)


def _log(quiet: bool, msg: str):
    if not quiet:
        print(msg, flush=True)


def _rescaling_inputs(cfg: ScenarioConfig, bf, traj: Trajectory) -> Tuple:
    """Matched runs for the unnormalized <-> normalized identity at the final eps."""
    lam, eps = bf.lam, traj.eps
    T = cfg.solver.horizon
    if is_normalized(cfg.mode):
        t_top = min(T, 1.0)
        s_top = float(normalized_to_unnormalized_time(t_top, lam))
        t_match = [round(t_top * (k + 1) / 5, 12) for k in range(5)]
        s_match = [float(s) for s in normalized_to_unnormalized_time(t_match, lam)]
        dense = [round((i + 1) * SNAPSHOT_SPACING, 12) for i in range(int(s_top / SNAPSHOT_SPACING))]
        un = run(bf.with_mode(unnormalized_of(cfg.mode)), eps, replace(cfg.solver, horizon=s_top), sorted(set(dense + s_match)))
        direct = [traj.eigenvalues(traj.index_of(t)) for t in t_match] if all(
            np.any(np.abs(traj.times - t) < 1e-12) for t in t_match) else None
        if direct is None:
            nor = run(bf, eps, replace(cfg.solver, horizon=t_top), t_match)
            direct = [nor.eigenvalues(nor.index_of(t)) for t in t_match]
        rescaled = rescale_to_normalized(un, t_match)
    else:
        t_top = math.log1p(lam * T) / lam
        t_match = [t_top * (k + 1) / 5 for k in range(5)]
        s_match = [float(s) for s in normalized_to_unnormalized_time(t_match, lam)]
        un = traj
        if not all(np.any(np.abs(traj.times - s) < 1e-12) for s in s_match):
            un = run(bf, eps, cfg.solver, sorted(set(cfg.snapshot_times()) | set(s_match)))
        nor = run(bf.with_mode(normalized_of(cfg.mode)), eps, replace(cfg.solver, horizon=t_top), t_match)
        direct = [nor.eigenvalues(nor.index_of(t)) for t in t_match]
        rescaled = rescale_to_normalized(un, t_match)
    slack = 3 * (cfg.solver.dt_max + traj.grid.h**2)
    return t_match, rescaled, direct, slack


def run_scenario(
    cfg: ScenarioConfig,
    out_dir: Optional[str] = None,
    grid_refine: int = 0,
    quiet: bool = True,
    write: bool = True,
) -> ScenarioResult:
    """Full pipeline.  Exit codes: 0 all checks pass, 2 a check failed, 3 solver failure, 4 I/O."""
    from . import output

    fp = cfg.fingerprint
    text = serialize_scenario(cfg)
    out = None
    if write:
        try:
            out = output.ensure_dir(out_dir if out_dir is not None else cfg.output_dir)
        except OSError as exc:
            return ScenarioResult(EXIT_IO, message=f"cannot create output directory: {exc}")

    grid = cfg.grid()
    bf, df = build_family(cfg, grid)
    times = cfg.snapshot_times()
    solver_dict = asdict(cfg.solver)
    files: List[Path] = []
    try:
        _log(quiet, f"[{cfg.name}] mode {cfg.mode}, m = {cfg.m}, ladder {list(cfg.eps_ladder)}")
        trajs = []
        for eps in cfg.eps_ladder:
            tr = run(bf, eps, cfg.solver, times, fingerprint=fp)
            trajs.append(tr)
            _log(quiet, f"  eps = {eps:g}: {tr.stats['steps']} steps, center u(T) = {tr.u[-1, 0]:.8g}")
        cont = Continuation(list(cfg.eps_ladder), trajs, ladder_deltas(trajs))
        oracle_sol = None
        if "structural" in cfg.checks or write:
            oracle_sol = solve_for_family(bf)
    except SolverFailure as exc:
        diag = dict(exc.diagnostics)
        msg = f"solver failure: {exc}"
        if write and out is not None:
            output._dump(out / "failure.json", {"message": str(exc), "diagnostics": diag, "fingerprint": fp})
        return ScenarioResult(EXIT_SOLVER_FAILURE, message=msg, diagnostics=diag)
    except OracleFailure as exc:
        return ScenarioResult(EXIT_SOLVER_FAILURE, message=f"oracle failure: {exc}", diagnostics={"history": exc.history})

    final = trajs[-1]
    report = EstimateReport(fingerprint=fp)
    try:
        extended = None
        if "structural" in cfg.checks or "geometry" in cfg.checks:
            bf_ext, _ = build_family(cfg, extended_grid(grid))
            extended = run(bf_ext, final.eps, cfg.solver, times, fingerprint=fp)
        ctx = CheckContext(df=df, newton_tol=cfg.solver.newton_tol, extended=extended)
        if "apriori" in cfg.checks:
            labels = [f"eps={tr.eps:g}" for tr in trajs]
            report.merge(worst_of([check_apriori(tr, ctx) for tr in trajs], labels))
        if "structural" in cfg.checks:
            inp = StructuralInputs(continuation=cont, fingerprint=fp, final=final, oracle=oracle_sol,
                                   audit=(final, extended))
            if final.times[-1] > 0:
                inp.rescaling = _rescaling_inputs(cfg, bf, final)
            if len(trajs) >= 3:
                rerun = run(bf, final.eps, cfg.solver, times, fingerprint=fp)
                alt = [trajs[-3], rerun]
                inp.continuation_alt = Continuation([trajs[-3].eps, final.eps], alt, ladder_deltas(alt))
            if df is not None:
                g = grid
                df_alt = build_preset(alternate_domain(cfg.domain), g, "domain")
                inp.oracle_alt = solve_limit(cfg.mode, background_metric(df_alt), cheng_yau_f(df_alt), g.n)
            report.merge(check_structural(inp))
        if "geometry" in cfg.checks:
            report.merge(check_geometry(final, ctx, _probe_times(final)))
        if grid_refine > 0:
            report.constants.update(_refinement_study(cfg, bf, grid_refine, times, quiet))
    except SolverFailure as exc:
        return ScenarioResult(EXIT_SOLVER_FAILURE, report, trajs, message=f"solver failure: {exc}",
                              diagnostics=dict(exc.diagnostics))
    except OracleFailure as exc:
        return ScenarioResult(EXIT_SOLVER_FAILURE, report, trajs, message=f"oracle failure: {exc}")

    if write and out is not None:
        try:
            for k, tr in enumerate(trajs):
                files += output.write_trajectory(tr, out / f"trajectory_{k}", solver_dict, text)
            if oracle_sol is not None:
                files += output.write_limit(oracle_sol, grid, out / "limit", cfg.mode, fp, text)
            output.write_text(out / "report.json", report.to_json())
            output.write_text(out / "report.txt", report.to_text())
            output.write_text(out / "scenario.ini", text)
            files += [out / "report.json", out / "report.txt", out / "scenario.ini"]
        except OSError as exc:
            return ScenarioResult(EXIT_IO, report, trajs, files, message=f"cannot write output: {exc}")
    code = EXIT_OK if report.all_passed else EXIT_CHECK_FAILED
    failed = [c.name for c in report.checks if c.status == "fail"]
    msg = "all checks passed" if code == EXIT_OK else "failed checks: " + ", ".join(failed)
    return ScenarioResult(code, report, trajs, files, msg)


def _probe_times(traj: Trajectory) -> List[float]:
    """Snapshot times used for the completeness probe: 0.1, 0.5, 1 when present, else all."""
    from .estimates import LENGTH_PROBE_TIMES

    present = [t for t in LENGTH_PROBE_TIMES if np.any(np.abs(traj.times - t) < 1e-12)]
    return present if present else [float(t) for t in traj.times if t > 0]


def _refinement_study(cfg: ScenarioConfig, bf, k: int, times, quiet: bool) -> Dict[str, float]:
    """Rerun the finest eps on grids refined k times; report center-node u(T) and observed orders."""
    eps = cfg.eps_ladder[-1]
    g = cfg.grid()
    vals = [run(bf, eps, cfg.solver, times).u[-1, 0]]
    out = {"refine_center_u_0": float(vals[0])}
    for j in range(1, k + 1):
        g = g.refined()
        bfj, _ = build_family(cfg, g)
        vals.append(run(bfj, eps, cfg.solver, times).u[-1, 0])
        out[f"refine_center_u_{j}"] = float(vals[-1])
        _log(quiet, f"  refinement {j}: m = {g.m}, center u(T) = {vals[-1]:.10g}")
        if j >= 2:
            d1, d2 = vals[-3] - vals[-2], vals[-2] - vals[-1]
            if d2 != 0 and d1 / d2 > 0:
                out[f"refine_order_{j}"] = float(math.log2(abs(d1 / d2)))
    return out


def run_oracle(cfg: ScenarioConfig, out_dir: Optional[str] = None, write: bool = True) -> ScenarioResult:
    from . import output

    grid = cfg.grid()
    bf, _ = build_family(cfg, grid, mode=normalized_of(cfg.mode))
    try:
        sol = solve_for_family(bf)
    except OracleFailure as exc:
        return ScenarioResult(EXIT_SOLVER_FAILURE, message=f"oracle failure: {exc}", diagnostics={"history": exc.history})
    files = []
    if write:
        try:
            out = output.ensure_dir(out_dir if out_dir is not None else cfg.output_dir)
            files = output.write_limit(sol, grid, out / "limit", cfg.mode, cfg.fingerprint, serialize_scenario(cfg))
        except OSError as exc:
            return ScenarioResult(EXIT_IO, message=f"cannot write output: {exc}")
    msg = (f"limit solved in {sol.newton_iterations} Newton iterations, residual {sol.residual_norm:.2e}; "
           f"center value {sol.u_inf[0]:.10g}, boundary value {sol.u_inf[-1]:.10g}")
    res = ScenarioResult(EXIT_OK, files=files, message=msg)
    res.diagnostics["solution"] = sol
    return res


def check_directory(path) -> ScenarioResult:
    """Re-run the trajectory checks on the files written by run_scenario."""
    from . import output

    d = Path(path)
    sidecars = sorted(d.glob("trajectory_*.json"))
    if not sidecars:
        return ScenarioResult(EXIT_IO, message=f"no trajectory files in {d}")
    try:
        metas = [output.read_sidecar(p) for p in sidecars]
        cfg = parse_scenario(metas[0]["config"])
        grid = cfg.grid()
        bf, df = build_family(cfg, grid)
        trajs = []
        for meta in metas:
            fp, y, times, u, udot = output.read_table(d / meta["csv"])
            if u.shape[1] != grid.m:
                raise ValueError(f"{meta['csv']}: {u.shape[1]} nodes, scenario says {grid.m}")
            st = np.array(meta.get("step_times") or times)
            trajs.append(Trajectory(meta["mode"], float(meta["eps"]), times, u, udot, bf, fp, meta.get("stats", {}), st))
    except (OSError, ValueError, KeyError) as exc:
        return ScenarioResult(EXIT_IO, message=f"cannot read trajectories: {exc}")
    trajs.sort(key=lambda t: -t.eps)
    ctx = CheckContext(df=df, newton_tol=cfg.solver.newton_tol)
    report = worst_of([check_apriori(tr, ctx) for tr in trajs], [f"eps={t.eps:g}" for t in trajs])
    report.fingerprint = cfg.fingerprint
    report.merge(check_geometry(trajs[-1], ctx, _probe_times(trajs[-1])))
    cont = Continuation([t.eps for t in trajs], trajs, ladder_deltas(trajs))
    report.merge(check_structural(StructuralInputs(continuation=cont, fingerprint=cfg.fingerprint)))
    code = EXIT_OK if report.all_passed else EXIT_CHECK_FAILED
    return ScenarioResult(code, report, trajs, message="all checks passed" if code == 0 else "some checks failed")
