"""CSV and JSON files for trajectories, limit solutions and reports."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import __version__
from .flow import Trajectory
from .oracle import KESolution
from .radial_geometry import RadialGrid


def _fmt(x: float) -> str:
    return f"{x:.17e}"


def _time_label(t: float) -> str:
    return "inf" if math.isinf(t) else repr(float(t))


def _write_table(path: Path, fingerprint: str, grid: RadialGrid, times, u, udot):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# krflow {__version__} fingerprint {fingerprint}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "rho"] + [f"u(t={_time_label(t)})" for t in times] + [f"udot(t={_time_label(t)})" for t in times])
        y, rho = grid.y, grid.rho
        for i in range(grid.m):
            w.writerow([_fmt(y[i]), _fmt(rho[i])] + [_fmt(v) for v in u[:, i]] + [_fmt(v) for v in udot[:, i]])


def read_table(path) -> Tuple[str, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of the trajectory CSV writer: (fingerprint, y, times, u, udot)."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# krflow"):
            raise ValueError(f"{path}: missing krflow comment line")
        fingerprint = first.split("fingerprint", 1)[1].strip()
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    k = (len(header) - 2) // 2
    times = np.array([float(h[h.index("=") + 1:-1]) for h in header[2:2 + k]])
    return fingerprint, body[:, 0], times, body[:, 2:2 + k].T, body[:, 2 + k:].T


def _dump(path: Path, obj: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def grid_dict(grid: RadialGrid) -> dict:
    return {"n": grid.n, "R2": grid.R2, "y_max": grid.y_max, "m": grid.m}


def write_trajectory(traj: Trajectory, stem: Path, solver: dict, config_text: str = "") -> List[Path]:
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    _write_table(csv_path, traj.fingerprint, traj.grid, traj.times, traj.u, traj.udot)
    _dump(json_path, {
        "kind": "trajectory",
        "version": __version__,
        "mode": traj.mode,
        "eps": traj.eps,
        "grid": grid_dict(traj.grid),
        "solver": solver,
        "fingerprint": traj.fingerprint,
        "stats": traj.stats,
        "step_times": [float(t) for t in (traj.step_times if traj.step_times is not None else [])],
        "config": config_text,
        "csv": csv_path.name,
    })
    return [csv_path, json_path]


def write_limit(sol: KESolution, grid: RadialGrid, stem: Path, mode: str, fingerprint: str, config_text: str = "") -> List[Path]:
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    _write_table(csv_path, fingerprint, grid, [math.inf], sol.u_inf[None, :], np.zeros((1, grid.m)))
    _dump(json_path, {
        "kind": "limit",
        "version": __version__,
        "mode": mode,
        "grid": grid_dict(grid),
        "fingerprint": fingerprint,
        "residual_norm": sol.residual_norm,
        "newton_iterations": sol.newton_iterations,
        "residual_history": list(sol.history),
        "config": config_text,
        "csv": csv_path.name,
    })
    return [csv_path, json_path]


def read_sidecar(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def ensure_dir(path: Optional[str]) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
