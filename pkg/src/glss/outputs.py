"""Delimited output for Monte Carlo runs.

Every file is plain comma-separated text with a header row, floats at 17
significant digits, rows in a fixed order; identical runs produce
byte-identical files regardless of thread count or platform.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path

from .experiments import RunResult

FLOAT_FMT = "%.17g"


def slug(name: str) -> str:
    """Filename-safe tag for a test-function name ("z^2" -> "z2")."""
    return re.sub(r"[^A-Za-z0-9]+", "", name) or "f"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return FLOAT_FMT % value
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def emit_outputs(result: RunResult, out_dir, figures: bool | None = None) -> list[Path]:
    """Write the run's CSV set (and figures unless disabled) under out_dir.

    summary.csv: one row per test function with the empirical moments.
    hist.csv / hist_<slug>.csv: histogram bins (first function unsuffixed).
    qq.csv / qq_<slug>.csv: normal quantile pairs.
    power.csv: rejection rates over the grid when the run swept one; a
    scenario III run splits by rotation angle into power.csv, power_alt.csv.
    failures.csv: per-replication numeric failures (always written).
    """
    out_dir = Path(out_dir)
    meta = result.meta
    names = list(result.moments)
    paths = []

    paths.append(write_csv(
        out_dir / "summary.csv",
        ["experiment", "n", "N", "M", "seed", "f", "mean_hat", "var_hat", "ks_p"],
        [[meta["experiment"], meta["n"], meta["N"], mom.count, meta["seed"],
          name, mom.mean_hat, mom.var_hat, mom.ks_p]
         for name, mom in result.moments.items()]))

    for idx, name in enumerate(names):
        mom = result.moments[name]
        tag = "" if idx == 0 else f"_{slug(name)}"
        paths.append(write_csv(
            out_dir / f"hist{tag}.csv",
            ["bin_left", "bin_right", "count"],
            [[mom.hist_edges[j], mom.hist_edges[j + 1], mom.hist_counts[j]]
             for j in range(len(mom.hist_counts))]))
        paths.append(write_csv(
            out_dir / f"qq{tag}.csv",
            ["theoretical_q", "empirical_q"],
            list(zip(mom.qq_theoretical, mom.qq_empirical))))

    if result.power:
        phis = []
        for cell in result.power:
            if cell.phi not in phis:
                phis.append(cell.phi)
        split = meta["experiment"] == "scenario_III" and len(phis) > 1
        groups = [(phi,) for phi in phis] if split else [tuple(phis)]
        for g_idx, group in enumerate(groups):
            fname = "power.csv" if g_idx == 0 else \
                ("power_alt.csv" if g_idx == 1 else f"power_alt{g_idx}.csv")
            paths.append(write_csv(
                out_dir / fname,
                ["grid", "f", "power", "mc_se"],
                [[cell.grid, cell.f, cell.power, cell.mc_se]
                 for cell in result.power if cell.phi in group]))

    paths.append(write_csv(
        out_dir / "failures.csv",
        ["replication", "label", "message"],
        result.failures))

    if figures is None:
        figures = result.config.figures
    if figures:
        from .plots import render_figures
        paths.extend(render_figures(result, out_dir))
    return paths
