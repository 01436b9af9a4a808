"""Figure rendering for Monte Carlo runs (PNG files, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .experiments import RunResult
from .outputs import slug


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_figures(result: RunResult, out_dir) -> list[Path]:
    """Histogram-with-normal-density and QQ figures per test function, plus
    power curves when the run swept a grid.  Returns the written paths."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    for name, mom in result.moments.items():
        tag = slug(name)
        edges = np.asarray(mom.hist_edges)
        counts = np.asarray(mom.hist_counts, dtype=float)
        widths = np.diff(edges)
        density = counts / (mom.count * widths)
        grid = np.linspace(min(-4.0, edges[0]), max(4.0, edges[-1]), 400)
        normal = np.exp(-grid**2 / 2.0) / np.sqrt(2.0 * np.pi)

        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ax.bar(edges[:-1], density, width=widths, align="edge",
               color="#9ecae1", edgecolor="#3182bd", linewidth=0.6)
        ax.plot(grid, normal, color="#d62728", linewidth=1.4)
        ax.set_xlabel("standardized statistic")
        ax.set_ylabel("density")
        ax.set_title(f"{result.meta['experiment']}  f={name}")
        fig.tight_layout()
        path = out_dir / f"hist_{tag}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

        fig, ax = plt.subplots(figsize=(4.2, 4.2))
        ax.plot(mom.qq_theoretical, mom.qq_empirical, ".", markersize=3,
                color="#3182bd")
        lim = (min(mom.qq_theoretical[0], mom.qq_empirical[0]),
               max(mom.qq_theoretical[-1], mom.qq_empirical[-1]))
        ax.plot(lim, lim, color="#d62728", linewidth=1.0)
        ax.set_xlabel("normal quantile")
        ax.set_ylabel("empirical quantile")
        ax.set_title(f"{result.meta['experiment']}  f={name}")
        fig.tight_layout()
        path = out_dir / f"qq_{tag}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

    if result.power:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        phis = []
        for cell in result.power:
            if cell.phi not in phis:
                phis.append(cell.phi)
        names = list(result.moments)
        for name in names:
            for phi in phis:
                pts = [(c.grid, c.power) for c in result.power
                       if c.f == name and c.phi == phi]
                if not pts:
                    continue
                xs, ys = zip(*pts)
                label = name if len(phis) == 1 else f"{name}, phi={phi:g}"
                style = "-" if phi == phis[0] else "--"
                ax.plot(xs, ys, style, marker="o", markersize=3, label=label)
        ax.set_xlabel("grid")
        ax.set_ylabel("rejection rate")
        ax.set_ylim(-0.02, 1.02)
        ax.axhline(result.config.alpha, color="grey", linewidth=0.8,
                   linestyle=":")
        ax.legend(fontsize=8)
        ax.set_title(f"{result.meta['experiment']} power")
        fig.tight_layout()
        path = out_dir / "power.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

    return paths
