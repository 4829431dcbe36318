"""Figures rendered from the CSV outputs, never from live simulation state."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}

PANELS = (("u_norm", r"$\|u\|$ [m/s]"), ("h_true", r"$h$"), ("V", r"$V$"))


def _read_columns(path: Path) -> dict[str, list]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    cols: dict[str, list] = {k: [] for k in (rows[0] if rows else [])}
    for r in rows:
        for k, v in r.items():
            cols[k].append(v)
    return cols


def _floats(vals) -> list[float]:
    return [float(v) if v not in ("", None) else float("nan") for v in vals]


def plot_metric_panels(curves: dict[str, dict], path: Path, title: str | None = None) -> Path:
    """Stacked control effort, barrier and Lyapunov panels, one line per controller."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(PANELS), 1, sharex=True, figsize=(5.5, 6.0))
        for name, cols in curves.items():
            t = _floats(cols["t"])
            for ax, (key, label) in zip(axes, PANELS):
                ax.plot(t, _floats(cols[key]), lw=1.2, label=name)
                ax.set_ylabel(label)
        axes[1].axhline(0.0, color="k", lw=0.8, ls="--")
        axes[-1].set_xlabel("t [s]")
        if len(curves) > 1:
            axes[0].legend()
        if title:
            axes[0].set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_scaling(rows: list[dict], path: Path) -> Path:
    """Mean step time against swarm size with one-sigma bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for name in dict.fromkeys(r["controller"] for r in rows):
            sel = [r for r in rows if r["controller"] == name]
            n = [int(r["n_robots"]) for r in sel]
            ax.errorbar(n, [float(r["mean_step_ms"]) for r in sel], yerr=[float(r["std_step_ms"]) for r in sel],
                        marker="o", capsize=3, lw=1.2, label=name)
        ax.set_xlabel("robots")
        ax.set_ylabel("step time [ms]")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def render_directory(out_dir: Path) -> list[Path]:
    """Render every figure whose source CSV exists in ``out_dir``; returns the written paths."""
    out_dir = Path(out_dir)
    written = []
    metrics = out_dir / "metrics.csv"
    if metrics.exists():
        written.append(plot_metric_panels({"run": _read_columns(metrics)}, out_dir / "metrics.png"))
    compare = out_dir / "compare.csv"
    if compare.exists():
        cols = _read_columns(compare)
        names = sorted({k.rsplit("__", 1)[0] for k in cols if "__" in k})
        curves = {n: {"t": cols["t"], **{key: cols[f"{n}__{key}"] for key, _ in PANELS}} for n in names}
        written.append(plot_metric_panels(curves, out_dir / "compare.png"))
    scaling = out_dir / "scaling.csv"
    if scaling.exists():
        with scaling.open() as fh:
            written.append(plot_scaling(list(csv.DictReader(fh)), out_dir / "scaling.png"))
    return written
