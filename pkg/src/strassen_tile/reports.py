"""Machine-readable outputs: CSV emission, matplotlib figures, SVG polylines.

Every CSV gets a header row and a trailing comment line carrying the
config hash and package version, so a result file is traceable to the
exact run that produced it.  Floats print in shortest round-trip form;
outputs are byte-identical across reruns of the same config.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from importlib.metadata import PackageNotFoundError, version as _pkg_version

try:
    ARTIFACT_VERSION = _pkg_version("strassen-tile")
except PackageNotFoundError:  # running from a source tree without install
    ARTIFACT_VERSION = "0.0.0+src"


def config_hash(config) -> str:
    """Stable short hash of a JSON-serializable config."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, header: list[str], rows, config) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row width {len(row)} != header width {len(header)}")
        lines.append(",".join(_fmt(v) for v in row))
    lines.append(f"# config_hash={config_hash(config)} version={ARTIFACT_VERSION}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv_rows(path) -> tuple[list[str], list[list[str]]]:
    """Header and data rows of a CSV written by write_csv (comments skipped)."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    data = [ln for ln in lines if not ln.startswith("#")]
    header = data[0].split(",")
    return header, [ln.split(",") for ln in data[1:]]


def save_figure(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def class0_figure(path, rows, alpha24: float) -> Path:
    """Final loss vs tensor rank, one line per init family, 2:4 reference level.

    rows: (r, init, seed, loss_init, loss_final) tuples.
    """
    by_init: dict[str, dict[int, list[float]]] = {}
    for r, init, _seed, _li, lf in rows:
        by_init.setdefault(init, {}).setdefault(int(r), []).append(float(lf))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for init, series in sorted(by_init.items()):
        rs = sorted(series)
        med = [float(np.median(series[r])) for r in rs]
        ax.plot(rs, med, marker="o", label=f"{init} (median)")
    ax.axhline(alpha24, color="tab:red", linestyle="--", label=f"2:4 refit level ({alpha24:.3f})")
    ax.set_xlabel("tensor rank r")
    ax.set_ylabel("final mean squared residual")
    ax.set_title("Tile-operator training error vs rank")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return save_figure(fig, path)


def alpha24_figure(path, per_w, estimate: float, oracle: float) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(per_w, bins=60, color="tab:blue", alpha=0.7)
    ax.axvline(estimate, color="tab:blue", linestyle="-", label=f"estimate {estimate:.4f}")
    ax.axvline(oracle, color="tab:red", linestyle="--", label=f"order-stats oracle {oracle:.4f}")
    ax.set_xlabel("per-tile refit residual")
    ax.set_ylabel("count")
    ax.set_title("2:4 pruning residual distribution")
    ax.legend()
    fig.tight_layout()
    return save_figure(fig, path)


def cost_figure(path, reports) -> Path:
    """FLOP speedup vs rank, one line per matrix size."""
    by_n: dict[int, list] = {}
    for rep in reports:
        by_n.setdefault(rep.n, []).append(rep)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for n, reps in sorted(by_n.items()):
        reps = sorted(reps, key=lambda rp: rp.r)
        ax.plot([rp.r for rp in reps], [rp.speedup_flops for rp in reps],
                marker="o", label=f"n={n}")
    ax.axhline(1.0, color="gray", linestyle=":")
    ax.set_xlabel("tensor rank r")
    ax.set_ylabel("naive / STL FLOPs")
    ax.set_title("Modeled FLOP speedup over naive matmul")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return save_figure(fig, path)


def spectrum_figure(path, reports, reports_init) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rep in reports:
        s = rep.singular_values / rep.singular_values[0]
        ax.semilogy(np.arange(1, s.size + 1), s, marker="o",
                    label=f"layer {rep.layer} trained")
        ref = rep.reference_singular_values / rep.reference_singular_values[0]
        ax.semilogy(np.arange(1, ref.size + 1), ref, linestyle="--",
                    label=f"layer {rep.layer} gaussian ref")
    for rep in reports_init:
        s = np.maximum(rep.singular_values / rep.singular_values[0], 1e-18)
        ax.semilogy(np.arange(1, s.size + 1), s, linestyle=":",
                    label=f"layer {rep.layer} init")
    ax.set_xlabel("index")
    ax.set_ylabel("singular value / largest")
    ax.set_title("Stacked fake-encoding spectra")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return save_figure(fig, path)


# --- dependency-free SVG line plot ------------------------------------------


def svg_polyline_plot(path, series: list[tuple[str, np.ndarray]],
                      width: int = 640, height: int = 400,
                      title: str = "") -> Path:
    """Minimal SVG plot: one polyline per named series, log10 y-axis.

    Written by hand so report files never depend on a renderer; values
    are clipped below at 1e-18 to keep the log scale finite.
    """
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
    margin = 45
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    ys = [np.log10(np.maximum(np.asarray(v, dtype=float), 1e-18)) for _, v in series]
    y_min = min(float(v.min()) for v in ys)
    y_max = max(float(v.max()) for v in ys)
    if y_max - y_min < 1e-12:
        y_max = y_min + 1.0
    x_max = max(len(v) for v in ys)

    def sx(i):
        return margin + plot_w * i / max(x_max - 1, 1)

    def sy(v):
        return margin + plot_h * (1.0 - (v - y_min) / (y_max - y_min))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="black" stroke-width="1"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="{margin / 2:.1f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>'
        )
    for idx, ((name, _), yv) in enumerate(zip(series, ys)):
        color = colors[idx % len(colors)]
        points = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(yv))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        parts.append(
            f'<text x="{margin + 6}" y="{margin + 16 + 14 * idx}" fill="{color}" '
            f'font-family="sans-serif" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
