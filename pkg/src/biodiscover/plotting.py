"""Figures for the report subcommands, rendered to PNG without a display."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .biomass import BiomassReport, predict_weight  # noqa: E402
from .core import CameraSettings  # noqa: E402
from .evaluation import AblationReport, GridReport, NmaxCurve  # noqa: E402

# Stable across matplotlib versions so PNGs are reproducible.
SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    return Path(path)


def plot_grid(grid: GridReport, path: Path) -> Path:
    apertures, exposures = grid.axes()
    means = np.full((len(apertures), len(exposures)), np.nan)
    for i, f in enumerate(apertures):
        for j, e in enumerate(exposures):
            rep = grid.cells.get(CameraSettings(e, f))
            if rep is not None:
                means[i, j] = rep.mean
    fig, ax = plt.subplots(figsize=(4.5, 3.6))
    im = ax.imshow(means, cmap="viridis")
    best = grid.best
    for i, f in enumerate(apertures):
        for j, e in enumerate(exposures):
            rep = grid.cells.get(CameraSettings(e, f))
            if rep is None:
                continue
            weight = "bold" if rep.settings == best else "normal"
            ax.text(j, i, f"{rep.mean:.3f}\n({rep.std:.3f})", ha="center", va="center", color="w", fontweight=weight, fontsize=8)
    ax.set_xticks(range(len(exposures)), [f"{e} µs" for e in exposures])
    ax.set_yticks(range(len(apertures)), [f"1:{f:g}" for f in apertures])
    ax.set_xlabel("exposure")
    ax.set_ylabel("aperture")
    fig.colorbar(im, ax=ax, label="mean specimen accuracy")
    return _save(fig, path)


def plot_confusion(confusion: np.ndarray, species: Sequence[str], path: Path) -> Path:
    k = len(species)
    size = max(3.5, 0.45 * k + 1.5)
    fig, ax = plt.subplots(figsize=(size, size))
    ax.imshow(np.nan_to_num(confusion), cmap="Blues", vmin=0, vmax=1)
    if k <= 15:
        for i in range(k):
            for j in range(k):
                v = confusion[i, j]
                if v > 0:
                    ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7, color="w" if v > 0.5 else "k")
    ax.set_xticks(range(k), species, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(range(k), species, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    return _save(fig, path)


def plot_nmax(curve: NmaxCurve, path: Path) -> Path:
    finite = [p for p in curve.points if not math.isinf(p[0])]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if finite:
        n, mean, std = (np.array(c) for c in zip(*finite))
        ax.plot(n, mean, marker="o")
        ax.fill_between(n, mean - std, mean + std, alpha=0.25)
        ax.set_xscale("log")
    for n_max, mean, _ in curve.points:
        if math.isinf(n_max):
            ax.axhline(mean, ls="--", c="gray", label="all images")
            ax.legend(loc="lower right")
    ax.set_xlabel("N_max (images per specimen)")
    ax.set_ylabel("mean specimen accuracy")
    return _save(fig, path)


def plot_ablation(report: AblationReport, path: Path) -> Path:
    names, reps = zip(*report.rows())
    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.bar(names, [r.mean for r in reps], yerr=[r.std for r in reps], capsize=4, color=["#6a9fb5", "#b5a26a", "#7fb56a"])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean specimen accuracy")
    return _save(fig, path)


def plot_biomass(report: BiomassReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name in sorted(report.points):
        pts = report.points[name]
        areas = np.array([p[1] for p in pts])
        weights = np.array([p[2] for p in pts])
        (line,) = ax.plot(areas, weights, "o", ms=3, label=name)
        fit = report.fits.get(name)
        if fit is not None:
            xs = np.geomspace(areas.min(), areas.max(), 50)
            ax.plot(xs, [predict_weight(fit, x) for x in xs], c=line.get_color())
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("mean silhouette area (px²)")
    ax.set_ylabel("dry weight (g)")
    ax.legend(fontsize=7)
    return _save(fig, path)
