"""Per-species log-log regression of dry weight on mean silhouette area."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .core import DataError, Dataset


class InsufficientData(DataError):
    pass


@dataclass(frozen=True)
class RegressionFit:
    species: str
    intercept: float
    slope: float
    residual_variance: float
    r2: float
    p_value: float
    n: int
    area_scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def fit_species(areas: Sequence[float], weights: Sequence[float], species: str = "", area_scale: float = 1.0) -> RegressionFit:
    """OLS of ``log(weight)`` on ``log(area * area_scale)``.

    ``area_scale`` converts px^2 to physical units (mm^2 per px^2); the
    default keeps pixel units. The p-value is the two-sided t-test of a
    zero slope.
    """
    areas = np.asarray(areas, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if areas.shape != weights.shape:
        raise DataError("areas and weights differ in length")
    bad = [i for i, (a, w) in enumerate(zip(areas, weights)) if not (a > 0 and w > 0)]
    if bad:
        raise DataError(f"nonpositive area or weight at records {bad}")
    n = len(areas)
    if n < 3:
        raise InsufficientData(f"{species or 'species'}: {n} weighed specimens, at least 3 needed")
    x = np.log(areas * area_scale)
    y = np.log(weights)
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise InsufficientData(f"{species or 'species'}: all areas are equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - intercept - slope * x
    ssr = float(np.sum(resid**2))
    sst = float(np.sum((y - ym) ** 2))
    dof = n - 2
    var = ssr / dof if dof > 0 else 0.0
    r2 = 1.0 - ssr / sst if sst > 0 else 0.0
    r2 = min(1.0, max(0.0, r2))
    se = math.sqrt(var / sxx)
    if se == 0:
        p = 0.0 if slope != 0 else 1.0
    else:
        p = float(2 * stats.t.sf(abs(slope / se), dof))
    return RegressionFit(species, intercept, slope, var, r2, p, n, area_scale)


def predict_weight(fit: RegressionFit, mean_area: float, bias_correction: bool = False) -> float:
    """Back-transformed weight in grams; optionally times ``exp(var / 2)``."""
    if not mean_area > 0:
        raise ValueError(f"area must be positive, got {mean_area}")
    log_w = fit.intercept + fit.slope * math.log(mean_area * fit.area_scale)
    if bias_correction:
        log_w += fit.residual_variance / 2
    return math.exp(log_w)


@dataclass
class BiomassReport:
    fits: dict[str, RegressionFit]
    skipped: dict[str, str]
    points: dict[str, list[tuple[str, float, float]]]

    def write_fits_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["species", "a", "b", "r2", "p", "n"])
            for name, f in sorted(self.fits.items()):
                w.writerow([name, repr(f.intercept), repr(f.slope), repr(f.r2), repr(f.p_value), f.n])

    def write_points_csv(self, path: Path) -> None:
        """Scatter points plus fitted weight per specimen, ready for plotting."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["species", "specimen_id", "mean_area", "dry_weight_g", "fitted_weight_g"])
            for name in sorted(self.points):
                fit = self.fits.get(name)
                for sid, area, weight in self.points[name]:
                    fitted = "" if fit is None else repr(predict_weight(fit, area))
                    w.writerow([name, sid, repr(area), repr(weight), fitted])

    def to_dict(self) -> dict:
        return {"fits": {k: v.to_dict() for k, v in sorted(self.fits.items())}, "skipped": self.skipped}


def fit_all(ds: Dataset, area_scale: float = 1.0) -> BiomassReport:
    """Fit every species with at least three weighed specimens; list the rest as skipped."""
    points: dict[str, list[tuple[str, float, float]]] = {name: [] for name in ds.registry.names}
    for spec in ds.specimens:
        if spec.dry_weight_g is not None and spec.frames:
            points[spec.label.name].append((spec.specimen_id, spec.mean_area_px2, spec.dry_weight_g))
    fits, skipped = {}, {}
    for name, pts in points.items():
        try:
            fits[name] = fit_species([p[1] for p in pts], [p[2] for p in pts], name, area_scale)
        except InsufficientData as exc:
            skipped[name] = str(exc)
    return BiomassReport(fits, skipped, {k: v for k, v in points.items() if v})
