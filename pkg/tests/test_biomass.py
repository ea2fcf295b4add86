import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from biodiscover.biomass import InsufficientData, fit_all, fit_species, predict_weight
from biodiscover.core import DataError

from conftest import make_dataset, make_frame


def test_exact_power_law_is_recovered():
    areas = np.array([200.0, 350.0, 800.0, 1500.0, 4000.0])
    weights = 3e-6 * areas**1.4
    fit = fit_species(areas, weights, "Musca exacta")
    assert fit.slope == pytest.approx(1.4, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3e-6), abs=1e-10)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.p_value == pytest.approx(0.0, abs=1e-12)
    for a, w in zip(areas, weights):
        assert predict_weight(fit, a) == pytest.approx(w, rel=1e-9)


positive = st.floats(1e-3, 1e4, allow_nan=False, allow_infinity=False)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(positive, positive), min_size=3, max_size=20))
def test_matches_independent_regression(pairs):
    areas, weights = map(np.array, zip(*pairs))
    x, y = np.log(areas), np.log(weights)
    assume(np.ptp(x) > 1e-6)
    fit = fit_species(areas, weights)
    ref = stats.linregress(x, y)
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    assert fit.slope == pytest.approx(ref.slope, rel=1e-7, abs=1e-9)
    assert fit.intercept == pytest.approx(coef[0], rel=1e-7, abs=1e-7)
    if np.ptp(y) > 1e-9:
        assert fit.r2 == pytest.approx(ref.rvalue**2, abs=1e-7)
        if ref.rvalue**2 < 1 - 1e-9:
            assert fit.p_value == pytest.approx(ref.pvalue, rel=1e-5, abs=1e-9)
        else:  # exact fits: both p-values are rounding noise around zero
            assert fit.p_value < 1e-6 and ref.pvalue < 1e-6
    assert 0.0 <= fit.r2 <= 1.0
    assert 0.0 <= fit.p_value <= 1.0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(positive, positive), min_size=3, max_size=12), st.floats(1e-4, 10))
def test_area_scale_only_moves_intercept(pairs, scale):
    areas, weights = map(np.array, zip(*pairs))
    assume(np.ptp(np.log(areas)) > 1e-3)
    px = fit_species(areas, weights)
    mm = fit_species(areas, weights, area_scale=scale)
    assert mm.slope == pytest.approx(px.slope, rel=1e-6, abs=1e-9)
    assert mm.intercept == pytest.approx(px.intercept - px.slope * math.log(scale), rel=1e-6, abs=1e-6)
    assert predict_weight(mm, areas[0]) == pytest.approx(predict_weight(px, areas[0]), rel=1e-6)


def test_constant_weights_give_zero_r2():
    fit = fit_species([1.0, 2.0, 4.0], [0.5, 0.5, 0.5])
    assert fit.slope == 0.0 and fit.r2 == 0.0 and fit.p_value == 1.0


def test_insufficient_data():
    with pytest.raises(InsufficientData):
        fit_species([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(InsufficientData):
        fit_species([5.0, 5.0, 5.0], [1.0, 2.0, 3.0])
    with pytest.raises(DataError, match=r"\[1\]"):
        fit_species([1.0, -2.0, 3.0], [1.0, 1.0, 1.0])
    with pytest.raises(DataError):
        fit_species([1.0, 2.0, 3.0], [1.0, 1.0])


def test_bias_correction():
    fit = fit_species([10.0, 20.0, 40.0, 80.0], [1.0, 2.5, 3.5, 9.0])
    plain = predict_weight(fit, 30.0)
    assert predict_weight(fit, 30.0, bias_correction=True) == pytest.approx(plain * math.exp(fit.residual_variance / 2))
    with pytest.raises(ValueError):
        predict_weight(fit, 0.0)


def _weighed_dataset():
    specs = []
    for i, area in enumerate([100, 200, 400, 800]):
        specs.append((f"a{i}", 0, [make_frame(f"a{i}_0", area=area), make_frame(f"a{i}_1", area=area + 2)]))
    specs.append(("b0", 1, [make_frame("b0_0", area=300)]))
    ds = make_dataset(specs)
    for i, spec in enumerate(ds.specimens[:4]):
        spec.dry_weight_g = 1e-5 * (100 * 2**i + 1) ** 1.5
    ds.specimens[4].dry_weight_g = 0.01
    return ds


def test_fit_all_uses_mean_area_and_skips_small_species(tmp_path):
    ds = _weighed_dataset()
    rep = fit_all(ds)
    assert set(rep.fits) == {"Alpha one"} and set(rep.skipped) == {"Beta two"}
    fit = rep.fits["Alpha one"]
    assert fit.slope == pytest.approx(1.5)
    assert fit.n == 4
    rep.write_fits_csv(tmp_path / "fits.csv")
    with open(tmp_path / "fits.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["species", "a", "b", "r2", "p", "n"]
    assert float(rows[0]["b"]) == pytest.approx(1.5)
    rep.write_points_csv(tmp_path / "pts.csv")
    with open(tmp_path / "pts.csv") as fh:
        pts = list(csv.DictReader(fh))
    assert len(pts) == 5
    assert float(pts[0]["mean_area"]) == 101.0
    assert pts[-1]["fitted_weight_g"] == ""
