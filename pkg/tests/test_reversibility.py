from __future__ import annotations

import numpy as np
import pytest

from revsde import catalog
from revsde.errors import FieldDomainError
from revsde.errors import FieldSpecError
from revsde.exprfield import make_fieldset
from revsde.exprfield import matrix_from_sources
from revsde.geometry import row_cov_div_matrix
from revsde.models import DerivativeMode
from revsde.models import DivergenceVariant
from revsde.models import MeasureMode
from revsde.reversibility import GibbsSpec
from revsde.reversibility import GridSpec
from revsde.reversibility import NoiseConvention
from revsde.reversibility import block_residuals
from revsde.reversibility import check_report
from revsde.reversibility import classify
from revsde.reversibility import drift_convert
from revsde.reversibility import generator_gap
from revsde.reversibility import graham_ito_drift
from revsde.reversibility import harmonic_equivalence
from revsde.reversibility import lambda_residual
from revsde.reversibility import max_residual_on_grid
from revsde.reversibility import reversible_generator_drift
from revsde.reversibility import sde_generator_drift


LINE_1D = GridSpec((-3.0,), (3.0,), 200)
BOX_2D = GridSpec((-2.0, -2.0), (2.0, 2.0), 21)
LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def _grid_for(fields) -> GridSpec:
    return LINE_1D if fields.dimension == 1 else BOX_2D


def _flat(fields) -> GibbsSpec:
    return GibbsSpec(MeasureMode.FLAT, fields)


def _riemannian(fields) -> GibbsSpec:
    return GibbsSpec(MeasureMode.RIEMANNIAN, fields)


def test_convention_bounds():
    assert NoiseConvention.KLIMONTOVICH.lam == 1.0
    assert NoiseConvention.STRATONOVICH.lam == 0.5
    with pytest.raises(FieldSpecError):
        NoiseConvention(1.5)
    with pytest.raises(FieldSpecError):
        lambda_residual(catalog.f1(), -0.1, [0.0])


def test_one_dimensional_residuals_at_origin():
    f1 = catalog.f1()
    # σσ′ = 2 at x = 0
    np.testing.assert_allclose(lambda_residual(f1, 0.0, [0.0], DivergenceVariant.EUCLIDEAN), [-4.0], atol=1e-12)
    np.testing.assert_allclose(lambda_residual(f1, 1.0, [0.0], DivergenceVariant.EUCLIDEAN), [0.0], atol=1e-12)
    np.testing.assert_allclose(lambda_residual(f1, 0.5, [0.0], DivergenceVariant.COVARIANT), [0.0], atol=1e-12)


def test_generator_gap_examples():
    f1 = catalog.f1()
    np.testing.assert_allclose(generator_gap(f1, 1.0, _flat(f1), [0.0]), [0.0], atol=1e-12)
    np.testing.assert_allclose(generator_gap(f1, 0.5, _riemannian(f1), [0.0]), [0.0], atol=1e-12)
    np.testing.assert_allclose(generator_gap(f1, 0.0, _flat(f1), [0.0]), [-4.0], atol=1e-12)
    # −σ²V′ + 2λσσ′ at x = 1
    x = 1.0
    s, ds = 2.0 + np.sin(x), np.cos(x)
    np.testing.assert_allclose(sde_generator_drift(f1, 1.0, [x]), [-s * s * x + 2.0 * s * ds], rtol=1e-13)
    np.testing.assert_allclose(reversible_generator_drift(f1, _flat(f1), [x]), [-s * s * x + 2.0 * s * ds], rtol=1e-13)


def test_generator_gap_matches_matched_residual(fields, random_points):
    pts = random_points(fields.dimension, count=30)
    for lam in LAMBDAS:
        for gibbs, variant in (
            (_flat(fields), DivergenceVariant.EUCLIDEAN),
            (_riemannian(fields), DivergenceVariant.COVARIANT),
        ):
            gap = generator_gap(fields, lam, gibbs, pts)
            res = lambda_residual(fields, lam, pts, variant)
            np.testing.assert_allclose(gap, res, atol=1e-10)


def test_residual_and_gap_verdicts_agree(fields):
    grid = _grid_for(fields)
    for lam in LAMBDAS:
        for gibbs in (_flat(fields), _riemannian(fields)):
            verdict = classify(fields, lam, gibbs, grid, 1e-6, threads=1)
            assert (verdict.max_residual < 1e-6) == (verdict.generator_gap_max < 1e-6)


def test_residual_is_affine_in_lambda(fields, random_points):
    for x in random_points(fields.dimension, count=10):
        r0 = lambda_residual(fields, 0.0, x)
        r_half = lambda_residual(fields, 0.5, x)
        r1 = lambda_residual(fields, 1.0, x)
        np.testing.assert_allclose(r_half, 0.5 * (r0 + r1), atol=1e-12)


def test_residual_specializations(fields, random_points):
    pts = random_points(fields.dimension, count=20)
    div_M = row_cov_div_matrix(fields, fields.diffusion, pts)
    sigma = fields.volatility_jet(pts, order=0).value
    s_div_sT = np.einsum("nij,nj->ni", sigma, row_cov_div_matrix(fields, fields.volatility_transpose, pts))
    np.testing.assert_allclose(lambda_residual(fields, 0.0, pts), -div_M, atol=1e-12)
    np.testing.assert_allclose(lambda_residual(fields, 0.5, pts), -s_div_sT, atol=1e-12)
    np.testing.assert_allclose(lambda_residual(fields, 1.0, pts), div_M - 2.0 * s_div_sT, atol=1e-12)


def test_known_classifications():
    f1 = catalog.f1()
    klim = classify(f1, 1.0, _flat(f1), LINE_1D, 1e-6)
    assert klim.reversible
    assert klim.variant == DivergenceVariant.EUCLIDEAN

    ito = classify(f1, 0.0, _flat(f1), LINE_1D, 1e-6)
    assert not ito.reversible
    xs = LINE_1D.axes()[0]
    expected = np.max(np.abs(2.0 * (2.0 + np.sin(xs)) * np.cos(xs)))
    assert ito.max_residual == pytest.approx(expected, rel=1e-12)

    strat = classify(f1, 0.5, _riemannian(f1), LINE_1D, 1e-6)
    assert strat.reversible
    assert strat.variant == DivergenceVariant.COVARIANT

    f2 = catalog.f2()
    value, _ = max_residual_on_grid(f2, 1.0, BOX_2D, DivergenceVariant.EUCLIDEAN)
    assert value < 1e-12

    f4 = catalog.f4()
    assert classify(f4, 1.0, _flat(f4), BOX_2D, 1e-6).reversible

    f5 = catalog.f5()
    rotating = classify(f5, 1.0, _flat(f5), BOX_2D, 1e-6)
    assert not rotating.reversible
    # σ = I + uuᵀ，u = (cos x, sin x)：残差恒为 (0, 1)
    assert rotating.max_residual == pytest.approx(1.0, abs=1e-10)


def test_constant_noise_is_reversible_for_every_convention():
    fs = make_fieldset("x^2/2", matrix_from_sources([["1.5"]], 1))
    for lam in LAMBDAS:
        assert classify(fs, lam, _flat(fs), LINE_1D).reversible


def test_classify_independent_of_thread_count():
    f6 = catalog.f6()
    grid = GridSpec((-2.0, -2.0), (2.0, 2.0), 61)
    one = classify(f6, 0.3, _flat(f6), grid, threads=1)
    many = classify(f6, 0.3, _flat(f6), grid, threads=4)
    assert one == many


def test_classify_reports_failure_location():
    fs = make_fieldset("x^2/2", matrix_from_sources([["sqrt(x+1)+1"]], 1))
    with pytest.raises(FieldDomainError) as info:
        classify(fs, 1.0, _flat(fs), GridSpec((-2.0,), (0.0,), 5))
    assert info.value.point is not None


def test_finite_difference_fields_use_looser_tolerance():
    f1 = catalog.f1(DerivativeMode.FINITE_DIFFERENCE)
    verdict = classify(f1, 1.0, _flat(f1), LINE_1D)
    assert verdict.tolerance == 1e-4
    assert verdict.reversible


def test_drift_conversion_examples():
    f1 = catalog.f1()
    np.testing.assert_allclose(drift_convert(0.0, f1, 0.5, 0.0, [0.0]), [2.0], atol=1e-12)
    np.testing.assert_allclose(drift_convert(0.7, f1, 0.3, 0.3, [0.4]), [0.7], atol=0.0)


def test_drift_conversion_round_trip_and_composition(fields, random_points):
    pts = random_points(fields.dimension)

    def B(p):
        return -p + 0.1 * np.sin(p)

    there = drift_convert(B, fields, 1.0, 0.0, pts)
    back = drift_convert(there, fields, 0.0, 1.0, pts)
    np.testing.assert_allclose(back, B(pts), atol=1e-12)

    two_step = drift_convert(drift_convert(B, fields, 1.0, 0.25, pts), fields, 0.25, 0.5, pts)
    np.testing.assert_allclose(two_step, drift_convert(B, fields, 1.0, 0.5, pts), atol=1e-12)


def test_graham_ito_drift_subtracts_covariant_divergence():
    f1 = catalog.f1()
    np.testing.assert_allclose(graham_ito_drift(0.0, f1, [0.0]), [-2.0], atol=1e-12)


def test_harmonic_equivalence():
    f3 = catalog.f3()
    assert harmonic_equivalence(f3, BOX_2D.points(), 1e-8) == (True, True)
    f1 = catalog.f1()
    assert harmonic_equivalence(f1, [[0.0]], 1e-8) == (False, False)
    for fields in (catalog.f2(), catalog.f4(), catalog.f6()):
        for x in BOX_2D.points()[::37]:
            ito, harmonic = harmonic_equivalence(fields, x, 1e-8)
            assert ito == harmonic


def test_block_residuals_of_slow_fast_joint_system():
    joint = catalog.sf2(timescale=10.0).joint_fields()
    pts = BOX_2D.points()
    slow, fast = block_residuals(joint, (1, 1), pts)
    assert np.max(np.abs(slow)) < 1e-12
    assert np.max(np.abs(fast)) < 1e-12
    with pytest.raises(FieldSpecError):
        block_residuals(joint, (1, 2), pts)


def test_check_report_contains_both_variants():
    f5 = catalog.f5()
    report = check_report(f5, 1.0, _flat(f5), BOX_2D)
    assert report.verdict.variant == DivergenceVariant.EUCLIDEAN
    assert report.euclidean_max_residual == pytest.approx(report.verdict.max_residual)
    assert len(report.covariant_argmax_point) == 2


def test_grid_points_are_lexicographic():
    grid = GridSpec((0.0, 10.0), (1.0, 11.0), 2)
    np.testing.assert_array_equal(grid.points(), [[0, 10], [0, 11], [1, 10], [1, 11]])
    with pytest.raises(FieldSpecError):
        GridSpec((1.0,), (0.0,), 3)
