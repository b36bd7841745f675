from __future__ import annotations

import numpy as np
import pytest

from revsde import catalog
from revsde.errors import ConditioningError
from revsde.exprfield import diagonal_from_sources
from revsde.exprfield import make_fieldset
from revsde.geometry import cancellation_gap
from revsde.geometry import geometry_at
from revsde.geometry import geometry_batch
from revsde.geometry import graham_correction
from revsde.geometry import harmonic_defect
from revsde.geometry import laplace_beltrami_drift
from revsde.geometry import metric_compatibility_residual
from revsde.geometry import row_cov_div_matrix
from revsde.geometry import row_euclid_div_matrix
from revsde.geometry import trace_identity_residual


IDENTITY_TOL = 1e-8


def test_geometry_point_invariants(fields, random_points):
    for x in random_points(fields.dimension, count=20):
        gp = geometry_at(fields, x)
        np.testing.assert_allclose(gp.g @ gp.M, np.eye(fields.dimension), atol=1e-10)
        assert gp.omega > 0.0
        assert gp.sqrt_omega == pytest.approx(np.sqrt(gp.omega))
        np.testing.assert_allclose(gp.christoffel, np.swapaxes(gp.christoffel, 1, 2), atol=1e-12)


def test_trace_identity(fields, random_points):
    res = trace_identity_residual(fields, random_points(fields.dimension))
    assert np.max(np.abs(res)) < IDENTITY_TOL


def test_metric_compatibility(fields, random_points):
    res = metric_compatibility_residual(fields, random_points(fields.dimension))
    assert np.max(np.abs(res)) < IDENTITY_TOL


def test_cancellation_gap_vanishes(fields, random_points):
    gap = cancellation_gap(fields, random_points(fields.dimension))
    assert np.max(np.abs(gap)) < IDENTITY_TOL


def test_graham_correction_equals_covariant_divergence(fields, random_points):
    pts = random_points(fields.dimension)
    expected = row_cov_div_matrix(fields, fields.diffusion, pts)
    assert np.max(np.abs(graham_correction(fields, pts) - expected)) < IDENTITY_TOL


def test_laplace_beltrami_contraction(fields, random_points):
    pts = random_points(fields.dimension)
    expected = row_cov_div_matrix(fields, fields.diffusion, pts)
    assert np.max(np.abs(laplace_beltrami_drift(fields, pts) - expected)) < IDENTITY_TOL


def test_one_dimensional_values_at_origin():
    f1 = catalog.f1()
    np.testing.assert_allclose(graham_correction(f1, [0.0]), [2.0], atol=1e-12)
    np.testing.assert_allclose(laplace_beltrami_drift(f1, [0.0]), [2.0], atol=1e-12)
    assert np.max(np.abs(cancellation_gap(f1, [0.0]))) < 1e-10
    # Γ = −σ′/σ = −1/2
    assert geometry_at(f1, [0.0]).christoffel[0, 0, 0] == pytest.approx(-0.5)


def test_rotated_diagonal_cancellation_at_point():
    assert np.max(np.abs(cancellation_gap(catalog.f4(), [0.3, -0.7]))) < IDENTITY_TOL


def test_constant_volatility_is_flat():
    fs = make_fieldset("(x^2+y^2)/2", diagonal_from_sources(["2", "0.5"], 2))
    x = [0.4, 1.1]
    assert np.all(cancellation_gap(fs, x) == 0.0)
    assert np.all(graham_correction(fs, x) == 0.0)
    assert np.all(laplace_beltrami_drift(fs, x) == 0.0)
    assert np.all(harmonic_defect(fs, x) == 0.0)


def test_euclidean_divergence_of_diagonal_diffusion():
    f2 = catalog.f2()
    x = np.array([0.0, 0.0])
    # ∂_x (2 + sin x)² = 2(2 + sin x) cos x = 4
    np.testing.assert_allclose(row_euclid_div_matrix(f2.diffusion, x, f2), [4.0, 0.0], atol=1e-14)
    np.testing.assert_allclose(graham_correction(f2, x), row_cov_div_matrix(f2, f2.diffusion, x), atol=1e-12)


def test_batch_and_point_agree(random_points):
    f6 = catalog.f6()
    pts = random_points(2, count=5)
    batch = geometry_batch(f6, pts)
    for i, x in enumerate(pts):
        gp = geometry_at(f6, x)
        np.testing.assert_allclose(batch.M[i], gp.M, atol=0.0)
        np.testing.assert_allclose(batch.christoffel[i], gp.christoffel, atol=1e-15)


def test_singular_volatility_fails_fast():
    fs = make_fieldset("x^2/2", diagonal_from_sources(["sin(x)"], 1))
    with pytest.raises(ConditioningError):
        geometry_at(fs, [0.0])
