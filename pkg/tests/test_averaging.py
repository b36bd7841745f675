from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import norm

from revsde import averaging
from revsde import catalog
from revsde.averaging import EffectiveDynamics
from revsde.averaging import QuadratureSpec
from revsde.averaging import average_on_grid
from revsde.averaging import dirichlet_forms
from revsde.averaging import dirichlet_isometry_gap
from revsde.averaging import effective_diffusion_matrix
from revsde.averaging import effective_drift
from revsde.averaging import effective_potential
from revsde.averaging import effective_sigma
from revsde.averaging import fast_box
from revsde.averaging import klimontovich_identity_residual
from revsde.averaging import marginal_partition
from revsde.averaging import matrix_average_sigma
from revsde.averaging import preservation_residual
from revsde.errors import FieldSpecError
from revsde.errors import QuadratureError
from revsde.errors import SimulationError
from revsde.exprfield import matrix_from_sources
from revsde.exprfield import parse_expression
from revsde.reversibility import GridSpec
from revsde.sde import SlowFastSystem
from revsde.sde import simulate_ensemble
from revsde.sde import to_ito


SQRT_2PI = math.sqrt(2.0 * math.pi)
SLOW_LINE = GridSpec((-6.0,), (6.0,), 121)


def _slow_fast(potential: str, sigma_slow: str, sigma_fast: str = "1") -> SlowFastSystem:
    return SlowFastSystem(
        1,
        1,
        parse_expression(potential, 2),
        matrix_from_sources([[sigma_slow]], 2),
        matrix_from_sources([[sigma_fast]], 2),
    )


def test_partition_function_oracles(quad):
    assert marginal_partition(catalog.sf2(), [0.0], quad) == pytest.approx(SQRT_2PI, rel=1e-8)
    assert marginal_partition(catalog.sf3(), [1.0], quad) == pytest.approx(SQRT_2PI * math.exp(-0.375), rel=1e-8)


def test_partition_matches_refined_simpson(quad):
    sf = _slow_fast("(x^2+y^2)/2 + y^4/4", "1")
    fine = QuadratureSpec(rule="simpson", panels=4000)
    assert marginal_partition(sf, [0.0], quad) == pytest.approx(marginal_partition(sf, [0.0], fine), rel=1e-7)


def test_effective_coefficients_gaussian_oracles(quad):
    sf3 = catalog.sf3()
    assert effective_drift(sf3, [1.0], quad) == pytest.approx(-0.75, abs=1e-7)
    assert effective_sigma(sf3, [1.0], quad) == pytest.approx(1.0, abs=1e-7)
    assert effective_drift(catalog.sf2(), [0.0], quad) == pytest.approx(4.0, abs=1e-7)


def test_effective_sigma_fast_moment(quad):
    sf = _slow_fast("(x^2+y^2)/2", "1+y^2")
    for x in (-1.0, 0.0, 2.0):
        assert effective_sigma(sf, [x], quad) == pytest.approx(math.sqrt(6.0), rel=1e-7)


def test_identity_residual_vanishes(quad, simpson_quad):
    for sf in (catalog.sf2(), catalog.sf3()):
        for x in (-2.0, -0.5, 0.0, 1.3):
            assert abs(klimontovich_identity_residual(sf, [x], quad)) < 1e-6
            assert abs(klimontovich_identity_residual(sf, [x], simpson_quad, fd_step=1e-3)) < 1e-6
            assert abs(klimontovich_identity_residual(sf, [x], quad, fd_step=None)) < 1e-10


def test_identity_residual_with_coupled_volatility(simpson_quad):
    sf = _slow_fast("(x^2+y^2+x*y)/2", "1.5+0.5*sin(x+y)")
    for x in (-1.0, 0.4):
        assert abs(klimontovich_identity_residual(sf, [x], simpson_quad)) < 1e-6


def test_identity_residual_with_two_slow_variables(quad):
    sf = catalog.rotated_slow_fast(catalog.rotated_spec_2d(), catalog.rotated_potential_2d())
    res = klimontovich_identity_residual(sf, [0.3, -0.4], quad)
    assert res.shape == (2,)
    assert np.max(np.abs(res)) < 1e-6


def test_grid_identity_column_matches_pointwise_residual(quad):
    grid = GridSpec((-2.0,), (2.0,), 5)
    for sf in (catalog.sf2(), catalog.sf3()):
        result = average_on_grid(sf, grid, quad, threads=1)
        for k, x in enumerate(grid.axes()[0]):
            pointwise = klimontovich_identity_residual(sf, [x], quad)
            assert result.identity_residual[k, 0] == pytest.approx(pointwise, abs=1e-12)


def test_grid_identity_column_detects_wrong_drift(monkeypatch, quad):
    original = averaging._slow_block_integrand

    def biased(sf, x, shift):
        inner = original(sf, x, shift)

        def integrand(ys):
            cols = inner(ys)
            # 最后一列是 b̄ 的被积函数，另把同样的偏差带进 H 列
            cols[:, -1] += 0.5 * cols[:, 0]
            cols[:, -2] -= 0.5 * cols[:, 0]
            return cols

        return integrand

    monkeypatch.setattr(averaging, "_slow_block_integrand", biased)
    grid = GridSpec((-1.0,), (1.0,), 5)
    result = average_on_grid(catalog.sf3(), grid, quad, threads=1)
    xs = grid.axes()[0]
    np.testing.assert_allclose(result.b_eff[:, 0], -0.75 * xs + 0.5, atol=1e-6)
    np.testing.assert_allclose(result.identity_residual[:, 0], -0.5, atol=1e-6)
    assert result.summary().max_identity_residual == pytest.approx(0.5, abs=1e-6)


def test_average_on_grid_coupled_gaussian(quad):
    result = average_on_grid(catalog.sf3(), SLOW_LINE, quad, threads=1)
    xs = SLOW_LINE.axes()[0]
    np.testing.assert_allclose(result.b_eff[:, 0], -0.75 * xs, atol=1e-6)
    np.testing.assert_allclose(result.sigma_eff[:, 0, 0], 1.0, atol=1e-6)
    np.testing.assert_allclose(result.mu_inf, norm.pdf(xs, scale=math.sqrt(4.0 / 3.0)), atol=1e-6)
    assert np.max(np.abs(result.identity_residual)) < 1e-6
    summary = result.summary()
    assert summary.mu_inf_mass == pytest.approx(1.0, abs=1e-12)
    assert summary.preservation_max_residual is None
    assert summary.n_points == 121


def test_average_on_grid_diagonal_volatility(quad):
    result = average_on_grid(catalog.sf2(), SLOW_LINE, quad, threads=2)
    xs = SLOW_LINE.axes()[0]
    s = 2.0 + np.sin(xs)
    np.testing.assert_allclose(result.sigma_eff[:, 0, 0], s, atol=1e-8)
    np.testing.assert_allclose(result.b_eff[:, 0], 2.0 * s * np.cos(xs) - s * s * xs, atol=1e-6)
    assert np.max(np.abs(result.identity_residual)) < 1e-6
    # U_eff = −log Z_V = x²/2 − log √(2π)
    np.testing.assert_allclose(effective_potential(result), xs**2 / 2 - math.log(SQRT_2PI), atol=1e-8)


def test_average_on_grid_is_thread_independent(quad):
    grid = GridSpec((-2.0,), (2.0,), 9)
    one = average_on_grid(catalog.sf2(), grid, quad, threads=1)
    many = average_on_grid(catalog.sf2(), grid, quad, threads=3)
    assert np.array_equal(one.b_eff, many.b_eff)
    assert np.array_equal(one.Zv, many.Zv)


def test_block_effective_diffusion_is_spd(quad):
    sf = catalog.rotated_slow_fast(catalog.rotated_spec_2d(), catalog.rotated_potential_2d())
    S = effective_diffusion_matrix(sf, [0.3, -0.4], quad)
    np.testing.assert_allclose(S, S.T, atol=0.0)
    assert np.all(np.linalg.eigvalsh(S) > 0.0)
    sigma = effective_sigma(sf, [0.3, -0.4], quad)
    np.testing.assert_allclose(sigma @ sigma, S, atol=1e-12)


def test_rotated_average_keeps_rotation(quad):
    spec = catalog.rotated_spec_2d()
    sigma = matrix_average_sigma(spec, catalog.rotated_potential_2d(), [0.2, 0.5], quad)
    U = spec.U
    inner = U.T @ sigma @ U
    assert abs(inner[0, 1]) < 1e-12
    assert abs(inner[1, 0]) < 1e-12
    assert np.all(np.diag(inner) > 0.0)


@pytest.mark.parametrize(
    "spec, potential, grid",
    [
        (catalog.rotated_spec_2d, catalog.rotated_potential_2d, GridSpec((-1.5, -1.5), (1.5, 1.5), 5)),
        (catalog.rotated_spec_3d, catalog.rotated_potential_3d, GridSpec((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), 3)),
    ],
)
def test_rotated_diagonal_structure_is_preserved(quad, spec, potential, grid):
    s, v = spec(), potential()
    sf = catalog.rotated_slow_fast(s, v)
    result = average_on_grid(sf, grid, quad, rotated=s, threads=1)
    assert np.max(np.abs(result.preservation_residual)) < 1e-6
    assert result.summary().preservation_passed is True
    for x in grid.points()[:3]:
        assert np.max(np.abs(preservation_residual(s, v, x, quad))) < 1e-6


def test_dirichlet_isometry_gaussian_moment(quad):
    quad2d = QuadratureSpec(rule="simpson", panels=400)
    forms = dirichlet_forms(catalog.sf2(), parse_expression("x", 1), quad2d, quad)
    assert forms.energy_effective == pytest.approx(4.5 - math.exp(-2.0) / 2.0, abs=1e-5)
    assert forms.gap < 1e-6
    assert forms.fubini_gap < 1e-6


@pytest.mark.parametrize("f", ["x", "x^2", "sin(x)"])
@pytest.mark.parametrize("system", [catalog.sf2, catalog.sf3])
def test_dirichlet_isometry_gap(quad, f, system):
    quad2d = QuadratureSpec(rule="simpson", panels=400)
    assert dirichlet_isometry_gap(system(), parse_expression(f, 1), quad2d, quad) < 1e-6


def test_dirichlet_gap_is_timescale_free(quad):
    quad2d = QuadratureSpec(rule="simpson", panels=200)
    f = parse_expression("x^2", 1)
    a = dirichlet_isometry_gap(catalog.sf3(1.0), f, quad2d, quad)
    b = dirichlet_isometry_gap(catalog.sf3(500.0), f, quad2d, quad)
    assert a == b


def test_effective_dynamics_forms_agree(quad):
    result = average_on_grid(catalog.sf2(), GridSpec((-3.0,), (3.0,), 121), quad, threads=1)
    dyn = EffectiveDynamics(result)
    ito = dyn.ito_system()
    recast = to_ito(dyn.klimontovich_system())
    for x in (-1.0, 0.0, 0.5, 1.5):
        np.testing.assert_allclose(recast.drift_at([x]), ito.drift_at([x]), atol=5e-3)
    np.testing.assert_allclose(ito.drift_at([0.0]), [4.0], atol=1e-4)


def test_effective_dynamics_does_not_extrapolate(quad):
    result = average_on_grid(catalog.sf3(), GridSpec((-3.0,), (3.0,), 61), quad, threads=1)
    ito = EffectiveDynamics(result).ito_system()
    assert np.all(np.isfinite(ito.drift_at([2.5])))
    assert np.all(np.isnan(ito.drift_at([3.5])))
    with pytest.raises(SimulationError):
        simulate_ensemble(ito, [4.0], 1e-3, 0.01, 20, 0, threads=1)


def test_unbounded_fast_direction_is_reported():
    sf = _slow_fast("x^2/2", "1")
    with pytest.raises(QuadratureError):
        fast_box(sf.potential, 1, [0.0], QuadratureSpec(max_doublings=5))


def test_quadrature_spec_validation():
    with pytest.raises(FieldSpecError):
        QuadratureSpec(panels=401)
    with pytest.raises(FieldSpecError):
        QuadratureSpec(eps_cut=2.0)
